//! Per-element modal filters and the fine-to-coarse restriction operator.
//!
//! Filtering transforms nodal values to tensor-product Legendre coefficients,
//! attenuates modes per the spec below, and transforms back. Restriction
//! applies a sharp modal cutoff at the coarse resolvable order and then
//! evaluates the fine polynomial at the coarse GLL nodes.

use crate::basis::legendre_vandermonde;
use crate::field::FlowField;
use crate::mesh::{GatherMode, SpectralMesh};
use crate::{SolverError, SolverResult};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    /// Sharp truncation: modes above the cutoff are removed (a projection).
    ModalCutoff,
    /// Smooth roll-off above the cutoff.
    ModalExponential,
    /// Attenuate only the top mode by the blend weight (the implicit-LES
    /// stabilization filter).
    ImplicitBlend,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub cutoff_order: usize,
    /// Blend weight for `ImplicitBlend` (ignored otherwise).
    #[serde(default)]
    pub blend_weight: f64,
}

impl FilterSpec {
    pub fn sharp(cutoff_order: usize) -> FilterSpec {
        FilterSpec {
            kind: FilterKind::ModalCutoff,
            cutoff_order,
            blend_weight: 0.0,
        }
    }
}

/// Modal transform workspace for one mesh order.
pub struct ModalFilter {
    v: Array2<f64>,
    vinv: Array2<f64>,
    order: usize,
}

impl ModalFilter {
    pub fn new(mesh: &SpectralMesh) -> ModalFilter {
        let (v, vinv) = legendre_vandermonde(&mesh.vel_basis);
        ModalFilter {
            v,
            vinv,
            order: mesh.order_vel,
        }
    }

    /// Nodal -> Legendre coefficients for one element matrix (ny, nx).
    fn to_modal(&self, u: &Array2<f64>) -> Array2<f64> {
        self.vinv.dot(u).dot(&self.vinv.t())
    }

    fn to_nodal(&self, c: &Array2<f64>) -> Array2<f64> {
        self.v.dot(c).dot(&self.v.t())
    }

    fn mode_factor(&self, spec: &FilterSpec, m: usize, n: usize) -> f64 {
        let p = self.order;
        match spec.kind {
            FilterKind::ModalCutoff => {
                if m > spec.cutoff_order || n > spec.cutoff_order {
                    0.0
                } else {
                    1.0
                }
            }
            FilterKind::ModalExponential => {
                let c = spec.cutoff_order;
                let k = m.max(n);
                if k <= c {
                    1.0
                } else {
                    let span = (p - c).max(1) as f64;
                    (-16.0 * ((k - c) as f64 / span).powi(2)).exp()
                }
            }
            FilterKind::ImplicitBlend => {
                if m >= p || n >= p {
                    1.0 - spec.blend_weight
                } else {
                    1.0
                }
            }
        }
    }

    /// Filter every component of a (E, nv, d) nodal array in place.
    pub fn apply(&self, field: &mut Array3<f64>, spec: &FilterSpec) {
        let n1 = self.order + 1;
        let (e, nv, d) = field.dim();
        assert_eq!(nv, n1 * n1);
        for el in 0..e {
            for c in 0..d {
                let comp = field
                    .index_axis(Axis(0), el)
                    .index_axis(Axis(1), c)
                    .to_owned()
                    .into_shape_clone((n1, n1))
                    .unwrap();
                let mut modal = self.to_modal(&comp);
                for m in 0..n1 {
                    for n in 0..n1 {
                        modal[[m, n]] *= self.mode_factor(spec, m, n);
                    }
                }
                let back = self.to_nodal(&modal);
                for iy in 0..n1 {
                    for ix in 0..n1 {
                        field[[el, iy * n1 + ix, c]] = back[[iy, ix]];
                    }
                }
            }
        }
    }

    /// Per-element modal energy above `cutoff` relative to total (diagnostic
    /// used by the dataset integrity check).
    pub fn energy_above(&self, field: &Array3<f64>, cutoff: usize) -> f64 {
        let n1 = self.order + 1;
        let (e, _, d) = field.dim();
        let mut hi = 0.0;
        let mut total = 0.0;
        for el in 0..e {
            for c in 0..d {
                let comp = field
                    .index_axis(Axis(0), el)
                    .index_axis(Axis(1), c)
                    .to_owned()
                    .into_shape_clone((n1, n1))
                    .unwrap();
                let modal = self.to_modal(&comp);
                for m in 0..n1 {
                    for n in 0..n1 {
                        let v = modal[[m, n]] * modal[[m, n]];
                        total += v;
                        if m > cutoff || n > cutoff {
                            hi += v;
                        }
                    }
                }
            }
        }
        if total == 0.0 {
            0.0
        } else {
            hi / total
        }
    }
}

/// Modal low-pass of a velocity-grid flow field.
pub fn modal_filter(field: &FlowField, spec: &FilterSpec) -> SolverResult<FlowField> {
    if spec.cutoff_order > field.mesh.order_vel {
        return Err(SolverError::InvalidConfig(format!(
            "filter cutoff {} above source order {}",
            spec.cutoff_order, field.mesh.order_vel
        )));
    }
    let mf = ModalFilter::new(&field.mesh);
    let mut out = field.clone();
    mf.apply(&mut out.velocity, spec);
    Ok(out)
}

/// Implicit-LES stabilization: attenuate the top velocity mode by alpha.
pub fn implicit_les_filter(field: &FlowField, alpha: f64) -> FlowField {
    let spec = FilterSpec {
        kind: FilterKind::ImplicitBlend,
        cutoff_order: field.mesh.order_vel,
        blend_weight: alpha,
    };
    let mf = ModalFilter::new(&field.mesh);
    let mut out = field.clone();
    mf.apply(&mut out.velocity, &spec);
    out
}

/// Node-location table for evaluating a fine-mesh field at coarse nodes.
struct Restriction1D {
    /// For each coarse element and coarse node: fine element index.
    fine_el: Vec<Vec<usize>>,
    /// Matching evaluation rows over the fine element's nodes.
    rows: Vec<Vec<ndarray::Array1<f64>>>,
}

fn restriction_1d(
    coarse_elems: usize,
    fine_elems: usize,
    coarse_nodes: &ndarray::Array1<f64>,
    fine_mesh_basis: &crate::basis::Basis1D,
) -> Restriction1D {
    let ratio = fine_elems / coarse_elems;
    let mut fine_el = Vec::with_capacity(coarse_elems);
    let mut rows = Vec::with_capacity(coarse_elems);
    for ec in 0..coarse_elems {
        let mut els = Vec::with_capacity(coarse_nodes.len());
        let mut rws = Vec::with_capacity(coarse_nodes.len());
        for &xi in coarse_nodes.iter() {
            // physical coordinate of the coarse node
            let x = (ec as f64 + 0.5 * (xi + 1.0)) / coarse_elems as f64;
            // containing fine element (right-continuous at interfaces)
            let ef = ((x * fine_elems as f64).floor() as usize).min(fine_elems - 1);
            let local = 2.0 * (x * fine_elems as f64 - ef as f64) - 1.0;
            els.push(ef);
            rws.push(fine_mesh_basis.eval_row(local.clamp(-1.0, 1.0)));
        }
        let _ = ratio;
        fine_el.push(els);
        rows.push(rws);
    }
    Restriction1D { fine_el, rows }
}

/// Restrict a fine-grid field to a coarse mesh: sharp modal cutoff at the
/// coarse order, polynomial evaluation at coarse GLL nodes, then an
/// averaging gather-scatter so the result is C0.
pub fn restrict_to_coarse(
    fine: &FlowField,
    coarse_mesh: &Arc<SpectralMesh>,
) -> SolverResult<FlowField> {
    let fex = fine.mesh.elements_x;
    let fey = fine.mesh.elements_y;
    let cex = coarse_mesh.elements_x;
    let cey = coarse_mesh.elements_y;
    if fex % cex != 0 || fey % cey != 0 {
        return Err(SolverError::GridMismatch(format!(
            "fine mesh {fex}x{fey} is not a multiple of coarse {cex}x{cey}"
        )));
    }
    let cutoff = coarse_mesh.order_vel.min(fine.mesh.order_vel);
    let filtered = modal_filter(fine, &FilterSpec::sharp(cutoff))?;

    let rx = restriction_1d(cex, fex, &coarse_mesh.vel_basis.nodes, &fine.mesh.vel_basis);
    let ry = restriction_1d(cey, fey, &coarse_mesh.vel_basis.nodes, &fine.mesh.vel_basis);
    let n1f = fine.mesh.order_vel + 1;
    let n1c = coarse_mesh.order_vel + 1;

    let mut out = FlowField::zeros(coarse_mesh);
    out.time = fine.time;
    for ecy in 0..cey {
        for ecx in 0..cex {
            let el_c = ecy * cex + ecx;
            for ky in 0..n1c {
                for kx in 0..n1c {
                    let efx = rx.fine_el[ecx][kx];
                    let efy = ry.fine_el[ecy][ky];
                    let el_f = efy * fex + efx;
                    let row_x = &rx.rows[ecx][kx];
                    let row_y = &ry.rows[ecy][ky];
                    for c in 0..2 {
                        let mut acc = 0.0;
                        for iy in 0..n1f {
                            let wy = row_y[iy];
                            if wy == 0.0 {
                                continue;
                            }
                            for ix in 0..n1f {
                                acc += wy
                                    * row_x[ix]
                                    * filtered.velocity[[el_f, iy * n1f + ix, c]];
                            }
                        }
                        out.velocity[[el_c, ky * n1c + kx, c]] = acc;
                    }
                }
            }
        }
    }
    coarse_mesh.gather_scatter(&mut out.velocity.view_mut(), GatherMode::Average);
    Ok(out)
}

/// Polynomial injection of a coarse field onto a finer mesh (exact for
/// coarse-resolvable content; the right inverse of restriction).
pub fn prolong_to_fine(coarse: &FlowField, fine_mesh: &Arc<SpectralMesh>) -> SolverResult<FlowField> {
    let fex = fine_mesh.elements_x;
    let cex = coarse.mesh.elements_x;
    let fey = fine_mesh.elements_y;
    let cey = coarse.mesh.elements_y;
    if fex % cex != 0 || fey % cey != 0 {
        return Err(SolverError::GridMismatch(
            "prolongation needs nested meshes".into(),
        ));
    }
    let n1f = fine_mesh.order_vel + 1;
    let n1c = coarse.mesh.order_vel + 1;
    let mut out = FlowField::zeros(fine_mesh);
    out.time = coarse.time;
    for efy in 0..fey {
        for efx in 0..fex {
            let el_f = efy * fex + efx;
            for ky in 0..n1f {
                for kx in 0..n1f {
                    let x = fine_mesh.x_of(efx, fine_mesh.vel_basis.nodes[kx]);
                    let y = fine_mesh.y_of(efy, fine_mesh.vel_basis.nodes[ky]);
                    let ecx = ((x * cex as f64).floor() as usize).min(cex - 1);
                    let ecy = ((y * cey as f64).floor() as usize).min(cey - 1);
                    let lx = (2.0 * (x * cex as f64 - ecx as f64) - 1.0).clamp(-1.0, 1.0);
                    let ly = (2.0 * (y * cey as f64 - ecy as f64) - 1.0).clamp(-1.0, 1.0);
                    let row_x = coarse.mesh.vel_basis.eval_row(lx);
                    let row_y = coarse.mesh.vel_basis.eval_row(ly);
                    let el_c = ecy * cex + ecx;
                    for c in 0..2 {
                        let mut acc = 0.0;
                        for iy in 0..n1c {
                            for ix in 0..n1c {
                                acc += row_y[iy]
                                    * row_x[ix]
                                    * coarse.velocity[[el_c, iy * n1c + ix, c]];
                            }
                        }
                        out.velocity[[el_f, ky * n1f + kx, c]] = acc;
                    }
                }
            }
        }
    }
    fine_mesh.gather_scatter(&mut out.velocity.view_mut(), GatherMode::Average);
    Ok(out)
}
