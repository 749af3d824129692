//! Periodic quadrilateral spectral-element mesh on the unit square.
//!
//! Storage is element-local: every element keeps its own copies of the
//! (P+1)^2 velocity nodes, and interface nodes are reconciled through
//! gather-scatter (direct stiffness summation). Pressure nodes are interior
//! Gauss points and never shared.

use crate::basis::{gl_basis, gll_basis, Basis1D};
use crate::{SolverError, SolverResult};
use ndarray::{Array3, ArrayViewMut2, ArrayViewMut3};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatherMode {
    /// Replace shared-node values by the sum over coincident copies.
    Sum,
    /// Replace shared-node values by their multiplicity-weighted average.
    Average,
}

#[derive(Debug)]
pub struct SpectralMesh {
    pub elements_x: usize,
    pub elements_y: usize,
    pub order_vel: usize,
    pub order_pres: usize,
    pub vel_basis: Basis1D,
    pub pres_basis: Basis1D,
    /// Per element-local velocity node: unique global id under periodic wrap.
    global_ids: Vec<usize>,
    /// Per element-local velocity node: 1 / number of coincident copies.
    inv_multiplicity: Vec<f64>,
    n_unique: usize,
}

impl SpectralMesh {
    /// `elements` per side, velocity order `p`; pressure lives at order p-2.
    pub fn new(elements_x: usize, elements_y: usize, p: usize) -> SolverResult<Arc<SpectralMesh>> {
        if elements_x == 0 || elements_y == 0 {
            return Err(SolverError::InvalidConfig("mesh needs at least one element".into()));
        }
        if p < 2 {
            return Err(SolverError::InvalidConfig(format!(
                "velocity order must be >= 2 so pressure order P-2 is nonnegative, got {p}"
            )));
        }
        let vel_basis = gll_basis(p)?;
        let pres_basis = gl_basis(p - 2)?;
        let n1 = p + 1;
        let nv = n1 * n1;
        let e = elements_x * elements_y;
        let gx_count = elements_x * p;
        let gy_count = elements_y * p;
        let mut global_ids = vec![0usize; e * nv];
        let mut counts = vec![0u32; gx_count * gy_count];
        for ey in 0..elements_y {
            for ex in 0..elements_x {
                let el = ey * elements_x + ex;
                for iy in 0..n1 {
                    for ix in 0..n1 {
                        let gx = (ex * p + ix) % gx_count;
                        let gy = (ey * p + iy) % gy_count;
                        let gid = gy * gx_count + gx;
                        global_ids[el * nv + iy * n1 + ix] = gid;
                        counts[gid] += 1;
                    }
                }
            }
        }
        let inv_multiplicity = global_ids
            .iter()
            .map(|&gid| 1.0 / counts[gid] as f64)
            .collect();
        Ok(Arc::new(SpectralMesh {
            elements_x,
            elements_y,
            order_vel: p,
            order_pres: p - 2,
            vel_basis,
            pres_basis,
            global_ids,
            inv_multiplicity,
            n_unique: gx_count * gy_count,
        }))
    }

    pub fn n_elements(&self) -> usize {
        self.elements_x * self.elements_y
    }

    /// Element-local velocity nodes per element, (P+1)^2.
    pub fn n_vel_nodes(&self) -> usize {
        (self.order_vel + 1) * (self.order_vel + 1)
    }

    pub fn n_pres_nodes(&self) -> usize {
        (self.order_pres + 1) * (self.order_pres + 1)
    }

    pub fn n_unique_vel_nodes(&self) -> usize {
        self.n_unique
    }

    /// Element widths (uniform mesh on the unit square).
    pub fn element_size(&self) -> (f64, f64) {
        (1.0 / self.elements_x as f64, 1.0 / self.elements_y as f64)
    }

    /// Map from reference coordinate to physical x for element column `ex`.
    pub fn x_of(&self, ex: usize, xi: f64) -> f64 {
        let hx = 1.0 / self.elements_x as f64;
        (ex as f64 + 0.5 * (xi + 1.0)) * hx
    }

    pub fn y_of(&self, ey: usize, eta: f64) -> f64 {
        let hy = 1.0 / self.elements_y as f64;
        (ey as f64 + 0.5 * (eta + 1.0)) * hy
    }

    pub fn inv_multiplicity(&self) -> &[f64] {
        &self.inv_multiplicity
    }

    /// Smallest node spacing, for CFL monitoring.
    pub fn min_node_spacing(&self) -> f64 {
        let nodes = &self.vel_basis.nodes;
        let mut min_gap = f64::INFINITY;
        for k in 1..nodes.len() {
            min_gap = min_gap.min(nodes[k] - nodes[k - 1]);
        }
        let (hx, hy) = self.element_size();
        (0.5 * min_gap * hx).min(0.5 * min_gap * hy)
    }

    /// Direct stiffness summation over one scalar field of shape (E, nv).
    ///
    /// Deterministic two-pass scheme: accumulate into unique nodes in element
    /// order, then scatter back so all copies agree bit-for-bit.
    pub fn gather_scatter_scalar(&self, field: &mut ArrayViewMut2<f64>, mode: GatherMode) {
        let (e, nv) = field.dim();
        assert_eq!(e, self.n_elements());
        assert_eq!(nv, self.n_vel_nodes());
        let mut acc = vec![0.0f64; self.n_unique];
        for el in 0..e {
            for n in 0..nv {
                acc[self.global_ids[el * nv + n]] += field[[el, n]];
            }
        }
        match mode {
            GatherMode::Sum => {
                for el in 0..e {
                    for n in 0..nv {
                        field[[el, n]] = acc[self.global_ids[el * nv + n]];
                    }
                }
            }
            GatherMode::Average => {
                for el in 0..e {
                    for n in 0..nv {
                        let idx = el * nv + n;
                        field[[el, n]] = acc[self.global_ids[idx]] * self.inv_multiplicity[idx];
                    }
                }
            }
        }
    }

    /// Gather-scatter over a (E, nv, d) vector field.
    pub fn gather_scatter(&self, field: &mut ArrayViewMut3<f64>, mode: GatherMode) {
        let d = field.dim().2;
        for c in 0..d {
            let mut comp = field.index_axis_mut(ndarray::Axis(2), c);
            self.gather_scatter_scalar(&mut comp, mode);
        }
    }

    /// Gather-scatter on one planar component stored as a flat (E * nv)
    /// slice; the fast path inside assembled operators.
    pub fn gather_scatter_plane(&self, field: &mut [f64], mode: GatherMode) {
        assert_eq!(field.len(), self.n_elements() * self.n_vel_nodes());
        let mut acc = vec![0.0f64; self.n_unique];
        for (i, v) in field.iter().enumerate() {
            acc[self.global_ids[i]] += v;
        }
        match mode {
            GatherMode::Sum => {
                for (i, v) in field.iter_mut().enumerate() {
                    *v = acc[self.global_ids[i]];
                }
            }
            GatherMode::Average => {
                for (i, v) in field.iter_mut().enumerate() {
                    *v = acc[self.global_ids[i]] * self.inv_multiplicity[i];
                }
            }
        }
    }

    /// Checked variant used by the public operator surface.
    pub fn try_gather_scatter(
        &self,
        field: &mut Array3<f64>,
        mode: GatherMode,
    ) -> SolverResult<()> {
        let (e, nv, _) = field.dim();
        if e != self.n_elements() || nv != self.n_vel_nodes() {
            return Err(SolverError::GridMismatch(format!(
                "gather_scatter: field ({e}, {nv}, _) does not match mesh ({}, {})",
                self.n_elements(),
                self.n_vel_nodes()
            )));
        }
        self.gather_scatter(&mut field.view_mut(), mode);
        Ok(())
    }

    /// Global inner product over element-local storage of a continuous field:
    /// shared copies are de-duplicated by inverse multiplicity.
    pub fn dot_unique(&self, a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        let (e, nv, d) = a.dim();
        let mut s = 0.0;
        for el in 0..e {
            for n in 0..nv {
                let m = self.inv_multiplicity[el * nv + n];
                for c in 0..d {
                    s += m * a[[el, n, c]] * b[[el, n, c]];
                }
            }
        }
        s
    }

    /// Physical coordinates of every element-local velocity node, (E, nv, 2).
    pub fn vel_node_coords(&self) -> Array3<f64> {
        let n1 = self.order_vel + 1;
        let mut out = Array3::zeros((self.n_elements(), self.n_vel_nodes(), 2));
        for ey in 0..self.elements_y {
            for ex in 0..self.elements_x {
                let el = ey * self.elements_x + ex;
                for iy in 0..n1 {
                    for ix in 0..n1 {
                        let n = iy * n1 + ix;
                        out[[el, n, 0]] = self.x_of(ex, self.vel_basis.nodes[ix]);
                        out[[el, n, 1]] = self.y_of(ey, self.vel_basis.nodes[iy]);
                    }
                }
            }
        }
        out
    }

    /// Physical coordinates of pressure nodes, (E, np, 2).
    pub fn pres_node_coords(&self) -> Array3<f64> {
        let n1 = self.order_pres + 1;
        let mut out = Array3::zeros((self.n_elements(), self.n_pres_nodes(), 2));
        for ey in 0..self.elements_y {
            for ex in 0..self.elements_x {
                let el = ey * self.elements_x + ex;
                for iy in 0..n1 {
                    for ix in 0..n1 {
                        let n = iy * n1 + ix;
                        out[[el, n, 0]] = self.x_of(ex, self.pres_basis.nodes[ix]);
                        out[[el, n, 1]] = self.y_of(ey, self.pres_basis.nodes[iy]);
                    }
                }
            }
        }
        out
    }

    /// True when all coincident copies of shared nodes agree to `tol`.
    pub fn is_continuous(&self, field: &Array3<f64>, tol: f64) -> bool {
        let mut avg = field.clone();
        self.gather_scatter(&mut avg.view_mut(), GatherMode::Average);
        field
            .iter()
            .zip(avg.iter())
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MeshSpec {
    pub elements_x: usize,
    pub elements_y: usize,
    pub order: usize,
}

impl MeshSpec {
    pub fn build(&self) -> SolverResult<Arc<SpectralMesh>> {
        SpectralMesh::new(self.elements_x, self.elements_y, self.order)
    }
}
