//! Pointwise and spectral diagnostics: quadrature RMSE, uniform-grid
//! sampling of the spectral-element solution, and the turbulent kinetic
//! energy spectrum integrated over integer-wavenumber annuli.
//!
//! Spectrum conventions (pinned so the Parseval test is exact): the DFT is
//! normalized by 1/N^2, TKE per mode is 0.5 (|u_hat|^2 + |v_hat|^2), bins are
//! round-to-nearest-integer |k|, and summing E(k) over all bins returns the
//! grid-mean kinetic energy.

use crate::field::FlowField;
use crate::{SolverError, SolverResult};
use ndarray::{Array2, Array3};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

/// Root-mean-square error sqrt(∫ |a - b|^2 dx) over both velocity
/// components, computed with the GLL quadrature of the fields' mesh.
pub fn rmse(a: &FlowField, b: &FlowField) -> SolverResult<f64> {
    a.check_same_mesh(b)?;
    let mesh = &a.mesh;
    let n1 = mesh.order_vel + 1;
    let (hx, hy) = mesh.element_size();
    let jac = 0.25 * hx * hy;
    let w = &mesh.vel_basis.weights;
    let mut s = 0.0;
    let (e, _, d) = a.velocity.dim();
    for el in 0..e {
        for iy in 0..n1 {
            for ix in 0..n1 {
                let n = iy * n1 + ix;
                let wq = w[iy] * w[ix] * jac;
                for c in 0..d {
                    let diff = a.velocity[[el, n, c]] - b.velocity[[el, n, c]];
                    s += wq * diff * diff;
                }
            }
        }
    }
    Ok(s.sqrt())
}

/// Exact polynomial evaluation of the solution at an N x N uniform grid
/// with points x_i = i/N (periodic convention).
pub fn to_uniform_grid(field: &FlowField, n: usize) -> Array3<f64> {
    let mesh = &field.mesh;
    let n1 = mesh.order_vel + 1;
    let ex = mesh.elements_x;
    let ey = mesh.elements_y;
    // 1-d evaluation tables: for each uniform index, containing element and
    // the Lagrange row at the local coordinate
    let table = |elems: usize| -> (Vec<usize>, Array2<f64>) {
        let mut els = Vec::with_capacity(n);
        let mut rows = Array2::zeros((n, n1));
        for i in 0..n {
            let x = i as f64 / n as f64;
            let e = ((x * elems as f64).floor() as usize).min(elems - 1);
            let local = (2.0 * (x * elems as f64 - e as f64) - 1.0).clamp(-1.0, 1.0);
            els.push(e);
            rows.row_mut(i).assign(&mesh.vel_basis.eval_row(local));
        }
        (els, rows)
    };
    let (ex_of, rows_x) = table(ex);
    let (ey_of, rows_y) = table(ey);
    let mut out = Array3::zeros((n, n, 2));
    for gy in 0..n {
        for gx in 0..n {
            let el = ey_of[gy] * ex + ex_of[gx];
            for c in 0..2 {
                let mut acc = 0.0;
                for iy in 0..n1 {
                    let wy = rows_y[[gy, iy]];
                    if wy == 0.0 {
                        continue;
                    }
                    for ix in 0..n1 {
                        acc += wy * rows_x[[gx, ix]] * field.velocity[[el, iy * n1 + ix, c]];
                    }
                }
                out[[gy, gx, c]] = acc;
            }
        }
    }
    out
}

/// Energy per integer-wavenumber annulus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Spectrum {
    /// Annulus index k = round(|k|).
    pub k: Vec<usize>,
    /// Energy content per annulus (velocity^2 units).
    pub energy: Vec<f64>,
    pub n_fields_averaged: usize,
}

impl Spectrum {
    pub fn total_energy(&self) -> f64 {
        self.energy.iter().sum()
    }

    /// Mean over a nonempty set of spectra with identical binning.
    pub fn average(spectra: &[Spectrum]) -> SolverResult<Spectrum> {
        let first = spectra
            .first()
            .ok_or_else(|| SolverError::InvalidConfig("empty spectrum set".into()))?;
        let mut energy = vec![0.0; first.energy.len()];
        for s in spectra {
            if s.energy.len() != energy.len() {
                return Err(SolverError::GridMismatch(
                    "spectra with different bin counts".into(),
                ));
            }
            for (a, b) in energy.iter_mut().zip(s.energy.iter()) {
                *a += b;
            }
        }
        let inv = 1.0 / spectra.len() as f64;
        Ok(Spectrum {
            k: first.k.clone(),
            energy: energy.into_iter().map(|e| e * inv).collect(),
            n_fields_averaged: spectra.iter().map(|s| s.n_fields_averaged).sum(),
        })
    }
}

fn fft2(grid: &Array2<f64>) -> Array2<Complex<f64>> {
    let n = grid.nrows();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut data: Vec<Complex<f64>> = grid.iter().map(|&v| Complex::new(v, 0.0)).collect();
    // rows
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    // columns via transpose
    let mut t: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = data[i * n + j];
        }
    }
    for row in t.chunks_mut(n) {
        fft.process(row);
    }
    let mut out = Array2::from_elem((n, n), Complex::new(0.0, 0.0));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = t[j * n + i] / (n * n) as f64;
        }
    }
    out
}

/// TKE spectrum of uniform-grid samples (n, n, 2).
pub fn tke_spectrum_of_grid(grid: &Array3<f64>) -> Spectrum {
    let n = grid.dim().0;
    let u = grid.index_axis(ndarray::Axis(2), 0).to_owned();
    let v = grid.index_axis(ndarray::Axis(2), 1).to_owned();
    let uh = fft2(&u);
    let vh = fft2(&v);
    let kmax_bin = ((((n / 2) * (n / 2) * 2) as f64).sqrt()).round() as usize + 1;
    let mut energy = vec![0.0; kmax_bin + 1];
    let signed = |i: usize| -> i64 {
        if i <= n / 2 {
            i as i64
        } else {
            i as i64 - n as i64
        }
    };
    for i in 0..n {
        for j in 0..n {
            let ky = signed(i) as f64;
            let kx = signed(j) as f64;
            let bin = (kx * kx + ky * ky).sqrt().round() as usize;
            let e = 0.5 * (uh[[i, j]].norm_sqr() + vh[[i, j]].norm_sqr());
            energy[bin.min(kmax_bin)] += e;
        }
    }
    Spectrum {
        k: (0..=kmax_bin).collect(),
        energy,
        n_fields_averaged: 1,
    }
}

/// TKE spectrum of a flow field after interpolation to an N x N grid.
pub fn tke_spectrum(field: &FlowField, n: usize) -> Spectrum {
    tke_spectrum_of_grid(&to_uniform_grid(field, n))
}

/// Arithmetic mean of per-snapshot spectra over `trajectory[start..end]`.
pub fn spectrum_time_average(
    trajectory: &[FlowField],
    start: usize,
    end: usize,
    n: usize,
) -> SolverResult<Spectrum> {
    if end <= start || end > trajectory.len() {
        return Err(SolverError::InvalidConfig(format!(
            "bad averaging range {start}..{end} for {} snapshots",
            trajectory.len()
        )));
    }
    let spectra: Vec<Spectrum> = trajectory[start..end]
        .iter()
        .map(|f| tke_spectrum(f, n))
        .collect();
    Spectrum::average(&spectra)
}

/// Default uniform-grid resolution for spectra: 4 x elements-per-side x
/// nodes-per-element-side.
pub fn default_spectrum_resolution(field: &FlowField) -> usize {
    4 * field.mesh.elements_x.max(field.mesh.elements_y) * (field.mesh.order_vel + 1)
}

/// Grid-mean kinetic energy of uniform samples (Parseval counterpart).
pub fn mean_kinetic_energy_of_grid(grid: &Array3<f64>) -> f64 {
    let n = grid.dim().0;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += 0.5 * (grid[[i, j, 0]].powi(2) + grid[[i, j, 1]].powi(2));
        }
    }
    s / (n * n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::SpectralMesh;

    #[test]
    fn rmse_of_identical_fields_is_zero() {
        let mesh = SpectralMesh::new(3, 3, 4).unwrap();
        let f = FlowField::from_fn(&mesh, |x, y| (x + y, x * y));
        assert!(rmse(&f, &f).unwrap() < 1e-15);
    }

    #[test]
    fn rmse_constant_difference_both_components() {
        let mesh = SpectralMesh::new(3, 3, 4).unwrap();
        let c = 0.37;
        let f = FlowField::from_fn(&mesh, |_, _| (0.0, 0.0));
        let g = FlowField::from_fn(&mesh, |_, _| (c, c));
        let r = rmse(&f, &g).unwrap();
        assert!((r - c * 2.0_f64.sqrt()).abs() < 1e-12, "{r}");
    }

    #[test]
    fn rmse_sine_in_one_component() {
        let mesh = SpectralMesh::new(4, 4, 8).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let f = FlowField::from_fn(&mesh, |x, _| ((two_pi * x).sin(), 0.0));
        let z = FlowField::zeros(&mesh);
        let r = rmse(&f, &z).unwrap();
        assert!((r - 0.5_f64.sqrt()).abs() < 1e-8, "{r}");
    }

    #[test]
    fn rmse_is_a_metric() {
        let mesh = SpectralMesh::new(2, 2, 5).unwrap();
        let f = FlowField::from_fn(&mesh, |x, y| ((3.0 * x).sin(), y));
        let g = FlowField::from_fn(&mesh, |x, y| (x, (2.0 * y).cos()));
        let ab = rmse(&f, &g).unwrap();
        let ba = rmse(&g, &f).unwrap();
        assert!((ab - ba).abs() < 1e-13);
        assert!(ab >= 0.0);
        assert!(rmse(&f, &f).unwrap() < 1e-13);
    }

    #[test]
    fn uniform_grid_matches_analytic_function() {
        let mesh = SpectralMesh::new(6, 6, 7).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let f = FlowField::from_fn(&mesh, |x, _| ((two_pi * x).sin(), 0.0));
        let g = to_uniform_grid(&f, 48);
        for i in 0..48 {
            for j in 0..48 {
                let x = j as f64 / 48.0;
                assert!(
                    (g[[i, j, 0]] - (two_pi * x).sin()).abs() < 1e-8,
                    "at ({i}, {j}): {} vs {}",
                    g[[i, j, 0]],
                    (two_pi * x).sin()
                );
            }
        }
    }

    #[test]
    fn uniform_grid_constant_field() {
        let mesh = SpectralMesh::new(3, 3, 4).unwrap();
        let f = FlowField::from_fn(&mesh, |_, _| (0.7, -0.2));
        let g = to_uniform_grid(&f, 30);
        for v in g.index_axis(ndarray::Axis(2), 0).iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_samples_agree_with_nodal_values() {
        let mesh = SpectralMesh::new(4, 4, 5).unwrap();
        let f = FlowField::from_fn(&mesh, |x, y| (x * x + y, x - y * y));
        // N = elements gives exactly the element corners
        let g = to_uniform_grid(&f, 4);
        let n1 = 6;
        for ey in 0..4usize {
            for ex in 0..4usize {
                let el = ey * 4 + ex;
                // corner node (ix=0, iy=0)
                assert!((g[[ey, ex, 0]] - f.velocity[[el, 0, 0]]).abs() < 1e-12);
                let _ = n1;
            }
        }
    }

    #[test]
    fn sine_spectrum_concentrates_in_k1() {
        let mesh = SpectralMesh::new(4, 4, 8).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let f = FlowField::from_fn(&mesh, |x, _| ((two_pi * x).sin(), 0.0));
        let s = tke_spectrum(&f, 64);
        assert!((s.energy[1] - 0.25).abs() < 1e-8, "E(1) = {}", s.energy[1]);
        let rest: f64 = s
            .energy
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != 1)
            .map(|(_, e)| e)
            .sum();
        assert!(rest < 1e-10, "off-bin energy {rest}");
    }

    #[test]
    fn zero_field_zero_spectrum() {
        let mesh = SpectralMesh::new(2, 2, 4).unwrap();
        let s = tke_spectrum(&FlowField::zeros(&mesh), 32);
        assert!(s.energy.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn parseval_within_one_percent_on_multiscale_field() {
        let mesh = SpectralMesh::new(6, 6, 7).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let f = FlowField::from_fn(&mesh, |x, y| {
            (
                (two_pi * x).sin() + 0.5 * (3.0 * two_pi * y).cos() + 0.2 * (5.0 * two_pi * (x + y)).sin(),
                (2.0 * two_pi * y).sin() - 0.3 * (4.0 * two_pi * x).cos(),
            )
        });
        let grid = to_uniform_grid(&f, 96);
        let s = tke_spectrum_of_grid(&grid);
        let mean_ke = mean_kinetic_energy_of_grid(&grid);
        let rel = (s.total_energy() - mean_ke).abs() / mean_ke;
        assert!(rel < 0.01, "parseval mismatch {rel}");
    }

    #[test]
    fn spectrum_invariant_under_integer_shifts() {
        let mesh = SpectralMesh::new(4, 4, 6).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let f = FlowField::from_fn(&mesh, |x, y| {
            ((two_pi * x).sin() * (two_pi * y).cos(), (2.0 * two_pi * x).cos())
        });
        let grid = to_uniform_grid(&f, 32);
        let s0 = tke_spectrum_of_grid(&grid);
        // shift by 5 in x and 11 in y
        let n = 32;
        let mut shifted = grid.clone();
        for i in 0..n {
            for j in 0..n {
                for c in 0..2 {
                    shifted[[i, j, c]] = grid[[(i + 11) % n, (j + 5) % n, c]];
                }
            }
        }
        let s1 = tke_spectrum_of_grid(&shifted);
        for (a, b) in s0.energy.iter().zip(s1.energy.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn time_average_of_single_snapshot_is_itself() {
        let mesh = SpectralMesh::new(2, 2, 4).unwrap();
        let f = FlowField::from_fn(&mesh, |x, y| (x, y));
        let avg = spectrum_time_average(&[f.clone()], 0, 1, 16).unwrap();
        let single = tke_spectrum(&f, 16);
        for (a, b) in avg.energy.iter().zip(single.energy.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(spectrum_time_average(&[f], 1, 1, 16).is_err());
    }

    #[test]
    fn filtered_field_has_no_high_wavenumber_energy() {
        // well-resolved low-k content plus fine-grid junk that the
        // restriction removes; above 1.5x the coarse resolvable band only
        // interpolation leakage from the C0 kinks may remain
        let mesh = SpectralMesh::new(24, 24, 8).unwrap();
        let coarse = SpectralMesh::new(12, 12, 4).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        let f = FlowField::from_fn(&mesh, |x, y| {
            (
                (two_pi * x).sin() + 0.5 * (3.0 * two_pi * y).sin()
                    + 0.005 * (30.0 * two_pi * x).sin(),
                (2.0 * two_pi * (x + y)).cos() + 0.005 * (30.0 * two_pi * y).cos(),
            )
        });
        let r = crate::filter::restrict_to_coarse(&f, &coarse).unwrap();
        let s = tke_spectrum(&r, 128);
        let k_resolved = coarse.elements_x * (coarse.order_vel + 1) / 2; // 30
        let cutoff_bin = (3 * k_resolved) / 2; // 45
        let total = s.total_energy();
        let high: f64 = s.energy[cutoff_bin..].iter().sum();
        assert!(
            high <= 1e-6 * total,
            "leakage {high:.3e} of {total:.3e} above bin {cutoff_bin}"
        );
    }
}
