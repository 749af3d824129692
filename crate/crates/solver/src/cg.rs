//! Matrix-free conjugate gradients with pluggable inner product and
//! stopping rule. Both velocity (Helmholtz) and pressure (consistent
//! Poisson) solves go through here, as do their transposed solves in the
//! backward pass.

use crate::{SolverError, SolverResult};
use ndarray::ArrayD;

#[derive(Debug, Clone, Copy)]
pub enum CgStop {
    /// Stop when ||r|| <= tol * ||rhs||.
    Relative(f64),
    /// Stop when ||r|| <= tol.
    Absolute(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct CgOutcome {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Conjugate gradients on an SPD operator given as a closure.
///
/// `dot` defines the inner product (unique-node weighted for assembled
/// velocity systems, Euclidean for pressure). `project`, when present, is
/// applied to the rhs and every iterate to pin down a known null space.
pub fn cg_solve(
    apply: &mut dyn FnMut(&ArrayD<f64>) -> ArrayD<f64>,
    rhs: &ArrayD<f64>,
    dot: &dyn Fn(&ArrayD<f64>, &ArrayD<f64>) -> f64,
    project: Option<&dyn Fn(&mut ArrayD<f64>)>,
    stop: CgStop,
    max_iters: usize,
) -> SolverResult<(ArrayD<f64>, CgOutcome)> {
    if rhs.iter().any(|x| !x.is_finite()) {
        return Err(SolverError::NonFinite("cg rhs".into()));
    }
    let mut b = rhs.clone();
    if let Some(p) = project {
        p(&mut b);
    }
    let rhs_norm = dot(&b, &b).sqrt();
    let target = match stop {
        CgStop::Relative(tol) => tol * rhs_norm,
        CgStop::Absolute(tol) => tol,
    };
    let mut x = ArrayD::<f64>::zeros(rhs.raw_dim());
    if rhs_norm == 0.0 {
        return Ok((
            x,
            CgOutcome {
                iterations: 0,
                residual: 0.0,
                converged: true,
            },
        ));
    }
    let mut r = b;
    let mut rr = dot(&r, &r);
    if rr.sqrt() <= target {
        return Ok((
            x,
            CgOutcome {
                iterations: 0,
                residual: rr.sqrt(),
                converged: true,
            },
        ));
    }
    let mut p = r.clone();
    let mut iterations = 0;
    for it in 1..=max_iters {
        let mut ap = apply(&p);
        if let Some(proj) = project {
            proj(&mut ap);
        }
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(SolverError::CgBreakdown {
                iteration: it,
                curvature: pap,
            });
        }
        let alpha = rr / pap;
        // flat-slice updates: these run every iteration on every solve
        {
            let xs = x.as_slice_mut().expect("contiguous cg state");
            let ps = p.as_slice().unwrap();
            for (xi, pi) in xs.iter_mut().zip(ps) {
                *xi += alpha * pi;
            }
            let rs = r.as_slice_mut().unwrap();
            let aps = ap.as_slice().expect("contiguous operator output");
            for (ri, api) in rs.iter_mut().zip(aps) {
                *ri -= alpha * api;
            }
        }
        let rr_new = dot(&r, &r);
        iterations = it;
        if rr_new.sqrt() <= target {
            rr = rr_new;
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        {
            let ps = p.as_slice_mut().unwrap();
            let rs = r.as_slice().unwrap();
            for (pi, ri) in ps.iter_mut().zip(rs) {
                *pi = ri + beta * *pi;
            }
        }
    }
    if let Some(proj) = project {
        proj(&mut x);
    }
    let residual = rr.sqrt();
    Ok((
        x,
        CgOutcome {
            iterations,
            residual,
            converged: residual <= target,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn euclid(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn identity_converges_in_one_iteration() {
        let rhs = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let (x, out) = cg_solve(
            &mut |v| v.clone(),
            &rhs,
            &euclid,
            None,
            CgStop::Relative(1e-12),
            10,
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        for (a, b) in x.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_system_hand_solve() {
        let diag = [1.0, 2.0, 4.0];
        let rhs = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 2.0, 4.0]).unwrap();
        let (x, out) = cg_solve(
            &mut |v| {
                let mut o = v.clone();
                for (i, val) in o.iter_mut().enumerate() {
                    *val *= diag[i];
                }
                o
            },
            &rhs,
            &euclid,
            None,
            CgStop::Relative(1e-13),
            50,
        )
        .unwrap();
        assert!(out.converged);
        for v in x.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_spd_matches_dense_factorization_oracle() {
        // A = B^T B + n I via deterministic fill; oracle = Gaussian elimination
        let n = 50;
        let mut state = 0x853c49e6748fea9bu64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| next()).collect()).collect();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += b[k][i] * b[k][j];
                }
                a[i][j] = s + if i == j { n as f64 } else { 0.0 };
            }
        }
        let rhs_v: Vec<f64> = (0..n).map(|_| next()).collect();

        // dense LU oracle (partial pivoting)
        let mut m = a.clone();
        let mut x = rhs_v.clone();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
                .unwrap();
            m.swap(col, piv);
            x.swap(col, piv);
            for row in col + 1..n {
                let f = m[row][col] / m[col][col];
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
                x[row] -= f * x[col];
            }
        }
        for col in (0..n).rev() {
            x[col] /= m[col][col];
            for row in 0..col {
                x[row] -= m[row][col] * x[col];
            }
        }

        let rhs = ArrayD::from_shape_vec(IxDyn(&[n]), rhs_v).unwrap();
        let (sol, out) = cg_solve(
            &mut |v| {
                let mut o = ArrayD::zeros(v.raw_dim());
                for i in 0..n {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += a[i][j] * v[[j]];
                    }
                    o[[i]] = s;
                }
                o
            },
            &rhs,
            &euclid,
            None,
            CgStop::Relative(1e-14),
            500,
        )
        .unwrap();
        assert!(out.converged, "residual {}", out.residual);
        for i in 0..n {
            assert!((sol[[i]] - x[i]).abs() < 1e-10, "{} vs {}", sol[[i]], x[i]);
        }
    }

    #[test]
    fn nan_rhs_rejected() {
        let rhs = ArrayD::from_shape_vec(IxDyn(&[2]), vec![f64::NAN, 1.0]).unwrap();
        assert!(cg_solve(
            &mut |v| v.clone(),
            &rhs,
            &euclid,
            None,
            CgStop::Relative(1e-10),
            10
        )
        .is_err());
    }

    #[test]
    fn non_convergence_reports_max_iters_and_residual() {
        // badly conditioned diagonal, absurd tolerance, 3 iterations allowed
        let n = 40;
        let rhs = ArrayD::from_shape_vec(IxDyn(&[n]), (0..n).map(|i| (i + 1) as f64).collect())
            .unwrap();
        let (_, out) = cg_solve(
            &mut |v| {
                let mut o = v.clone();
                for (i, val) in o.iter_mut().enumerate() {
                    *val *= 1.0 + (i as f64) * 1000.0;
                }
                o
            },
            &rhs,
            &euclid,
            None,
            CgStop::Relative(1e-15),
            3,
        )
        .unwrap();
        assert_eq!(out.iterations, 3);
        assert!(!out.converged);
        assert!(out.residual > 0.0);
    }

    #[test]
    fn zero_rhs_returns_zero_without_iterating() {
        let rhs = ArrayD::zeros(IxDyn(&[4]));
        let (x, out) = cg_solve(
            &mut |v| v.clone(),
            &rhs,
            &euclid,
            None,
            CgStop::Relative(1e-12),
            10,
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
        assert!(x.iter().all(|v| *v == 0.0));
    }
}
