//! Legendre polynomials, Gauss-Lobatto-Legendre and Gauss-Legendre rules,
//! and nodal (barycentric) differentiation/evaluation matrices.
//!
//! Nodes come from Newton iteration with Chebyshev-type initial guesses,
//! converged to 1e-14; everything downstream is a deterministic function of
//! the polynomial order.

use crate::{SolverError, SolverResult};
use ndarray::{Array1, Array2};

const NEWTON_TOL: f64 = 1e-14;
const NEWTON_MAX: usize = 200;

/// Value and derivative of the Legendre polynomial `L_n` at `x`.
pub fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut pm1, mut p) = (1.0_f64, x);
    let (mut dm1, mut d) = (0.0_f64, 1.0_f64);
    for k in 1..n {
        let kf = k as f64;
        let pnext = ((2.0 * kf + 1.0) * x * p - kf * pm1) / (kf + 1.0);
        let dnext = dm1 + (2.0 * kf + 1.0) * p;
        pm1 = p;
        p = pnext;
        dm1 = d;
        d = dnext;
    }
    (p, d)
}

/// One-dimensional nodal basis: quadrature nodes/weights on [-1, 1] plus the
/// nodal differentiation matrix.
#[derive(Debug, Clone)]
pub struct Basis1D {
    pub order: usize,
    pub nodes: Array1<f64>,
    pub weights: Array1<f64>,
    pub diff_matrix: Array2<f64>,
    bary: Array1<f64>,
}

impl Basis1D {
    pub fn n_nodes(&self) -> usize {
        self.order + 1
    }

    /// Barycentric weights of the node set (normalized).
    pub fn barycentric_weights(&self) -> &Array1<f64> {
        &self.bary
    }

    /// Row of Lagrange basis values l_j(x) at an arbitrary point.
    pub fn eval_row(&self, x: f64) -> Array1<f64> {
        eval_row(&self.nodes, &self.bary, x)
    }

    /// Evaluation matrix: out[k, j] = l_j(targets[k]).
    pub fn eval_matrix(&self, targets: &[f64]) -> Array2<f64> {
        let mut m = Array2::zeros((targets.len(), self.n_nodes()));
        for (k, &x) in targets.iter().enumerate() {
            m.row_mut(k).assign(&self.eval_row(x));
        }
        m
    }
}

fn barycentric(nodes: &Array1<f64>) -> Array1<f64> {
    let n = nodes.len();
    let mut w = Array1::from_elem(n, 1.0);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w[i] *= nodes[i] - nodes[j];
            }
        }
        w[i] = 1.0 / w[i];
    }
    // normalize to curb overflow at higher orders
    let scale = w.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    w.mapv(|v| v / scale)
}

fn eval_row(nodes: &Array1<f64>, bary: &Array1<f64>, x: f64) -> Array1<f64> {
    let n = nodes.len();
    let mut row = Array1::zeros(n);
    for j in 0..n {
        if (x - nodes[j]).abs() < 1e-14 {
            row[j] = 1.0;
            return row;
        }
    }
    let mut denom = 0.0;
    for j in 0..n {
        let t = bary[j] / (x - nodes[j]);
        row[j] = t;
        denom += t;
    }
    row.mapv_inplace(|v| v / denom);
    row
}

/// Nodal differentiation matrix for an arbitrary node set: row i holds the
/// derivative of the interpolant at node i. The diagonal uses the
/// negative-sum trick so constants map to zero at round-off.
pub fn diff_matrix(nodes: &Array1<f64>) -> Array2<f64> {
    let n = nodes.len();
    let bary = barycentric(nodes);
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i != j {
                let v = (bary[j] / bary[i]) / (nodes[i] - nodes[j]);
                d[[i, j]] = v;
                diag -= v;
            }
        }
        d[[i, i]] = diag;
    }
    d
}

/// Gauss-Lobatto-Legendre basis of order `p`: endpoints plus the roots of
/// L'_p; quadrature exact through degree 2p-1.
pub fn gll_basis(p: usize) -> SolverResult<Basis1D> {
    if p < 1 {
        return Err(SolverError::InvalidConfig(format!(
            "GLL basis needs order >= 1, got {p}"
        )));
    }
    let n = p + 1;
    let mut nodes = Array1::zeros(n);
    nodes[0] = -1.0;
    nodes[n - 1] = 1.0;
    for k in 1..p {
        // interior roots of L'_p, Chebyshev-type initial guess
        let mut x = -(std::f64::consts::PI * k as f64 / p as f64).cos();
        for _ in 0..NEWTON_MAX {
            let (lp, dlp) = legendre(p, x);
            // L''_p from the Legendre ODE
            let d2 = (2.0 * x * dlp - (p * (p + 1)) as f64 * lp) / (1.0 - x * x);
            let dx = dlp / d2;
            x -= dx;
            if dx.abs() < NEWTON_TOL {
                break;
            }
        }
        nodes[k] = x;
    }
    let mut weights = Array1::zeros(n);
    for k in 0..n {
        let (lp, _) = legendre(p, nodes[k]);
        weights[k] = 2.0 / ((p * (p + 1)) as f64 * lp * lp);
    }
    let dm = diff_matrix(&nodes);
    let bary = barycentric(&nodes);
    Ok(Basis1D {
        order: p,
        nodes,
        weights,
        diff_matrix: dm,
        bary,
    })
}

/// Gauss-Legendre basis of order `p`: the p+1 roots of L_{p+1}, interior
/// only; quadrature exact through degree 2p+1.
pub fn gl_basis(p: usize) -> SolverResult<Basis1D> {
    let n = p + 1;
    let mut nodes = Array1::zeros(n);
    for k in 0..n {
        let mut x = -(std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..NEWTON_MAX {
            let (l, dl) = legendre(n, x);
            let dx = l / dl;
            x -= dx;
            if dx.abs() < NEWTON_TOL {
                break;
            }
        }
        nodes[k] = x;
    }
    let mut weights = Array1::zeros(n);
    for k in 0..n {
        let (_, dl) = legendre(n, nodes[k]);
        weights[k] = 2.0 / ((1.0 - nodes[k] * nodes[k]) * dl * dl);
    }
    let dm = diff_matrix(&nodes);
    let bary = barycentric(&nodes);
    Ok(Basis1D {
        order: p,
        nodes,
        weights,
        diff_matrix: dm,
        bary,
    })
}

/// Legendre Vandermonde V[i, j] = L_j(nodes[i]) and its inverse via discrete
/// orthogonality of the GLL rule.
pub fn legendre_vandermonde(basis: &Basis1D) -> (Array2<f64>, Array2<f64>) {
    let n = basis.n_nodes();
    let mut v = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            v[[i, j]] = legendre(j, basis.nodes[i]).0;
        }
    }
    // V^{-1} = diag(1/gamma) V^T W with gamma_j the discrete Legendre norms
    let mut vinv = Array2::zeros((n, n));
    for j in 0..n {
        let gamma: f64 = (0..n)
            .map(|k| basis.weights[k] * v[[k, j]] * v[[k, j]])
            .sum();
        for i in 0..n {
            vinv[[j, i]] = v[[i, j]] * basis.weights[i] / gamma;
        }
    }
    (v, vinv)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent root oracle: bisection on (1-x^2) L'_p for GLL interiors
    /// and on L_{p+1} for GL nodes.
    fn bisect_roots(f: impl Fn(f64) -> f64, n_roots: usize) -> Vec<f64> {
        let mut roots = Vec::new();
        let grid = 20_000;
        let mut prev_x = -1.0 + 1e-12;
        let mut prev_f = f(prev_x);
        for i in 1..=grid {
            let x = -1.0 + 2.0 * i as f64 / grid as f64 - 1e-12;
            let fx = f(x);
            if prev_f == 0.0 || prev_f * fx < 0.0 {
                let (mut a, mut b) = (prev_x, x);
                for _ in 0..200 {
                    let m = 0.5 * (a + b);
                    if f(a) * f(m) <= 0.0 {
                        b = m;
                    } else {
                        a = m;
                    }
                }
                roots.push(0.5 * (a + b));
            }
            prev_x = x;
            prev_f = fx;
        }
        assert_eq!(roots.len(), n_roots, "oracle found wrong root count");
        roots
    }

    #[test]
    fn gll_rejects_order_zero() {
        assert!(gll_basis(0).is_err());
    }

    #[test]
    fn gll_p1_is_trapezoid() {
        let b = gll_basis(1).unwrap();
        assert_eq!(b.nodes.to_vec(), vec![-1.0, 1.0]);
        assert_eq!(b.weights.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn gll_p2_matches_known_rule() {
        let b = gll_basis(2).unwrap();
        for (x, e) in b.nodes.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((x - e).abs() < 1e-14);
        }
        for (w, e) in b.weights.iter().zip([1.0 / 3.0, 4.0 / 3.0, 1.0 / 3.0]) {
            assert!((w - e).abs() < 1e-14);
        }
    }

    #[test]
    fn gll_nodes_match_bisection_oracle() {
        for p in [3usize, 5, 8] {
            let b = gll_basis(p).unwrap();
            let interior = bisect_roots(|x| legendre(p, x).1, p - 1);
            for (k, r) in interior.iter().enumerate() {
                assert!(
                    (b.nodes[k + 1] - r).abs() < 1e-11,
                    "p={p} node {k}: {} vs oracle {}",
                    b.nodes[k + 1],
                    r
                );
            }
            // moment-matching oracle for the weights: solve sum_k w_k x_k^m = ∫ x^m
            // indirectly by checking all moments up to 2p-1
            for m in 0..2 * p {
                let q: f64 = b
                    .nodes
                    .iter()
                    .zip(b.weights.iter())
                    .map(|(x, w)| w * x.powi(m as i32))
                    .sum();
                let exact = if m % 2 == 0 { 2.0 / (m as f64 + 1.0) } else { 0.0 };
                assert!((q - exact).abs() < 1e-12, "p={p} moment {m}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn gl_p0_is_midpoint() {
        let b = gl_basis(0).unwrap();
        assert!((b.nodes[0]).abs() < 1e-15);
        assert!((b.weights[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn gl_p1_matches_known_rule() {
        let b = gl_basis(1).unwrap();
        let r = 1.0 / 3.0_f64.sqrt();
        assert!((b.nodes[0] + r).abs() < 1e-14);
        assert!((b.nodes[1] - r).abs() < 1e-14);
        assert!((b.weights[0] - 1.0).abs() < 1e-14);
        assert!((b.weights[1] - 1.0).abs() < 1e-14);
        // direct quadrature of x^2
        let q: f64 = b
            .nodes
            .iter()
            .zip(b.weights.iter())
            .map(|(x, w)| w * x * x)
            .sum();
        assert!((q - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn gl_nodes_match_bisection_oracle() {
        for p in [2usize, 4, 6] {
            let b = gl_basis(p).unwrap();
            let roots = bisect_roots(|x| legendre(p + 1, x).0, p + 1);
            for (k, r) in roots.iter().enumerate() {
                assert!((b.nodes[k] - r).abs() < 1e-11);
            }
            for m in 0..=2 * p + 1 {
                let q: f64 = b
                    .nodes
                    .iter()
                    .zip(b.weights.iter())
                    .map(|(x, w)| w * x.powi(m as i32))
                    .sum();
                let exact = if m % 2 == 0 { 2.0 / (m as f64 + 1.0) } else { 0.0 };
                assert!((q - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_sum_to_interval_length() {
        for p in 1..=10 {
            let b = gll_basis(p).unwrap();
            assert!((b.weights.sum() - 2.0).abs() < 1e-12);
            let g = gl_basis(p).unwrap();
            assert!((g.weights.sum() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nodes_strictly_increasing() {
        for p in 1..=12 {
            let b = gll_basis(p).unwrap();
            for k in 1..b.n_nodes() {
                assert!(b.nodes[k] > b.nodes[k - 1]);
            }
        }
    }

    #[test]
    fn diff_matrix_annihilates_constants_and_differentiates_polys() {
        for p in [3usize, 6, 8] {
            let b = gll_basis(p).unwrap();
            let ones = Array1::from_elem(p + 1, 1.0);
            let d1 = b.diff_matrix.dot(&ones);
            for v in d1.iter() {
                assert!(v.abs() < 1e-12, "constant not annihilated: {v}");
            }
            let x = b.nodes.clone();
            let dx = b.diff_matrix.dot(&x);
            for v in dx.iter() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
        // x^2 at P=3: derivative samples must equal 2x
        let b = gll_basis(3).unwrap();
        let x2 = b.nodes.mapv(|x| x * x);
        let d = b.diff_matrix.dot(&x2);
        for (v, x) in d.iter().zip(b.nodes.iter()) {
            assert!((v - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_exactness_top_degree() {
        // ∫ x^{2P-1} = 0 reproduced exactly; x^{2P-2} reproduced to round-off
        for p in [2usize, 4, 8] {
            let b = gll_basis(p).unwrap();
            let odd: f64 = b
                .nodes
                .iter()
                .zip(b.weights.iter())
                .map(|(x, w)| w * x.powi(2 * p as i32 - 1))
                .sum();
            assert!(odd.abs() < 1e-13);
            let m = 2 * p - 2;
            let even: f64 = b
                .nodes
                .iter()
                .zip(b.weights.iter())
                .map(|(x, w)| w * x.powi(m as i32))
                .sum();
            assert!((even - 2.0 / (m as f64 + 1.0)).abs() < 1e-13);
        }
    }

    #[test]
    fn vandermonde_inverse_roundtrip() {
        let b = gll_basis(6).unwrap();
        let (v, vinv) = legendre_vandermonde(&b);
        let eye = v.dot(&vinv);
        for i in 0..7 {
            for j in 0..7 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_matrix_interpolates_polynomials_exactly() {
        let b = gll_basis(5).unwrap();
        let targets = [-0.9, -0.3, 0.1, 0.77];
        let m = b.eval_matrix(&targets);
        let f = b.nodes.mapv(|x| 3.0 * x.powi(4) - x.powi(2) + 0.5 * x);
        let vals = m.dot(&f);
        for (k, &x) in targets.iter().enumerate() {
            let exact = 3.0 * x.powi(4) - x.powi(2) + 0.5 * x;
            assert!((vals[k] - exact).abs() < 1e-12);
        }
    }
}
