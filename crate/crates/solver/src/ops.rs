//! Matrix-free discrete operators of the semi-discrete Navier-Stokes system:
//! diagonal mass M, stiffness (Laplacian) K, divergence D, its transpose
//! D^T, and the advection term C(a)u, all element-local on the tensor-product
//! nodal bases. Assembly (gather-scatter) is applied by callers.
//!
//! Hot kernels run as flat-slice loops fused over the velocity components;
//! these sit inside every CG iteration, so there are no per-component copies
//! or axis permutations on the fast path.

use crate::field::FlowField;
use crate::mesh::SpectralMesh;
use crate::{SolverError, SolverResult};
use ndarray::{Array1, Array2, Array3, ArrayView3};
use std::sync::Arc;

/// Contract a stack of per-element matrices U (E, ny, nx) along the x index:
/// out[e, iy, k] = sum_jx M[k, jx] U[e, iy, jx].
pub fn apply_along_x(field: &ArrayView3<f64>, m: &Array2<f64>) -> Array3<f64> {
    let (e, ny, nx) = field.dim();
    let k = m.nrows();
    assert_eq!(m.ncols(), nx);
    let flat = field.to_shape((e * ny, nx)).unwrap();
    let out = flat.dot(&m.t());
    out.into_shape_clone((e, ny, k)).unwrap()
}

/// Contract along the y index: out[e, k, ix] = sum_jy M[k, jy] U[e, jy, ix].
pub fn apply_along_y(field: &ArrayView3<f64>, m: &Array2<f64>) -> Array3<f64> {
    let (e, ny, nx) = field.dim();
    let k = m.nrows();
    assert_eq!(m.ncols(), ny);
    let mut out = Array3::zeros((e, k, nx));
    let src = field.as_standard_layout();
    let fs = src.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    let ms = m.as_slice().unwrap();
    for el in 0..e {
        let ibase = el * ny * nx;
        let obase = el * k * nx;
        for ky in 0..k {
            let (orow, _) = os[obase + ky * nx..].split_at_mut(nx);
            for jy in 0..ny {
                let c = ms[ky * ny + jy];
                if c == 0.0 {
                    continue;
                }
                let irow = &fs[ibase + jy * nx..ibase + jy * nx + nx];
                for i in 0..nx {
                    orow[i] += c * irow[i];
                }
            }
        }
    }
    out
}


/// Element-local transpose of a planar stack: (E, a, b) -> (E, b, a).
fn transpose_el(src: &[f64], e: usize, a: usize, b: usize, dst: &mut [f64]) {
    assert_eq!(src.len(), e * a * b);
    assert_eq!(dst.len(), e * a * b);
    for el in 0..e {
        let s = &src[el * a * b..(el + 1) * a * b];
        let d = &mut dst[el * a * b..(el + 1) * a * b];
        for (j, drow) in d.chunks_exact_mut(a).enumerate() {
            for (i, dv) in drow.iter_mut().enumerate() {
                *dv = s[i * b + j];
            }
        }
    }
}

/// Planar along-x contraction via one large matmul:
/// out[e, iy, k] = sum_jx m[k, jx] u[e, iy, jx]; `m_t` is m transposed.
fn planar_x(src: &[f64], e: usize, ny: usize, nx: usize, m_t: &Array2<f64>) -> Vec<f64> {
    let view = ndarray::ArrayView2::from_shape((e * ny, nx), src).unwrap();
    let out = view.dot(m_t);
    let mut v = Vec::with_capacity(out.len());
    v.extend(out.iter());
    v
}

/// Planar along-y contraction: transpose, along-x, transpose back.
fn planar_y(src: &[f64], e: usize, ny: usize, nx: usize, m_t: &Array2<f64>) -> Vec<f64> {
    let k = m_t.ncols();
    let mut t = vec![0.0; e * ny * nx];
    transpose_el(src, e, ny, nx, &mut t);
    let c = planar_x(&t, e, nx, ny, m_t);
    let mut out = vec![0.0; e * nx * k];
    transpose_el(&c, e, nx, k, &mut out);
    out
}

fn deinterleave2(field: &Array3<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = field.len() / 2;
    let fs = field.as_slice().unwrap();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        a[i] = fs[2 * i];
        b[i] = fs[2 * i + 1];
    }
    (a, b)
}

fn reinterleave2(a: &[f64], b: &[f64], e: usize, nv: usize) -> Array3<f64> {
    let mut out = vec![0.0; a.len() * 2];
    for i in 0..a.len() {
        out[2 * i] = a[i];
        out[2 * i + 1] = b[i];
    }
    Array3::from_shape_vec((e, nv, 2), out).unwrap()
}

/// Precomputed element matrices and scalings for one mesh.
pub struct MeshOps {
    pub mesh: Arc<SpectralMesh>,
    /// Diagonal mass per local velocity node (E-independent on a uniform
    /// mesh): w_i w_j Jx Jy, shape (nv,).
    pub mass_diag: Array1<f64>,
    /// 1D stiffness kernel A = D^T W D on the velocity basis, transposed
    /// (A is symmetric so this is A itself; stored for the matmul calls).
    a1_t: Array2<f64>,
    /// 1D differentiation on the velocity basis (transposed and plain).
    dv_t: Array2<f64>,
    dv: Array2<f64>,
    /// GLL -> GL pressure-point interpolation and derivative rows:
    /// transposed forms for the matmul calls.
    ivp_t: Array2<f64>,
    ivp: Array2<f64>,
    dvp_t: Array2<f64>,
    dvp: Array2<f64>,
    /// Pressure quadrature weights (np,).
    wgl: Array1<f64>,
    /// Velocity 1D weights.
    wv: Array1<f64>,
    /// Overintegration grid for the dealiased advection path.
    quad: Option<QuadGrid>,
    jx: f64,
    jy: f64,
}

struct QuadGrid {
    /// Evaluation GLL -> quadrature points, (nq1, P+1).
    iq: Array2<f64>,
    /// Derivative at quadrature points, (nq1, P+1).
    dq: Array2<f64>,
    /// Quadrature weights (nq1,).
    wq: Array1<f64>,
    nq1: usize,
}

impl MeshOps {
    pub fn new(mesh: &Arc<SpectralMesh>, dealias: bool) -> MeshOps {
        let p = mesh.order_vel;
        let n1 = p + 1;
        let vb = &mesh.vel_basis;
        let pb = &mesh.pres_basis;
        let (hx, hy) = mesh.element_size();
        let (jx, jy) = (0.5 * hx, 0.5 * hy);

        let mut mass_diag = Array1::zeros(n1 * n1);
        for iy in 0..n1 {
            for ix in 0..n1 {
                mass_diag[iy * n1 + ix] = vb.weights[iy] * vb.weights[ix] * jx * jy;
            }
        }

        // A = D^T W D (1D weak Laplacian kernel on the reference interval)
        let w = Array2::from_diag(&vb.weights);
        let a1m = vb.diff_matrix.t().dot(&w).dot(&vb.diff_matrix);

        let ivp_m = vb.eval_matrix(pb.nodes.as_slice().unwrap());
        let dvp_m = ivp_m.dot(&vb.diff_matrix);

        let np1 = mesh.order_pres + 1;
        let mut wgl = Array1::zeros(np1 * np1);
        for iy in 0..np1 {
            for ix in 0..np1 {
                wgl[iy * np1 + ix] = pb.weights[iy] * pb.weights[ix];
            }
        }

        let quad = if dealias {
            // 3/2-rule Gauss grid for the quadratic nonlinearity
            let nq1 = (3 * n1).div_ceil(2);
            let qb = crate::basis::gl_basis(nq1 - 1).expect("quad basis");
            let iq = vb.eval_matrix(qb.nodes.as_slice().unwrap());
            let dq = iq.dot(&vb.diff_matrix);
            Some(QuadGrid {
                iq,
                dq,
                wq: qb.weights.clone(),
                nq1,
            })
        } else {
            None
        };

        MeshOps {
            mesh: Arc::clone(mesh),
            mass_diag,
            a1_t: a1m.t().to_owned(),
            dv_t: vb.diff_matrix.t().to_owned(),
            dv: vb.diff_matrix.clone(),
            ivp_t: ivp_m.t().to_owned(),
            ivp: ivp_m,
            dvp_t: dvp_m.t().to_owned(),
            dvp: dvp_m,
            wgl,
            wv: vb.weights.clone(),
            quad,
            jx,
            jy,
        }
    }

    fn n1(&self) -> usize {
        self.mesh.order_vel + 1
    }

    fn np1(&self) -> usize {
        self.mesh.order_pres + 1
    }

    fn check_vel_shape(&self, shape: &[usize]) -> SolverResult<()> {
        let ok = shape.len() == 3
            && shape[0] == self.mesh.n_elements()
            && shape[1] == self.mesh.n_vel_nodes();
        if !ok {
            return Err(SolverError::GridMismatch(format!(
                "velocity-grid field {:?} does not match mesh (E={}, nv={})",
                shape,
                self.mesh.n_elements(),
                self.mesh.n_vel_nodes()
            )));
        }
        Ok(())
    }

    /// Diagonal mass: out = (w ⊗ w) J u, element-local, positive.
    pub fn apply_mass(&self, field: &Array3<f64>) -> Array3<f64> {
        let (e, nv, d) = field.dim();
        let mut out = field.clone();
        let os = out.as_slice_mut().unwrap();
        let md = self.mass_diag.as_slice().unwrap();
        for el in 0..e {
            for n in 0..nv {
                let base = (el * nv + n) * d;
                for c in 0..d {
                    os[base + c] *= md[n];
                }
            }
        }
        out
    }

    pub fn apply_mass_inv_diag(&self, field: &Array3<f64>) -> Array3<f64> {
        let (e, nv, d) = field.dim();
        let mut out = field.clone();
        let os = out.as_slice_mut().unwrap();
        let md = self.mass_diag.as_slice().unwrap();
        for el in 0..e {
            for n in 0..nv {
                let base = (el * nv + n) * d;
                for c in 0..d {
                    os[base + c] /= md[n];
                }
            }
        }
        out
    }

    /// Weak Laplacian K on one planar component.
    fn laplacian_plane(&self, u: &[f64]) -> Vec<f64> {
        let e = self.mesh.n_elements();
        let n1 = self.n1();
        let cx = self.jy / self.jx;
        let cy = self.jx / self.jy;
        let wv = self.wv.as_slice().unwrap();
        // x-part: A along ix, rows weighted by w_iy * cx
        let mut kx = planar_x(u, e, n1, n1, &self.a1_t);
        for el in 0..e {
            for iy in 0..n1 {
                let s = wv[iy] * cx;
                let base = (el * n1 + iy) * n1;
                for v in kx[base..base + n1].iter_mut() {
                    *v *= s;
                }
            }
        }
        // y-part: A along iy, columns weighted by w_ix * cy
        let mut ky = planar_y(u, e, n1, n1, &self.a1_t);
        for el in 0..e {
            for iy in 0..n1 {
                let base = (el * n1 + iy) * n1;
                for (ix, v) in ky[base..base + n1].iter_mut().enumerate() {
                    *v *= wv[ix] * cy;
                }
            }
        }
        for (a, b) in kx.iter_mut().zip(ky.iter()) {
            *a += b;
        }
        kx
    }

    /// Weak Laplacian K per component: (Jy/Jx) W_y ⊗ A_x + (Jx/Jy) A_y ⊗ W_x.
    /// Element-local; symmetric positive semi-definite after assembly with
    /// constants in the null space.
    pub fn apply_laplacian(&self, field: &Array3<f64>) -> Array3<f64> {
        self.check_vel_shape(field.shape()).expect("apply_laplacian shape");
        let (e, nv, d) = field.dim();
        if d == 2 {
            let (u0, u1) = deinterleave2(field);
            let k0 = self.laplacian_plane(&u0);
            let k1 = self.laplacian_plane(&u1);
            reinterleave2(&k0, &k1, e, nv)
        } else {
            let u: Vec<f64> = field.iter().cloned().collect();
            let k = self.laplacian_plane(&u);
            Array3::from_shape_vec((e, nv, 1), k).unwrap()
        }
    }

    fn directional(&self, field: &Array3<f64>, m_t: &Array2<f64>, along_x: bool, scale: f64) -> Array3<f64> {
        let (e, nv, d) = field.dim();
        let n1 = self.n1();
        let one_plane = |u: &[f64]| -> Vec<f64> {
            let mut v = if along_x {
                planar_x(u, e, n1, n1, m_t)
            } else {
                planar_y(u, e, n1, n1, m_t)
            };
            if scale != 1.0 {
                for x in v.iter_mut() {
                    *x *= scale;
                }
            }
            v
        };
        if d == 2 {
            let (u0, u1) = deinterleave2(field);
            reinterleave2(&one_plane(&u0), &one_plane(&u1), e, nv)
        } else {
            let u: Vec<f64> = field.iter().cloned().collect();
            Array3::from_shape_vec((e, nv, 1), one_plane(&u)).unwrap()
        }
    }

    /// d/dx at the velocity nodes.
    pub fn nodal_dx(&self, field: &Array3<f64>) -> Array3<f64> {
        self.directional(field, &self.dv_t, true, 1.0 / self.jx)
    }

    pub fn nodal_dy(&self, field: &Array3<f64>) -> Array3<f64> {
        self.directional(field, &self.dv_t, false, 1.0 / self.jy)
    }

    /// Exact transposes of the nodal derivative maps.
    pub fn nodal_dx_t(&self, field: &Array3<f64>) -> Array3<f64> {
        self.directional(field, &self.dv, true, 1.0 / self.jx)
    }

    pub fn nodal_dy_t(&self, field: &Array3<f64>) -> Array3<f64> {
        self.directional(field, &self.dv, false, 1.0 / self.jy)
    }

    /// Nodal derivative fields (du/dx, du/dy).
    pub fn nodal_gradient(&self, field: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
        (self.nodal_dx(field), self.nodal_dy(field))
    }

    /// Weak divergence into pressure space: (Du)_q = ∫ q ∇·u over each
    /// element via the Gauss rule of the pressure basis.
    pub fn apply_divergence(&self, vel: &Array3<f64>) -> Array2<f64> {
        self.check_vel_shape(vel.shape()).expect("apply_divergence shape");
        let e = self.mesh.n_elements();
        let n1 = self.n1();
        let np1 = self.np1();
        let (u0, u1) = deinterleave2(vel);
        // ∂ξ u0 at GL points: dvp along x, ivp along y
        let tx = planar_y(&planar_x(&u0, e, n1, n1, &self.dvp_t), e, n1, np1, &self.ivp_t);
        // ∂η u1 at GL points: ivp along x, dvp along y
        let ty = planar_y(&planar_x(&u1, e, n1, n1, &self.ivp_t), e, n1, np1, &self.dvp_t);
        let np = np1 * np1;
        let mut out = Array2::zeros((e, np));
        let os = out.as_slice_mut().unwrap();
        let wq = self.wgl.as_slice().unwrap();
        for el in 0..e {
            for q in 0..np {
                let i = el * np + q;
                os[i] = wq[q] * (self.jy * tx[i] + self.jx * ty[i]);
            }
        }
        out
    }

    /// Exact transpose of `apply_divergence`: pressure -> velocity-space
    /// cotangent (the weak pressure gradient).
    pub fn apply_gradient_t(&self, pres: &Array2<f64>) -> Array3<f64> {
        let e = self.mesh.n_elements();
        let np1 = self.np1();
        let n1 = self.n1();
        assert_eq!(pres.dim(), (e, np1 * np1), "apply_gradient_t shape");
        let ps = pres.as_slice().unwrap();
        let wq = self.wgl.as_slice().unwrap();
        let np = np1 * np1;
        let mut wx = vec![0.0; e * np];
        let mut wy = vec![0.0; e * np];
        for el in 0..e {
            for q in 0..np {
                let i = el * np + q;
                let v = wq[q] * ps[i];
                wx[i] = self.jy * v;
                wy[i] = self.jx * v;
            }
        }
        let g0 = planar_x(&planar_y(&wx, e, np1, np1, &self.ivp), e, n1, np1, &self.dvp);
        let g1 = planar_x(&planar_y(&wy, e, np1, np1, &self.dvp), e, n1, np1, &self.ivp);
        reinterleave2(&g0, &g1, e, n1 * n1)
    }

    /// Weak advection C(a)u = M ⊙ (a·∇)u (collocated), or the dealiased
    /// variant on the overintegration grid when enabled.
    pub fn apply_advection(&self, vel: &Array3<f64>, advecting: &Array3<f64>) -> Array3<f64> {
        self.check_vel_shape(vel.shape()).expect("apply_advection shape");
        match &self.quad {
            None => {
                let gx = self.nodal_dx(vel);
                let gy = self.nodal_dy(vel);
                let (e, nv, d) = vel.dim();
                let mut out = vec![0.0; e * nv * d];
                let gxs = gx.as_slice().unwrap();
                let gys = gy.as_slice().unwrap();
                let avs = advecting.as_slice().unwrap();
                let md = self.mass_diag.as_slice().unwrap();
                for el in 0..e {
                    for n in 0..nv {
                        let b = (el * nv + n) * d;
                        let ax = avs[b];
                        let ay = avs[b + 1];
                        let m = md[n];
                        for c in 0..d {
                            out[b + c] = m * (ax * gxs[b + c] + ay * gys[b + c]);
                        }
                    }
                }
                Array3::from_shape_vec((e, nv, d), out).unwrap()
            }
            Some(q) => self.apply_advection_dealiased(vel, advecting, q),
        }
    }

    fn apply_advection_dealiased(
        &self,
        vel: &Array3<f64>,
        advecting: &Array3<f64>,
        q: &QuadGrid,
    ) -> Array3<f64> {
        let e = self.mesh.n_elements();
        let n1 = self.n1();
        let nq1 = q.nq1;
        let iq_t = q.iq.t().to_owned();
        let dq_t = q.dq.t().to_owned();
        let iq = q.iq.clone();
        let to_quad = |u: &[f64], mx: &Array2<f64>, my: &Array2<f64>| -> Vec<f64> {
            planar_y(&planar_x(u, e, n1, n1, mx), e, n1, nq1, my)
        };
        let (a0, a1) = deinterleave2(advecting);
        let a0q = to_quad(&a0, &iq_t, &iq_t);
        let a1q = to_quad(&a1, &iq_t, &iq_t);
        let (u0, u1) = deinterleave2(vel);
        let mut planes = Vec::with_capacity(2);
        for u in [&u0, &u1] {
            let dxq = to_quad(u, &dq_t, &iq_t);
            let dyq = to_quad(u, &iq_t, &dq_t);
            let nq = nq1 * nq1;
            let mut integ = vec![0.0; e * nq];
            let wq = q.wq.as_slice().unwrap();
            for el in 0..e {
                for iy in 0..nq1 {
                    for ix in 0..nq1 {
                        let i = el * nq + iy * nq1 + ix;
                        let wj = wq[iy] * wq[ix] * self.jx * self.jy;
                        integ[i] = wj
                            * (a0q[i] * dxq[i] / self.jx + a1q[i] * dyq[i] / self.jy);
                    }
                }
            }
            // project back: iq^T along both axes
            let px = planar_x(&integ, e, nq1, nq1, &iq);
            planes.push(planar_y(&px, e, nq1, n1, &iq));
        }
        reinterleave2(&planes[0], &planes[1], e, n1 * n1)
    }

    /// Discrete kinetic energy 1/2 ∫ |u|^2 by element-local quadrature.
    pub fn kinetic_energy(&self, field: &FlowField) -> f64 {
        let mut s = 0.0;
        let (e, nv, d) = field.velocity.dim();
        let fs = field.velocity.as_slice().unwrap();
        let md = self.mass_diag.as_slice().unwrap();
        for el in 0..e {
            for n in 0..nv {
                let b = (el * nv + n) * d;
                for c in 0..d {
                    s += md[n] * fs[b + c] * fs[b + c];
                }
            }
        }
        0.5 * s
    }

    /// Euclidean norm of the discrete divergence of a velocity field.
    pub fn divergence_norm(&self, vel: &Array3<f64>) -> f64 {
        let d = self.apply_divergence(vel);
        d.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Assembled Helmholtz operator gs(a M x + nu K x), fused in plane
    /// space. The CG hot path.
    pub fn helmholtz_assembled(&self, x: &Array3<f64>, a_coef: f64, nu: f64) -> Array3<f64> {
        let (e, nv, _) = x.dim();
        let (u0, u1) = deinterleave2(x);
        let md = self.mass_diag.as_slice().unwrap();
        let mut planes = Vec::with_capacity(2);
        for u in [&u0, &u1] {
            let mut k = self.laplacian_plane(u);
            for (i, kv) in k.iter_mut().enumerate() {
                *kv = nu * *kv + a_coef * md[i % nv] * u[i];
            }
            self.mesh.gather_scatter_plane(&mut k, crate::mesh::GatherMode::Sum);
            planes.push(k);
        }
        reinterleave2(&planes[0], &planes[1], e, nv)
    }

    /// Weak pressure gradient as planar components (no interleaving).
    fn gradient_t_planes(&self, pres: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let e = self.mesh.n_elements();
        let np1 = self.np1();
        let n1 = self.n1();
        let wq = self.wgl.as_slice().unwrap();
        let np = np1 * np1;
        let mut wx = vec![0.0; e * np];
        let mut wy = vec![0.0; e * np];
        for el in 0..e {
            for q in 0..np {
                let i = el * np + q;
                let v = wq[q] * pres[i];
                wx[i] = self.jy * v;
                wy[i] = self.jx * v;
            }
        }
        let g0 = planar_x(&planar_y(&wx, e, np1, np1, &self.ivp), e, n1, np1, &self.dvp);
        let g1 = planar_x(&planar_y(&wy, e, np1, np1, &self.dvp), e, n1, np1, &self.ivp);
        (g0, g1)
    }

    /// Weak divergence from planar components.
    fn divergence_planes(&self, u0: &[f64], u1: &[f64]) -> Array2<f64> {
        let e = self.mesh.n_elements();
        let n1 = self.n1();
        let np1 = self.np1();
        let tx = planar_y(&planar_x(u0, e, n1, n1, &self.dvp_t), e, n1, np1, &self.ivp_t);
        let ty = planar_y(&planar_x(u1, e, n1, n1, &self.ivp_t), e, n1, np1, &self.dvp_t);
        let np = np1 * np1;
        let mut out = Array2::zeros((e, np));
        let os = out.as_slice_mut().unwrap();
        let wq = self.wgl.as_slice().unwrap();
        for el in 0..e {
            for q in 0..np {
                let i = el * np + q;
                os[i] = wq[q] * (self.jy * tx[i] + self.jx * ty[i]);
            }
        }
        out
    }

    /// Consistent-Poisson operator E q = D M_a^{-1} gs D^T q, fused in
    /// plane space; `minv_plane` is the inverse assembled mass diagonal for
    /// one component.
    pub fn poisson_assembled(&self, q: &Array2<f64>, minv_plane: &[f64]) -> Array2<f64> {
        let (mut g0, mut g1) = self.gradient_t_planes(q.as_slice().unwrap());
        self.mesh.gather_scatter_plane(&mut g0, crate::mesh::GatherMode::Sum);
        self.mesh.gather_scatter_plane(&mut g1, crate::mesh::GatherMode::Sum);
        for (v, m) in g0.iter_mut().zip(minv_plane) {
            *v *= m;
        }
        for (v, m) in g1.iter_mut().zip(minv_plane) {
            *v *= m;
        }
        self.divergence_planes(&g0, &g1)
    }

    /// Inverse assembled mass diagonal for one component, flat (E * nv).
    pub fn assembled_mass_inv_plane(&self) -> Vec<f64> {
        let e = self.mesh.n_elements();
        let nv = self.mesh.n_vel_nodes();
        let md = self.mass_diag.as_slice().unwrap();
        let mut m: Vec<f64> = (0..e * nv).map(|i| md[i % nv]).collect();
        self.mesh.gather_scatter_plane(&mut m, crate::mesh::GatherMode::Sum);
        for v in m.iter_mut() {
            *v = 1.0 / *v;
        }
        m
    }
}
