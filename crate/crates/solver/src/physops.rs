//! Differentiable wrappers around the discrete operators.
//!
//! Every linear physics map enters the graph as a custom op whose backward
//! rule is its exact transpose. The CG solves are custom ops whose backward
//! solves the same (symmetric) system with the cotangent as right-hand
//! side — the transposed-system adjoint — so training never unrolls the
//! iteration.

use crate::cg::{cg_solve, CgOutcome, CgStop};
use crate::mesh::GatherMode;
use crate::ops::MeshOps;
use crate::{SolverError, SolverResult};
use ndarray::{ArrayD, Ix2, Ix3};
use niles_autodiff::{AdError, CustomOp, DType, Tensor};
use std::rc::Rc;
use std::sync::Arc;

type FieldFn = Arc<dyn Fn(&ArrayD<f64>) -> ArrayD<f64> + Send + Sync>;

pub(crate) struct LinearFieldOp {
    name: &'static str,
    transpose: FieldFn,
}

impl CustomOp for LinearFieldOp {
    fn name(&self) -> &str {
        self.name
    }

    fn vjp(
        &self,
        _inputs: &[Tensor],
        _output: &ArrayD<f64>,
        cotangent: &ArrayD<f64>,
    ) -> niles_autodiff::Result<Vec<Option<ArrayD<f64>>>> {
        Ok(vec![Some((self.transpose)(cotangent))])
    }
}

/// Record `y = forward(x)` with `transpose` as the backward rule.
pub fn apply_linear(name: &'static str, x: &Tensor, forward: FieldFn, transpose: FieldFn) -> Tensor {
    let y = forward(&x.value().to_owned());
    Tensor::from_custom(
        vec![x.clone()],
        y,
        x.dtype(),
        Rc::new(LinearFieldOp { name, transpose }),
    )
}

pub fn vel3(t: &Tensor) -> ndarray::Array3<f64> {
    t.value().to_owned().into_dimensionality::<Ix3>().unwrap()
}

pub fn pres2(t: &Tensor) -> ndarray::Array2<f64> {
    t.value().to_owned().into_dimensionality::<Ix2>().unwrap()
}

fn d3(a: ndarray::Array3<f64>) -> ArrayD<f64> {
    a.into_dyn()
}

fn d2(a: ndarray::Array2<f64>) -> ArrayD<f64> {
    a.into_dyn()
}

fn as3(a: &ArrayD<f64>) -> ndarray::Array3<f64> {
    a.view().into_dimensionality::<Ix3>().unwrap().to_owned()
}

fn as2(a: &ArrayD<f64>) -> ndarray::Array2<f64> {
    a.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

/// Diagonal mass (self-transpose).
pub fn taped_mass(ops: &Arc<MeshOps>, x: &Tensor) -> Tensor {
    let o1 = Arc::clone(ops);
    let o2 = Arc::clone(ops);
    apply_linear(
        "apply_mass",
        x,
        Arc::new(move |a| d3(o1.apply_mass(&as3(a)))),
        Arc::new(move |a| d3(o2.apply_mass(&as3(a)))),
    )
}

/// Weak Laplacian (symmetric).
pub fn taped_laplacian(ops: &Arc<MeshOps>, x: &Tensor) -> Tensor {
    let o1 = Arc::clone(ops);
    let o2 = Arc::clone(ops);
    apply_linear(
        "apply_laplacian",
        x,
        Arc::new(move |a| d3(o1.apply_laplacian(&as3(a)))),
        Arc::new(move |a| d3(o2.apply_laplacian(&as3(a)))),
    )
}

/// Weak divergence, velocity -> pressure space; transpose is the weak
/// pressure gradient.
pub fn taped_divergence(ops: &Arc<MeshOps>, x: &Tensor) -> Tensor {
    let o1 = Arc::clone(ops);
    let o2 = Arc::clone(ops);
    apply_linear(
        "apply_divergence",
        x,
        Arc::new(move |a| d2(o1.apply_divergence(&as3(a)))),
        Arc::new(move |a| d3(o2.apply_gradient_t(&as2(a)))),
    )
}

/// Weak pressure gradient, pressure -> velocity space.
pub fn taped_gradient_t(ops: &Arc<MeshOps>, x: &Tensor) -> Tensor {
    let o1 = Arc::clone(ops);
    let o2 = Arc::clone(ops);
    apply_linear(
        "apply_gradient_t",
        x,
        Arc::new(move |a| d3(o1.apply_gradient_t(&as2(a)))),
        Arc::new(move |a| d2(o2.apply_divergence(&as3(a)))),
    )
}

/// Direct stiffness summation (self-transpose).
pub fn taped_gather_sum(ops: &Arc<MeshOps>, x: &Tensor) -> Tensor {
    let gs = |o: Arc<MeshOps>| -> FieldFn {
        Arc::new(move |a: &ArrayD<f64>| {
            let mut f = as3(a);
            o.mesh.gather_scatter(&mut f.view_mut(), GatherMode::Sum);
            d3(f)
        })
    };
    apply_linear("gather_scatter_sum", x, gs(Arc::clone(ops)), gs(Arc::clone(ops)))
}

/// Multiplicity-weighted interface averaging (also self-transpose: it is
/// C diag(1/m) C^T in the copy-matrix notation).
pub fn taped_gather_average(ops: &Arc<MeshOps>, x: &Tensor) -> Tensor {
    let gs = |o: Arc<MeshOps>| -> FieldFn {
        Arc::new(move |a: &ArrayD<f64>| {
            let mut f = as3(a);
            o.mesh.gather_scatter(&mut f.view_mut(), GatherMode::Average);
            d3(f)
        })
    };
    apply_linear(
        "gather_scatter_average",
        x,
        gs(Arc::clone(ops)),
        gs(Arc::clone(ops)),
    )
}

/// Nodal x-derivative; transpose rule is D_x^T.
pub fn taped_dx(ops: &Arc<MeshOps>, x: &Tensor) -> Tensor {
    let o1 = Arc::clone(ops);
    let o2 = Arc::clone(ops);
    apply_linear(
        "nodal_dx",
        x,
        Arc::new(move |a| d3(o1.nodal_dx(&as3(a)))),
        Arc::new(move |a| d3(o2.nodal_dx_t(&as3(a)))),
    )
}

pub fn taped_dy(ops: &Arc<MeshOps>, x: &Tensor) -> Tensor {
    let o1 = Arc::clone(ops);
    let o2 = Arc::clone(ops);
    apply_linear(
        "nodal_dy",
        x,
        Arc::new(move |a| d3(o1.nodal_dy(&as3(a)))),
        Arc::new(move |a| d3(o2.nodal_dy_t(&as3(a)))),
    )
}

/// Inverse of the assembled diagonal mass as a constant tensor factor.
pub fn assembled_mass_inv(ops: &Arc<MeshOps>) -> ndarray::Array3<f64> {
    let mesh = &ops.mesh;
    let e = mesh.n_elements();
    let nv = mesh.n_vel_nodes();
    let mut m = ndarray::Array3::zeros((e, nv, 2));
    for el in 0..e {
        for n in 0..nv {
            for c in 0..2 {
                m[[el, n, c]] = ops.mass_diag[n];
            }
        }
    }
    mesh.gather_scatter(&mut m.view_mut(), GatherMode::Sum);
    m.mapv_inplace(|v| 1.0 / v);
    m
}

fn dot_unique_dyn(ops: &Arc<MeshOps>) -> Arc<dyn Fn(&ArrayD<f64>, &ArrayD<f64>) -> f64 + Send + Sync> {
    let o = Arc::clone(ops);
    Arc::new(move |a: &ArrayD<f64>, b: &ArrayD<f64>| {
        let inv = o.mesh.inv_multiplicity();
        let (e, nv, d) = a.view().into_dimensionality::<Ix3>().unwrap().dim();
        let av = a.as_slice().unwrap();
        let bv = b.as_slice().unwrap();
        let mut s = 0.0;
        for el in 0..e {
            for n in 0..nv {
                let m = inv[el * nv + n];
                let base = (el * nv + n) * d;
                for c in 0..d {
                    s += m * av[base + c] * bv[base + c];
                }
            }
        }
        s
    })
}

fn euclid_dot() -> Arc<dyn Fn(&ArrayD<f64>, &ArrayD<f64>) -> f64 + Send + Sync> {
    Arc::new(|a, b| {
        let (av, bv) = (a.as_slice().unwrap(), b.as_slice().unwrap());
        av.iter().zip(bv).map(|(x, y)| x * y).sum()
    })
}

struct CgFieldSolve {
    name: String,
    operator: FieldFn,
    prepare: Option<FieldFn>,
    dot: Arc<dyn Fn(&ArrayD<f64>, &ArrayD<f64>) -> f64 + Send + Sync>,
    project: Option<Arc<dyn Fn(&mut ArrayD<f64>) + Send + Sync>>,
    stop: CgStop,
    max_iters: usize,
    strict: bool,
}

impl CgFieldSolve {
    fn solve(&self, rhs: &ArrayD<f64>, context: &str) -> SolverResult<(ArrayD<f64>, CgOutcome)> {
        let b = match &self.prepare {
            Some(p) => p(rhs),
            None => rhs.clone(),
        };
        let op = &self.operator;
        let proj: Option<&dyn Fn(&mut ArrayD<f64>)> = self
            .project
            .as_ref()
            .map(|p| p.as_ref() as &dyn Fn(&mut ArrayD<f64>));
        let (x, out) = cg_solve(
            &mut |v| op(v),
            &b,
            self.dot.as_ref(),
            proj,
            self.stop,
            self.max_iters,
        )?;
        if self.strict && !out.converged {
            return Err(SolverError::CgNoConvergence {
                iterations: out.iterations,
                residual: out.residual,
                context: format!("{} ({})", self.name, context),
            });
        }
        Ok((x, out))
    }
}

impl CustomOp for CgFieldSolve {
    fn name(&self) -> &str {
        &self.name
    }

    fn vjp(
        &self,
        _inputs: &[Tensor],
        _output: &ArrayD<f64>,
        cotangent: &ArrayD<f64>,
    ) -> niles_autodiff::Result<Vec<Option<ArrayD<f64>>>> {
        // symmetric system: backward pass solves the same operator with the
        // cotangent as rhs
        let (lambda, _) = self
            .solve(cotangent, "backward")
            .map_err(|e| AdError::CustomBackward {
                op: self.name.clone(),
                msg: e.to_string(),
            })?;
        Ok(vec![Some(lambda)])
    }
}

/// Helmholtz solve (a M + nu K) u = gs(rhs) on the continuous velocity
/// space. Returns the solution tensor and the CG outcome.
pub fn helmholtz_solve_taped(
    ops: &Arc<MeshOps>,
    rhs: &Tensor,
    a_coef: f64,
    nu: f64,
    tol_rel: f64,
    max_iters: usize,
) -> SolverResult<(Tensor, CgOutcome)> {
    let o = Arc::clone(ops);
    let operator: FieldFn = Arc::new(move |x: &ArrayD<f64>| {
        d3(o.helmholtz_assembled(&as3(x), a_coef, nu))
    });
    let og = Arc::clone(ops);
    let prepare: FieldFn = Arc::new(move |b: &ArrayD<f64>| {
        let mut f = as3(b);
        og.mesh.gather_scatter(&mut f.view_mut(), GatherMode::Sum);
        d3(f)
    });
    let solve = CgFieldSolve {
        name: "helmholtz_cg".into(),
        operator,
        prepare: Some(prepare),
        dot: dot_unique_dyn(ops),
        project: None,
        stop: CgStop::Relative(tol_rel),
        max_iters,
        strict: true,
    };
    let (x, out) = solve.solve(&rhs.value().to_owned(), "forward")?;
    let t = Tensor::from_custom(vec![rhs.clone()], x, DType::F64, Rc::new(solve));
    Ok((t, out))
}

fn mean_project() -> Arc<dyn Fn(&mut ArrayD<f64>) + Send + Sync> {
    Arc::new(|q: &mut ArrayD<f64>| {
        let mean = q.sum() / q.len() as f64;
        q.mapv_inplace(|v| v - mean);
    })
}

/// Consistent pressure Poisson solve E q = rhs with E = D M_a^{-1} gs D^T,
/// on the zero-mean subspace.
pub fn pressure_solve_taped(
    ops: &Arc<MeshOps>,
    rhs: &Tensor,
    stop: CgStop,
    max_iters: usize,
) -> SolverResult<(Tensor, CgOutcome)> {
    let minv_plane = Arc::new(ops.assembled_mass_inv_plane());
    let o = Arc::clone(ops);
    let operator: FieldFn = Arc::new(move |q: &ArrayD<f64>| {
        d2(o.poisson_assembled(&as2(q), &minv_plane))
    });
    let solve = CgFieldSolve {
        name: "pressure_cg".into(),
        operator,
        prepare: None,
        dot: euclid_dot(),
        project: Some(mean_project()),
        stop,
        max_iters,
        strict: true,
    };
    let (x, out) = solve.solve(&rhs.value().to_owned(), "forward")?;
    let t = Tensor::from_custom(vec![rhs.clone()], x, DType::F64, Rc::new(solve));
    Ok((t, out))
}

/// General-purpose taped symmetric CG solve used by tests and the adjoint
/// checks; non-strict (reports the outcome instead of failing).
pub fn cg_solve_taped(
    name: &str,
    operator: FieldFn,
    rhs: &Tensor,
    stop: CgStop,
    max_iters: usize,
) -> SolverResult<(Tensor, CgOutcome)> {
    let solve = CgFieldSolve {
        name: name.to_string(),
        operator,
        prepare: None,
        dot: euclid_dot(),
        project: None,
        stop,
        max_iters,
        strict: false,
    };
    let (x, out) = solve.solve(&rhs.value().to_owned(), "forward")?;
    let t = Tensor::from_custom(vec![rhs.clone()], x, DType::F64, Rc::new(solve));
    Ok((t, out))
}
