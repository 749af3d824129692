//! Prior and variational-posterior Stratonovich SDEs over the latent token
//! sequence, integrated on tau in [0, 1] by the reversible Heun scheme.
//!
//! The path KL between posterior and prior, 1/2 ((h_post - h_prior)/g)^2,
//! is accumulated along the solve on the same time grid by augmenting the
//! state with a scalar. The solve enters the autodiff graph as one custom
//! op; its backward pass re-walks the steps in reverse, reconstructing the
//! states from the stored endpoints and Wiener increments through the
//! scheme's algebraic inverse, and applies each step's exact local VJP —
//! no second stochastic solve and no stored trajectory.

use crate::encdec::ArchConfig;
use crate::nn::{linear, mlp_diagonal, mlp_diagonal_params, transformer_block, transformer_block_params};
use crate::params::{ParamBuilder, Params};
use crate::{ModelError, ModelResult};
use ndarray::{ArrayD, IxDyn};
use niles_autodiff::{backward, no_grad, with_grad, AdError, CustomOp, DType, Tensor};
use niles_solver::seeds::rng_from;
use rand_distr::{Distribution, StandardNormal};
use std::rc::Rc;

/// Pre-drawn Gaussian increments with variance dtau per coordinate.
#[derive(Debug, Clone)]
pub struct WienerPath {
    pub increments: Vec<ArrayD<f64>>,
    pub dtau: f64,
}

impl WienerPath {
    pub fn sample(shape: &[usize], n_steps: usize, seed: u64) -> WienerPath {
        assert!(n_steps >= 1);
        let dtau = 1.0 / n_steps as f64;
        let std = dtau.sqrt();
        let mut rng = rng_from(seed);
        let increments = (0..n_steps)
            .map(|_| {
                let mut a = ArrayD::zeros(IxDyn(shape));
                for v in a.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v = n * std;
                }
                a
            })
            .collect();
        WienerPath { increments, dtau }
    }

    pub fn zeros(shape: &[usize], n_steps: usize) -> WienerPath {
        WienerPath {
            increments: (0..n_steps).map(|_| ArrayD::zeros(IxDyn(shape))).collect(),
            dtau: 1.0 / n_steps as f64,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len()
    }
}

/// Drift/diffusion pair (plus optional KL rate) driving one SDE solve.
/// Implementations close over whatever tensors they differentiate through
/// and report them via `inputs`.
pub trait SdeDynamics {
    fn drift(&self, z: &Tensor, tau: f64) -> Tensor;
    fn diffusion(&self, z: &Tensor, tau: f64) -> Tensor;
    /// Scalar KL rate 1/2 ||(h_post - h_prior)/g||^2; None outside
    /// posterior-mode solves.
    fn kl_rate(&self, z: &Tensor, tau: f64) -> Option<Tensor>;
    /// Differentiable tensors the drift/diffusion close over.
    fn inputs(&self) -> Vec<Tensor>;
}

/// One reversible Heun step on the augmented state (z, zhat, kl).
pub fn heun_step(
    dynamics: &dyn SdeDynamics,
    z: &Tensor,
    zhat: &Tensor,
    tau: f64,
    dtau: f64,
    dw: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let f0 = dynamics.drift(zhat, tau);
    let g0 = dynamics.diffusion(zhat, tau);
    let zhat_next = z
        .scale(2.0)
        .sub(zhat)
        .add(&f0.scale(dtau))
        .add(&g0.mul(dw));
    let f1 = dynamics.drift(&zhat_next, tau + dtau);
    let g1 = dynamics.diffusion(&zhat_next, tau + dtau);
    let z_next = z
        .add(&f0.add(&f1).scale(0.5 * dtau))
        .add(&g0.add(&g1).mul(dw).scale(0.5));
    let kl_inc = match (dynamics.kl_rate(zhat, tau), dynamics.kl_rate(&zhat_next, tau + dtau)) {
        (Some(r0), Some(r1)) => r0.add(&r1).scale(0.5 * dtau),
        _ => Tensor::zeros(&[1], DType::F64),
    };
    (z_next, zhat_next, kl_inc)
}

/// Algebraic inverse of [`heun_step`] given the same increment.
pub fn heun_step_inverse(
    dynamics: &dyn SdeDynamics,
    z_next: &Tensor,
    zhat_next: &Tensor,
    tau: f64,
    dtau: f64,
    dw: &Tensor,
) -> (Tensor, Tensor) {
    let f1 = dynamics.drift(zhat_next, tau + dtau);
    let g1 = dynamics.diffusion(zhat_next, tau + dtau);
    let zhat = z_next
        .scale(2.0)
        .sub(zhat_next)
        .sub(&f1.scale(dtau))
        .sub(&g1.mul(dw));
    let f0 = dynamics.drift(&zhat, tau);
    let g0 = dynamics.diffusion(&zhat, tau);
    let z = z_next
        .sub(&f0.add(&f1).scale(0.5 * dtau))
        .sub(&g0.add(&g1).mul(dw).scale(0.5));
    (z, zhat)
}

pub struct SdeSolution {
    /// State samples at tau = k/n, including the initial state.
    pub trajectory: Vec<ArrayD<f64>>,
    pub z_final: ArrayD<f64>,
    pub zhat_final: ArrayD<f64>,
    pub kl: f64,
}

/// Plain forward solve (no graph); returns the full trajectory.
pub fn reversible_heun_solve(
    dynamics: &dyn SdeDynamics,
    z0: &ArrayD<f64>,
    noise: &WienerPath,
) -> ModelResult<SdeSolution> {
    no_grad(|| {
        let dtau = noise.dtau;
        let mut z = Tensor::constant(z0.clone(), DType::F64);
        let mut zhat = z.clone();
        let mut kl = 0.0;
        let mut trajectory = vec![z0.clone()];
        for (n, dw) in noise.increments.iter().enumerate() {
            let dwt = Tensor::constant(dw.clone(), DType::F64);
            let (zn, zhn, klinc) = heun_step(dynamics, &z, &zhat, n as f64 * dtau, dtau, &dwt);
            if !zn.is_finite() {
                return Err(ModelError::NonFinite(format!("sde step {n}")));
            }
            kl += klinc.scalar_value();
            trajectory.push(zn.to_array());
            z = zn;
            zhat = zhn;
        }
        Ok(SdeSolution {
            trajectory,
            z_final: z.to_array(),
            zhat_final: zhat.to_array(),
            kl,
        })
    })
}

/// Reverse an entire solve back to tau = 0 from the stored endpoint pair;
/// exercises (and tests) the algebraic reversibility the backward pass
/// relies on.
pub fn reverse_solve(
    dynamics: &dyn SdeDynamics,
    z_final: &ArrayD<f64>,
    zhat_final: &ArrayD<f64>,
    noise: &WienerPath,
) -> ArrayD<f64> {
    no_grad(|| {
        let dtau = noise.dtau;
        let mut z = Tensor::constant(z_final.clone(), DType::F64);
        let mut zhat = Tensor::constant(zhat_final.clone(), DType::F64);
        for n in (0..noise.n_steps()).rev() {
            let dwt = Tensor::constant(noise.increments[n].clone(), DType::F64);
            let (zp, zhp) = heun_step_inverse(dynamics, &z, &zhat, n as f64 * dtau, dtau, &dwt);
            z = zp;
            zhat = zhp;
        }
        z.to_array()
    })
}

struct SdeSolveOp {
    dynamics: Rc<dyn SdeDynamics>,
    noise: Rc<WienerPath>,
    z_shape: Vec<usize>,
    z_final: ArrayD<f64>,
    zhat_final: ArrayD<f64>,
}

impl CustomOp for SdeSolveOp {
    fn name(&self) -> &str {
        "reversible_heun_solve"
    }

    fn vjp(
        &self,
        inputs: &[Tensor],
        _output: &ArrayD<f64>,
        cotangent: &ArrayD<f64>,
    ) -> niles_autodiff::Result<Vec<Option<ArrayD<f64>>>> {
        let n_z: usize = self.z_shape.iter().product();
        let cot_flat = cotangent
            .as_slice()
            .ok_or_else(|| AdError::CustomBackward {
                op: "reversible_heun_solve".into(),
                msg: "non-contiguous cotangent".into(),
            })?;
        let mut cz = ArrayD::from_shape_vec(IxDyn(&self.z_shape), cot_flat[..n_z].to_vec())
            .expect("cotangent reshape");
        let mut czhat = ArrayD::<f64>::zeros(IxDyn(&self.z_shape));
        let ckl = cot_flat[n_z];

        let dyn_inputs = self.dynamics.inputs();
        let mut input_grads: Vec<ArrayD<f64>> = dyn_inputs
            .iter()
            .map(|t| ArrayD::zeros(t.value().raw_dim()))
            .collect();

        let dtau = self.noise.dtau;
        let mut z = self.z_final.clone();
        let mut zhat = self.zhat_final.clone();
        for n in (0..self.noise.n_steps()).rev() {
            let tau = n as f64 * dtau;
            let dw = Tensor::constant(self.noise.increments[n].clone(), DType::F64);
            // reconstruct the pre-step state pair
            let (z_prev, zhat_prev) = no_grad(|| {
                let zt = Tensor::constant(z.clone(), DType::F64);
                let zht = Tensor::constant(zhat.clone(), DType::F64);
                let (a, b) = heun_step_inverse(self.dynamics.as_ref(), &zt, &zht, tau, dtau, &dw);
                (a.to_array(), b.to_array())
            });
            // exact local VJP of one step via a scalar surrogate
            let (gz, gzh, param_contribs) = with_grad(|| {
                let leaf_z = Tensor::leaf(z_prev.clone(), DType::F64);
                let leaf_zh = Tensor::leaf(zhat_prev.clone(), DType::F64);
                let (z1, zh1, klinc) =
                    heun_step(self.dynamics.as_ref(), &leaf_z, &leaf_zh, tau, dtau, &dw);
                let mut surrogate = z1
                    .weighted_sum_all(Rc::new(cz.clone()))
                    .add(&zh1.weighted_sum_all(Rc::new(czhat.clone())));
                if ckl != 0.0 {
                    surrogate = surrogate.add(&klinc.scale(ckl));
                }
                let store = backward(&surrogate)?;
                let gz = store.get_or_zeros(&leaf_z);
                let gzh = store.get_or_zeros(&leaf_zh);
                let contribs: Vec<ArrayD<f64>> = dyn_inputs
                    .iter()
                    .map(|t| store.get_or_zeros(t))
                    .collect();
                Ok::<_, AdError>((gz, gzh, contribs))
            })?;
            for (acc, c) in input_grads.iter_mut().zip(param_contribs) {
                *acc += &c;
            }
            cz = gz;
            czhat = gzh;
            z = z_prev;
            zhat = zhat_prev;
        }
        // zhat_0 = z_0, so both cotangents land on z0
        let cot_z0 = &cz + &czhat;
        let mut out: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(inputs.len());
        out.push(Some(cot_z0));
        for g in input_grads {
            out.push(Some(g));
        }
        Ok(out)
    }
}

/// Differentiable SDE solve: returns (z at tau=1, accumulated path KL).
pub fn reversible_heun_taped(
    z0: &Tensor,
    dynamics: Rc<dyn SdeDynamics>,
    noise: Rc<WienerPath>,
) -> ModelResult<(Tensor, Tensor)> {
    let sol = reversible_heun_solve(dynamics.as_ref(), &z0.to_array(), &noise)?;
    let z_shape = z0.shape().to_vec();
    let n_z: usize = z_shape.iter().product();
    let mut aug = Vec::with_capacity(n_z + 1);
    aug.extend(sol.z_final.iter());
    aug.push(sol.kl);
    let mut op_inputs = vec![z0.clone()];
    op_inputs.extend(dynamics.inputs());
    let out = Tensor::from_custom(
        op_inputs,
        ArrayD::from_shape_vec(IxDyn(&[n_z + 1]), aug).unwrap(),
        DType::F64,
        Rc::new(SdeSolveOp {
            dynamics,
            noise,
            z_shape: z_shape.clone(),
            z_final: sol.z_final,
            zhat_final: sol.zhat_final,
        }),
    );
    let z1 = out.slice_last_dim(0, n_z).reshape(&z_shape);
    let kl = out.slice_last_dim(n_z, 1);
    Ok((z1, kl))
}

/// Append the time as a broadcast feature column to every token.
fn with_tau(z: &Tensor, tau: f64) -> Tensor {
    let rows = z.shape()[0];
    let col = Tensor::constant(ArrayD::from_elem(IxDyn(&[rows, 1]), tau), z.dtype());
    Tensor::concat_last_dim(&[z.clone(), col])
}

fn drift_net(p: &Params, arch: &ArchConfig, name: &str, x: &Tensor) -> Tensor {
    let mut h = linear(p, &format!("{name}.proj"), x).add(p.p(&format!("{name}.pos")));
    let w = arch.latent_width();
    for blk in 0..arch.drift_blocks {
        h = transformer_block(p, &format!("{name}.b{blk}"), &h, arch.n_heads, w);
    }
    linear(p, &format!("{name}.out"), &h)
}

/// Prior drift h_theta(z, tau).
pub fn drift_prior(p: &Params, arch: &ArchConfig, z: &Tensor, tau: f64) -> Tensor {
    drift_net(p, arch, "sde.prior", &with_tau(z, tau))
}

/// Posterior drift h_phi(z, tau, context), context concatenated per token.
pub fn drift_posterior(
    p: &Params,
    arch: &ArchConfig,
    z: &Tensor,
    tau: f64,
    context: &Tensor,
) -> Tensor {
    let zin = Tensor::concat_last_dim(&[z.clone(), context.clone()]);
    drift_net(p, arch, "sde.post", &with_tau(&zin, tau))
}

/// Shared diffusion g_theta(z): positive diagonal MLP over coordinates.
/// The per-coordinate network sees only its own input coordinate, so the
/// time enters neither (structural single-input constraint).
pub fn diffusion(p: &Params, _arch: &ArchConfig, z: &Tensor, _tau: f64) -> Tensor {
    mlp_diagonal(p, "sde.diff", z)
}

pub fn build_sde_params(b: &mut ParamBuilder, arch: &ArchConfig) {
    let w = arch.latent_width();
    let el = arch.latent_tokens();
    for (name, in_w) in [("sde.prior", w + 1), ("sde.post", 2 * w + 1)] {
        b.linear(&format!("{name}.proj"), in_w, w, false);
        b.gaussian(&format!("{name}.pos"), &[el, w], 0.02);
        for blk in 0..arch.drift_blocks {
            transformer_block_params(b, &format!("{name}.b{blk}"), w, w, arch.drift_mlp_ratio);
        }
        // zero-init so drifts vanish at initialization
        b.linear(&format!("{name}.out"), w, w, true);
    }
    mlp_diagonal_params(b, "sde.diff", arch.diffusion_hidden, arch.diffusion_layers);
}

/// Posterior-mode dynamics: drift h_phi with the encoder context, shared
/// diffusion, and the path-KL rate against the prior drift.
pub struct PosteriorDynamics {
    pub params: Params,
    pub arch: ArchConfig,
    pub context: Tensor,
    /// Diagnostic switch: integrate with g = 0 (degenerate ensemble tests).
    pub zero_diffusion: bool,
}

impl SdeDynamics for PosteriorDynamics {
    fn drift(&self, z: &Tensor, tau: f64) -> Tensor {
        drift_posterior(&self.params, &self.arch, z, tau, &self.context)
    }

    fn diffusion(&self, z: &Tensor, tau: f64) -> Tensor {
        if self.zero_diffusion {
            Tensor::zeros(z.shape(), z.dtype())
        } else {
            diffusion(&self.params, &self.arch, z, tau)
        }
    }

    fn kl_rate(&self, z: &Tensor, tau: f64) -> Option<Tensor> {
        if self.zero_diffusion {
            return None;
        }
        let hp = drift_posterior(&self.params, &self.arch, z, tau, &self.context);
        let hq = drift_prior(&self.params, &self.arch, z, tau);
        let g = diffusion(&self.params, &self.arch, z, tau);
        Some(hp.sub(&hq).div(&g).square().sum_all().scale(0.5))
    }

    fn inputs(&self) -> Vec<Tensor> {
        let mut v: Vec<Tensor> = self
            .params
            .tensors()
            .filter(|(name, _)| name.starts_with("sde."))
            .map(|(_, t)| t.clone())
            .collect();
        v.push(self.context.clone());
        v
    }
}

/// Prior-mode dynamics for generative rollouts and diagnostics.
pub struct PriorDynamics {
    pub params: Params,
    pub arch: ArchConfig,
}

impl SdeDynamics for PriorDynamics {
    fn drift(&self, z: &Tensor, tau: f64) -> Tensor {
        drift_prior(&self.params, &self.arch, z, tau)
    }

    fn diffusion(&self, z: &Tensor, tau: f64) -> Tensor {
        diffusion(&self.params, &self.arch, z, tau)
    }

    fn kl_rate(&self, _z: &Tensor, _tau: f64) -> Option<Tensor> {
        None
    }

    fn inputs(&self) -> Vec<Tensor> {
        self.params
            .tensors()
            .filter(|(name, _)| name.starts_with("sde."))
            .map(|(_, t)| t.clone())
            .collect()
    }
}

/// KL between N(mu, diag sigma^2) and N(0, sigma_prior^2 I), in the printed
/// form sum_i [ log(sigma_prior / sigma_i) + (sigma_i^2 + mu_i^2) /
/// (2 sigma_prior^2) ]; the textbook variant subtracts n/2.
pub fn kl_initial(mu: &Tensor, sigma: &Tensor, sigma_prior: f64, textbook: bool) -> Tensor {
    let n = mu.len() as f64;
    let log_ratio = sigma
        .ln()
        .sum_all()
        .neg()
        .add_const(n * sigma_prior.ln());
    let quad = sigma
        .square()
        .add(&mu.square())
        .sum_all()
        .scale(1.0 / (2.0 * sigma_prior * sigma_prior));
    let kl = log_ratio.add(&quad);
    if textbook {
        kl.add_const(-0.5 * n)
    } else {
        kl
    }
}

/// Draw K initial latent states z ~ N(mu, diag sigma^2) by
/// reparameterization (gradients flow into mu and sigma).
pub fn sample_initial(
    mu: &Tensor,
    sigma: &Tensor,
    k: usize,
    seed: u64,
) -> ModelResult<Vec<Tensor>> {
    if k == 0 {
        return Err(ModelError::InvalidConfig("ensemble size K must be >= 1".into()));
    }
    if sigma.value().iter().any(|s| *s <= 0.0) {
        return Err(ModelError::InvalidConfig(
            "initial-state sigma must be strictly positive".into(),
        ));
    }
    let shape = mu.shape().to_vec();
    let mut out = Vec::with_capacity(k);
    for member in 0..k {
        let mut rng = rng_from(niles_solver::seeds::derive_seed(seed, &[0x7a30, member as u64]));
        let mut xi = ArrayD::zeros(IxDyn(&shape));
        for v in xi.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = n;
        }
        let noise = Tensor::constant(xi, mu.dtype());
        out.push(mu.add(&sigma.mul(&noise)));
    }
    Ok(out)
}
