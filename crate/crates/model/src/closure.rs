//! The Monte-Carlo closure tendency and the corrected coarse step.
//!
//! One closure evaluation: encode the coarse state to a Gaussian over the
//! initial latent state, draw K members, integrate each through the
//! posterior SDE to tau = 1, decode with the encoder skips, average, and
//! divide by the coarse step to obtain a tendency. One corrected step:
//! coarse BDF step, add tendency * dt to the velocity, project back to the
//! divergence tolerance (the projection's multiplier folds into the
//! pressure). The deterministic baseline feeds mu straight to the decoder;
//! the implicit-LES baseline replaces the closure by the top-mode blend
//! filter.

use crate::encdec::{decode, encode, untokenize, ArchConfig};
use crate::params::Params;
use crate::sde::{
    kl_initial, reversible_heun_taped, sample_initial, PosteriorDynamics, WienerPath,
};
use crate::{ModelError, ModelResult};
use niles_autodiff::{DType, Tensor};
use niles_solver::cg::CgStop;
use niles_solver::filter::implicit_les_filter;
use niles_solver::physops::{
    pressure_solve_taped, taped_divergence, taped_gather_average, taped_gather_sum,
    taped_gradient_t,
};
use niles_solver::seeds::derive_seed;
use niles_solver::stepper::{StepDiag, Stepper, TensorState};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SdeRunConfig {
    /// SDE ensemble size K.
    pub k_ensemble: usize,
    /// Steps of the latent solve on tau in [0, 1].
    pub sde_steps: usize,
    /// Fixed scale of the latent prior over the initial state.
    pub sigma_prior: f64,
    /// Use the textbook KL(Z0) form (subtracts n/2) instead of the printed
    /// one.
    #[serde(default)]
    pub kl_textbook_form: bool,
    /// Diagnostic switch: g = 0 and z0 = mu for degenerate-ensemble tests.
    #[serde(default)]
    pub zero_noise: bool,
}

impl Default for SdeRunConfig {
    fn default() -> Self {
        SdeRunConfig {
            k_ensemble: 4,
            sde_steps: 16,
            sigma_prior: 0.1,
            kl_textbook_form: false,
            zero_noise: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosureMode {
    /// Encoder -> K posterior SDE samples -> decoder -> ensemble mean.
    Niles,
    /// Encoder mean straight into the decoder; no sampling, SDE, or KL.
    Deterministic,
}

pub struct ClosureOutput {
    /// Velocity-space tendency (E, nv, 2), units velocity/time.
    pub tendency: Tensor,
    /// KL of the initial latent state (zero tensor in deterministic mode).
    pub kl_z0: Tensor,
    /// Ensemble-averaged path KL (zero tensor in deterministic mode).
    pub kl_path: Tensor,
    /// Per-member L2 norms of the decoded increments.
    pub member_norms: Vec<f64>,
    /// RMS deviation of members around the ensemble mean.
    pub spread: f64,
}

fn ensure_finite(t: &Tensor, stage: &str) -> ModelResult<()> {
    if !t.is_finite() {
        return Err(ModelError::NonFinite(stage.to_string()));
    }
    Ok(())
}

/// Ensemble mean computed as x0 + sum(xi - x0)/K, which is exact when all
/// members coincide (degenerate-ensemble identity) and slightly better
/// conditioned in general.
fn member_mean(members: &[Tensor]) -> Tensor {
    let k = members.len();
    if k == 1 {
        return members[0].clone();
    }
    let mut acc = members[1].sub(&members[0]);
    for m in &members[2..] {
        acc = acc.add(&m.sub(&members[0]));
    }
    members[0].add(&acc.scale(1.0 / k as f64))
}

/// Monte-Carlo closure tendency M(v) for a coarse state `v` (E, nv, 2).
///
/// `dt_les` is the coarse step t1 - t0; `seed` drives the initial-state
/// draws and Wiener paths of this evaluation.
pub fn compute_closure(
    params: &Params,
    arch: &ArchConfig,
    sde: &SdeRunConfig,
    mode: ClosureMode,
    v: &Tensor,
    dt_les: f64,
    seed: u64,
) -> ModelResult<ClosureOutput> {
    let nv = v.shape()[1];
    let d = v.shape()[2];
    let model_dtype = params.dtype();
    let v_model = v.cast(model_dtype);
    ensure_finite(&v_model, "closure input")?;

    let enc = encode(params, arch, &v_model)?;
    ensure_finite(&enc.mu, "encoder mean")?;
    ensure_finite(&enc.sigma, "encoder sigma")?;

    let (increment_tokens, kl_z0, kl_path, member_norms, spread) = match mode {
        ClosureMode::Deterministic => {
            let dec = decode(params, arch, &enc.mu, Some(&enc.skips))?;
            ensure_finite(&dec, "decoder")?;
            let norm = dec.value().iter().map(|x| x * x).sum::<f64>().sqrt();
            (
                dec,
                Tensor::zeros(&[1], model_dtype),
                Tensor::zeros(&[1], model_dtype),
                vec![norm],
                0.0,
            )
        }
        ClosureMode::Niles => {
            let kl_z0 = kl_initial(&enc.mu, &enc.sigma, sde.sigma_prior, sde.kl_textbook_form);
            let z0s: Vec<Tensor> = if sde.zero_noise {
                (0..sde.k_ensemble).map(|_| enc.mu.clone()).collect()
            } else {
                sample_initial(&enc.mu, &enc.sigma, sde.k_ensemble, derive_seed(seed, &[0x5a30]))?
            };
            let mut decoded = Vec::with_capacity(sde.k_ensemble);
            let mut kls = Vec::with_capacity(sde.k_ensemble);
            for (member, z0) in z0s.iter().enumerate() {
                let noise = if sde.zero_noise {
                    Rc::new(WienerPath::zeros(z0.shape(), sde.sde_steps))
                } else {
                    Rc::new(WienerPath::sample(
                        z0.shape(),
                        sde.sde_steps,
                        derive_seed(seed, &[0x77, member as u64]),
                    ))
                };
                let dynamics = Rc::new(PosteriorDynamics {
                    params: params.clone(),
                    arch: arch.clone(),
                    context: enc.mu.clone(),
                    zero_diffusion: sde.zero_noise,
                });
                let (z1, kl) = reversible_heun_taped(z0, dynamics, noise)?;
                ensure_finite(&z1, &format!("sde member {member}"))?;
                let dec = decode(params, arch, &z1, Some(&enc.skips))?;
                ensure_finite(&dec, &format!("decoder member {member}"))?;
                decoded.push(dec);
                kls.push(kl);
            }
            let mean = member_mean(&decoded);
            let kl_path = member_mean(&kls);
            let member_norms: Vec<f64> = decoded
                .iter()
                .map(|d| d.value().iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            let mean_val = mean.to_array();
            let mut spread = 0.0;
            for d in &decoded {
                let mut s = 0.0;
                for (a, b) in d.value().iter().zip(mean_val.iter()) {
                    s += (a - b) * (a - b);
                }
                spread += s;
            }
            spread = (spread / (decoded.len() * mean_val.len()) as f64).sqrt();
            (mean, kl_z0, kl_path, member_norms, spread)
        }
    };

    let increment = untokenize(&increment_tokens, nv, d);
    let tendency = increment.scale(1.0 / dt_les).cast(DType::F64);
    ensure_finite(&tendency, "tendency")?;
    Ok(ClosureOutput {
        tendency,
        kl_z0,
        kl_path,
        member_norms,
        spread,
    })
}

/// KL terms produced by one corrected step.
pub struct StepKl {
    pub kl_z0: Tensor,
    pub kl_path: Tensor,
}

/// One closure-corrected coarse step: BDF step, add tendency * dt, project.
pub fn niles_step(
    stepper: &Stepper,
    history: &[TensorState],
    params: &Params,
    arch: &ArchConfig,
    sde: &SdeRunConfig,
    mode: ClosureMode,
    seed: u64,
) -> ModelResult<(TensorState, StepKl, StepDiag)> {
    let newest = history.last().expect("empty history");
    let closure = compute_closure(params, arch, sde, mode, &newest.vel, stepper.cfg.dt, seed)?;
    let (bdf, diag) = stepper.step_taped(history)?;

    // per-element decoder output is made C0 before it touches the state;
    // this also keeps its divergence mean-free so the projection below can
    // reach the tolerance
    let tendency = taped_gather_average(&stepper.ops, &closure.tendency);
    let corrected = bdf.vel.add(&tendency.scale(stepper.cfg.dt));
    // project the corrected velocity back under the divergence tolerance;
    // skip entirely when the closure increment is exactly zero so the
    // zero-closure step coincides with the bare solver step
    let tendency_is_zero = closure.tendency.value().iter().all(|v| *v == 0.0);
    let (vel, pres) = if tendency_is_zero {
        (bdf.vel.clone(), bdf.pres.clone())
    } else {
        let ops = &stepper.ops;
        let div = taped_divergence(ops, &corrected);
        let (q, _) = pressure_solve_taped(
            ops,
            &div,
            CgStop::Absolute(0.5 * stepper.cfg.cg_tol),
            stepper.cfg.cg_max_iters,
        )?;
        let minv = Tensor::constant(
            niles_solver::physops::assembled_mass_inv(ops).into_dyn(),
            DType::F64,
        );
        let corr = taped_gather_sum(ops, &taped_gradient_t(ops, &q)).mul(&minv);
        let vel = corrected.sub(&corr);
        // fold the projection multiplier into the pressure
        let beta0_over_dt = match history.len() {
            1 => 1.0,
            2 => 1.5,
            _ => 11.0 / 6.0,
        } / stepper.cfg.dt;
        let pres = bdf.pres.sub(&q.scale(beta0_over_dt));
        (vel, pres)
    };

    Ok((
        TensorState {
            vel,
            pres,
            time: bdf.time,
        },
        StepKl {
            kl_z0: closure.kl_z0,
            kl_path: closure.kl_path,
        },
        diag,
    ))
}

/// Implicit-LES baseline: bare coarse step followed by the top-mode blend
/// filter with weight alpha (alpha = 0 is exactly the bare step).
pub fn implicit_les_step(
    stepper: &Stepper,
    history: &[TensorState],
    alpha: f64,
) -> ModelResult<(TensorState, StepDiag)> {
    let (bdf, diag) = stepper.step_taped(history)?;
    if alpha == 0.0 {
        return Ok((bdf, diag));
    }
    let field = bdf.to_field(stepper.mesh());
    let filtered = implicit_les_filter(&field, alpha);
    Ok((
        TensorState {
            vel: Tensor::constant(filtered.velocity.into_dyn(), DType::F64),
            pres: bdf.pres,
            time: bdf.time,
        },
        diag,
    ))
}

/// Convenience: run a whole multi-step rollout of a step kind without
/// gradients, returning the velocity snapshots.
pub enum RolloutKind<'a> {
    NoClosure,
    ImplicitLes(f64),
    Closure {
        params: &'a Params,
        arch: &'a ArchConfig,
        sde: &'a SdeRunConfig,
        mode: ClosureMode,
        seed: u64,
    },
}

pub fn rollout(
    stepper: &Stepper,
    initial: &niles_solver::FlowField,
    n_steps: usize,
    kind: &RolloutKind,
) -> ModelResult<Vec<niles_solver::FlowField>> {
    niles_autodiff::no_grad(|| {
        let projected = stepper.project_divergence_free(initial)?;
        let mut history: Vec<TensorState> = vec![TensorState::from_field(&projected)];
        let mut snaps = Vec::with_capacity(n_steps + 1);
        snaps.push(projected);
        for step in 1..=n_steps {
            let next = match kind {
                RolloutKind::NoClosure => stepper.step_taped(&history)?.0,
                RolloutKind::ImplicitLes(alpha) => implicit_les_step(stepper, &history, *alpha)?.0,
                RolloutKind::Closure {
                    params,
                    arch,
                    sde,
                    mode,
                    seed,
                } => {
                    let (s, _, _) = niles_step(
                        stepper,
                        &history,
                        params,
                        arch,
                        sde,
                        *mode,
                        derive_seed(*seed, &[0x726f, step as u64]),
                    )?;
                    s
                }
            };
            snaps.push(next.to_field(stepper.mesh()));
            history.push(next);
            if history.len() > 3 {
                history.remove(0);
            }
        }
        Ok(snaps)
    })
}
