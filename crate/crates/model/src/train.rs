//! Loss assembly and the training loop.
//!
//! A training sample is an S-step window of filtered-DNS snapshots. The
//! model unrolls S corrected coarse steps from the window head, pays a
//! quadrature-weighted reconstruction loss at every step, plus the
//! beta-weighted KL terms (initial state and path, averaged over ensemble
//! members and rollout steps). Optimization is Adam under global-norm
//! clipping with the warmup/cosine learning-rate and linear KL schedules.

use crate::closure::{niles_step, ClosureMode, SdeRunConfig};
use crate::encdec::ArchConfig;
use crate::optim::Adam;
use crate::params::{read_tensor_map, write_tensor_map, ParamBuilder, Params};
use crate::schedule::{kl_schedule, lr_schedule};
use crate::{ModelError, ModelResult};
use ndarray::{Array3, ArrayD};
use niles_autodiff::{backward, DType, Tensor};
use niles_solver::dataset::{window_refs, CoarseTrajectory};
use niles_solver::seeds::derive_seed;
use niles_solver::stepper::{Stepper, TensorState};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ClosureMode,
    pub base_lr: f64,
    /// Final KL weight beta (reached after ten epochs of linear warmup).
    pub kl_final_beta: f64,
    pub epochs: usize,
    /// Rollout length S (> 1 for rollout training).
    pub rollout_steps: usize,
    pub batch_size: usize,
    /// Posterior scale sigma in the reconstruction loss.
    pub posterior_scale: f64,
    pub seed: u64,
    pub sde: SdeRunConfig,
    pub grad_clip: f64,
    pub precision: Precision,
    /// When false, coarse-solver internals are detached (gradients reach the
    /// model only through each step's closure term).
    #[serde(default = "default_true")]
    pub differentiate_through_solver: bool,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_validate_every")]
    pub validate_every: usize,
    #[serde(default = "default_val_rollout_steps")]
    pub val_rollout_steps: usize,
    /// Cap on optimizer steps (smoke runs); None runs the full schedule.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_true() -> bool {
    true
}

fn default_checkpoint_every() -> usize {
    200
}

fn default_validate_every() -> usize {
    100
}

fn default_val_rollout_steps() -> usize {
    8
}

impl TrainConfig {
    pub fn desk(model: ClosureMode) -> TrainConfig {
        TrainConfig {
            model,
            base_lr: 1e-3,
            kl_final_beta: 1e-3,
            epochs: 25,
            rollout_steps: 8,
            batch_size: 4,
            posterior_scale: 1.0,
            seed: 11,
            sde: SdeRunConfig::default(),
            grad_clip: 1.0,
            precision: Precision::F32,
            differentiate_through_solver: true,
            checkpoint_every: 200,
            validate_every: 100,
            val_rollout_steps: 8,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> ModelResult<()> {
        if self.rollout_steps < 1 {
            return Err(ModelError::InvalidConfig("rollout_steps must be >= 1".into()));
        }
        if self.model == ClosureMode::Niles && self.rollout_steps < 2 {
            return Err(ModelError::InvalidConfig(
                "rollout training needs S > 1".into(),
            ));
        }
        if self.base_lr <= 0.0 || self.batch_size == 0 || self.posterior_scale <= 0.0 {
            return Err(ModelError::InvalidConfig(
                "base_lr, batch_size, posterior_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Build the parameter tree for a model kind (the deterministic baseline
/// carries no SDE networks at all).
pub fn build_params(arch: &ArchConfig, mode: ClosureMode, seed: u64, dtype: DType) -> Params {
    let mut b = ParamBuilder::new(seed, dtype);
    crate::encdec::build_encoder_decoder_params(&mut b, arch);
    if mode == ClosureMode::Niles {
        crate::sde::build_sde_params(&mut b, arch);
    }
    b.params
}

/// GLL-quadrature weights over (E, nv, d) velocity arrays, for the discrete
/// L2 norm in the reconstruction loss.
pub fn quad_weights(stepper: &Stepper) -> Rc<ArrayD<f64>> {
    let mesh = stepper.mesh();
    let e = mesh.n_elements();
    let nv = mesh.n_vel_nodes();
    let mut w = Array3::zeros((e, nv, 2));
    for el in 0..e {
        for n in 0..nv {
            for c in 0..2 {
                w[[el, n, c]] = stepper.ops.mass_diag[n];
            }
        }
    }
    Rc::new(w.into_dyn())
}

/// (2 sigma^2)^-1 || v - target ||^2 in the quadrature-weighted norm.
pub fn recon_loss(
    pred_vel: &Tensor,
    target: &Array3<f64>,
    weights: &Rc<ArrayD<f64>>,
    sigma: f64,
) -> Tensor {
    let t = Tensor::constant(target.clone().into_dyn(), DType::F64);
    pred_vel
        .sub(&t)
        .square()
        .weighted_sum_all(Rc::clone(weights))
        .scale(1.0 / (2.0 * sigma * sigma))
}

pub struct RolloutLoss {
    /// Full objective tensor (recon + beta * KL means).
    pub objective: Tensor,
    pub recon: f64,
    pub kl_z0: f64,
    pub kl_path: f64,
}

/// Unroll S corrected steps from `window[0]` and accumulate the losses
/// against `window[1..]`. KL terms are averaged over rollout steps (and the
/// path term over ensemble members inside the closure).
#[allow(clippy::too_many_arguments)]
pub fn rollout_objective(
    stepper: &Stepper,
    params: &Params,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    window: &[Array3<f64>],
    t0: f64,
    beta: f64,
    seed: u64,
) -> ModelResult<RolloutLoss> {
    let s = window.len() - 1;
    let weights = quad_weights(stepper);
    let mesh = stepper.mesh();
    let initial = niles_solver::io::coarse_field_from_velocity(mesh, window[0].clone(), t0);
    let projected = stepper.project_divergence_free(&initial)?;
    let mut history: Vec<TensorState> = vec![TensorState::from_field(&projected)];

    let mut recon_total: Option<Tensor> = None;
    let mut kl_z0_total: Option<Tensor> = None;
    let mut kl_path_total: Option<Tensor> = None;
    for k in 1..=s {
        let step_seed = derive_seed(seed, &[0x73746570, k as u64]);
        let step_history: Vec<TensorState> = if cfg.differentiate_through_solver {
            history.clone()
        } else {
            history
                .iter()
                .map(|st| TensorState {
                    vel: st.vel.detach(),
                    pres: st.pres.detach(),
                    time: st.time,
                })
                .collect()
        };
        // keep the closure input attached even when the solver is detached
        let mut step_history = step_history;
        if !cfg.differentiate_through_solver {
            let last = history.last().unwrap();
            step_history.last_mut().unwrap().vel = last.vel.clone();
        }
        let (next, kls, _diag) = niles_step(
            stepper,
            &step_history,
            params,
            arch,
            &cfg.sde,
            cfg.model,
            step_seed,
        )?;
        let loss_k = recon_loss(&next.vel, &window[k], &weights, cfg.posterior_scale);
        recon_total = Some(match recon_total {
            Some(acc) => acc.add(&loss_k),
            None => loss_k,
        });
        kl_z0_total = Some(match kl_z0_total {
            Some(acc) => acc.add(&kls.kl_z0),
            None => kls.kl_z0,
        });
        kl_path_total = Some(match kl_path_total {
            Some(acc) => acc.add(&kls.kl_path),
            None => kls.kl_path,
        });
        history.push(next);
        if history.len() > 3 {
            history.remove(0);
        }
    }
    let recon = recon_total.unwrap();
    let kl_z0 = kl_z0_total.unwrap().scale(1.0 / s as f64);
    let kl_path = kl_path_total.unwrap().scale(1.0 / s as f64);
    let objective = if cfg.model == ClosureMode::Niles && beta > 0.0 {
        recon
            .add(&kl_z0.cast(DType::F64).scale(beta))
            .add(&kl_path.cast(DType::F64).scale(beta))
    } else {
        recon.clone()
    };
    if !objective.is_finite() {
        return Err(ModelError::NonFinite("objective".into()));
    }
    Ok(RolloutLoss {
        recon: recon.scalar_value(),
        kl_z0: kl_z0.scalar_value(),
        kl_path: kl_path.scalar_value(),
        objective,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub beta: f64,
    pub recon: f64,
    pub kl_z0: f64,
    pub kl_path: f64,
    pub total: f64,
    pub wallclock: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    adam_t: usize,
    config_hash: String,
    best_val: Option<f64>,
    /// Training randomness is derived statelessly from (seed, step), so the
    /// stored seed plus the step counter is the full RNG state.
    seed: u64,
}

pub struct TrainOutcome {
    pub params: Params,
    pub log: Vec<LogRow>,
    pub best_val: Option<f64>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

fn save_checkpoint(
    dir: &Path,
    step: usize,
    params: &Params,
    adam: &Adam,
    config_hash: &str,
    best_val: Option<f64>,
    seed: u64,
) -> ModelResult<PathBuf> {
    let ckpt = dir.join(format!("ckpt_{step:06}"));
    std::fs::create_dir_all(&ckpt)?;
    write_tensor_map(&ckpt.join("params"), &params.to_map())?;
    let mut opt_map: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    for (k, v) in &adam.m {
        opt_map.insert(format!("m.{k}"), v.clone());
    }
    for (k, v) in &adam.v {
        opt_map.insert(format!("v.{k}"), v.clone());
    }
    write_tensor_map(&ckpt.join("optim"), &opt_map)?;
    let meta = CheckpointMeta {
        step,
        adam_t: adam.t,
        config_hash: config_hash.to_string(),
        best_val,
        seed,
    };
    std::fs::write(ckpt.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(ckpt)
}

/// Load params + optimizer state; returns (step, adam_t, best_val).
pub fn load_checkpoint(
    ckpt: &Path,
    params: &mut Params,
    adam: &mut Adam,
) -> ModelResult<(usize, Option<f64>)> {
    let meta: CheckpointMeta =
        serde_json::from_str(&std::fs::read_to_string(ckpt.join("meta.json"))?)?;
    params.load_values(&read_tensor_map(&ckpt.join("params"))?)?;
    let opt_map = read_tensor_map(&ckpt.join("optim"))?;
    adam.m.clear();
    adam.v.clear();
    for (k, v) in opt_map {
        if let Some(name) = k.strip_prefix("m.") {
            adam.m.insert(name.to_string(), v);
        } else if let Some(name) = k.strip_prefix("v.") {
            adam.v.insert(name.to_string(), v);
        }
    }
    adam.t = meta.adam_t;
    Ok((meta.step, meta.best_val))
}

/// Load model params from a checkpoint directory into a fresh tree.
pub fn load_params_from_checkpoint(
    ckpt: &Path,
    arch: &ArchConfig,
    mode: ClosureMode,
    dtype: DType,
) -> ModelResult<Params> {
    let mut params = build_params(arch, mode, 0, dtype);
    params.load_values(&read_tensor_map(&ckpt.join("params"))?)?;
    Ok(params)
}

/// Validation MSE over `val_rollout_steps`-step rollouts from fixed window
/// starts of every validation trajectory.
pub fn validation_mse(
    stepper: &Stepper,
    params: &Params,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    val: &[CoarseTrajectory],
) -> ModelResult<f64> {
    let s = cfg.val_rollout_steps;
    let weights = quad_weights(stepper);
    let mut total = 0.0;
    let mut count = 0usize;
    niles_autodiff::no_grad(|| {
        for traj in val {
            let max_start = traj.snapshots.len().saturating_sub(s + 1);
            for start in [0, max_start / 2, max_start] {
                let window: Vec<Array3<f64>> =
                    (0..=s).map(|k| traj.snapshots[start + k].clone()).collect();
                let mesh = stepper.mesh();
                let initial = niles_solver::io::coarse_field_from_velocity(
                    mesh,
                    window[0].clone(),
                    traj.first_time + start as f64 * traj.dt,
                );
                let projected = stepper.project_divergence_free(&initial)?;
                let mut history = vec![TensorState::from_field(&projected)];
                for (k, target) in window.iter().enumerate().skip(1) {
                    let (next, _, _) = niles_step(
                        stepper,
                        &history,
                        params,
                        arch,
                        &cfg.sde,
                        cfg.model,
                        derive_seed(cfg.seed, &[0x76616c, traj.id as u64, start as u64, k as u64]),
                    )?;
                    let mse = recon_loss(&next.vel, target, &weights, 1.0).scalar_value();
                    total += mse;
                    count += 1;
                    history.push(next);
                    if history.len() > 3 {
                        history.remove(0);
                    }
                }
            }
        }
        Ok::<(), ModelError>(())
    })?;
    Ok(total / count.max(1) as f64)
}

fn append_log_row(file: &mut std::fs::File, row: &LogRow) -> ModelResult<()> {
    writeln!(
        file,
        "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.3}",
        row.step, row.lr, row.beta, row.recon, row.kl_z0, row.kl_path, row.total, row.wallclock
    )?;
    Ok(())
}

/// Run (or resume) training; returns the final parameters and the loss log.
#[allow(clippy::too_many_arguments)]
pub fn train(
    stepper: &Stepper,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    train_data: &[CoarseTrajectory],
    val_data: &[CoarseTrajectory],
    out_dir: &Path,
    config_hash: &str,
    resume: Option<&Path>,
) -> ModelResult<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let dtype = cfg.precision.dtype();
    let mut params = build_params(arch, cfg.model, derive_seed(cfg.seed, &[0x696e6974]), dtype);
    let mut adam = Adam::new();
    let mut start_step = 0usize;
    let mut best_val: Option<f64> = None;
    if let Some(ckpt) = resume {
        let (step, bv) = load_checkpoint(ckpt, &mut params, &mut adam)?;
        start_step = step;
        best_val = bv;
    }

    let s = cfg.rollout_steps;
    let n_windows: usize = train_data
        .iter()
        .map(|t| t.snapshots.len().saturating_sub(s))
        .sum();
    if n_windows == 0 {
        return Err(ModelError::InvalidConfig(
            "no training windows: trajectories shorter than S+1".into(),
        ));
    }
    let steps_per_epoch = n_windows.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).min(cfg.max_steps.unwrap_or(usize::MAX));

    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("train_log.csv"))?;
    if start_step == 0 {
        writeln!(log_file, "step,lr,beta,recon,kl_z0,kl_path,total,wallclock")?;
    }

    let mut log = Vec::new();
    let mut best_ckpt: Option<PathBuf> = None;
    let t_start = std::time::Instant::now();
    let mut epoch_windows: Option<(usize, Vec<niles_solver::dataset::WindowRef>)> = None;

    for step in start_step..total_steps {
        let epoch = step / steps_per_epoch;
        if epoch_windows.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let refs = window_refs(train_data, s, derive_seed(cfg.seed, &[0x6570, epoch as u64]))
                .map_err(ModelError::Solver)?;
            epoch_windows = Some((epoch, refs));
        }
        let refs = &epoch_windows.as_ref().unwrap().1;
        let batch_start = (step % steps_per_epoch) * cfg.batch_size;
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|i| refs[(batch_start + i) % refs.len()])
            .collect();

        let lr = lr_schedule(step, steps_per_epoch, cfg.epochs, cfg.base_lr);
        let beta = kl_schedule(step as f64 / steps_per_epoch as f64, cfg.kl_final_beta);

        let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        let mut recon = 0.0;
        let mut kl_z0 = 0.0;
        let mut kl_path = 0.0;
        let mut total = 0.0;
        for (bi, wref) in batch.iter().enumerate() {
            let traj = &train_data[wref.trajectory];
            let window: Vec<Array3<f64>> = (0..=s)
                .map(|k| traj.snapshots[wref.start + k].clone())
                .collect();
            let t0 = traj.first_time + wref.start as f64 * traj.dt;
            let out = rollout_objective(
                stepper,
                &params,
                arch,
                cfg,
                &window,
                t0,
                beta,
                derive_seed(cfg.seed, &[0x7769, step as u64, bi as u64]),
            );
            let out = match out {
                Ok(o) => o,
                Err(e) => {
                    // dump the last good state before surfacing the failure
                    let _ = save_checkpoint(
                        out_dir, step, &params, &adam, config_hash, best_val, cfg.seed,
                    );
                    return Err(ModelError::TrainingAborted {
                        step,
                        reason: e.to_string(),
                    });
                }
            };
            let store = backward(&out.objective)?;
            let scale = 1.0 / cfg.batch_size as f64;
            for (name, tensor) in params.tensors() {
                if let Some(g) = store.get(tensor) {
                    let entry = grads
                        .entry(name.clone())
                        .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                    entry.zip_mut_with(g, |a, &b| *a += scale * b);
                }
            }
            recon += scale * out.recon;
            kl_z0 += scale * out.kl_z0;
            kl_path += scale * out.kl_path;
            total += scale * out.objective.scalar_value();
        }
        Adam::clip_global_norm(&mut grads, cfg.grad_clip);
        adam.step(&mut params, &grads, lr);
        if !params.all_finite() {
            let _ = save_checkpoint(out_dir, step, &params, &adam, config_hash, best_val, cfg.seed);
            return Err(ModelError::TrainingAborted {
                step,
                reason: "non-finite parameters after update".into(),
            });
        }

        let row = LogRow {
            step,
            lr,
            beta,
            recon,
            kl_z0,
            kl_path,
            total,
            wallclock: t_start.elapsed().as_secs_f64(),
        };
        append_log_row(&mut log_file, &row)?;
        log.push(row);

        let next_step = step + 1;
        if cfg.validate_every > 0 && next_step % cfg.validate_every == 0 && !val_data.is_empty() {
            let v = validation_mse(stepper, &params, arch, cfg, val_data)?;
            if best_val.map(|b| v < b).unwrap_or(true) {
                best_val = Some(v);
                best_ckpt = Some(save_checkpoint(
                    out_dir,
                    next_step,
                    &params,
                    &adam,
                    config_hash,
                    best_val,
                    cfg.seed,
                )?);
            }
        }
        if cfg.checkpoint_every > 0 && next_step % cfg.checkpoint_every == 0 {
            save_checkpoint(out_dir, next_step, &params, &adam, config_hash, best_val, cfg.seed)?;
        }
    }

    let final_checkpoint = save_checkpoint(
        out_dir,
        total_steps,
        &params,
        &adam,
        config_hash,
        best_val,
        cfg.seed,
    )?;
    Ok(TrainOutcome {
        params,
        log,
        best_val,
        final_checkpoint,
        best_checkpoint: best_ckpt,
    })
}
