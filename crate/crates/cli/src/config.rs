//! The single JSON configuration document covering solver, dataset, model
//! architecture, training and evaluation. Unknown keys are rejected and the
//! canonical-serialization hash is embedded in every artifact.

use anyhow::{Context, Result};
use niles_model::closure::SdeRunConfig;
use niles_model::encdec::ArchConfig;
use niles_model::train::{Precision, TrainConfig};
use niles_solver::dataset::DatasetConfig;
use niles_solver::stepper::SolverConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Rollout length for evaluation runs.
    pub rollout_steps: usize,
    /// Uniform-grid resolution for spectra.
    pub spectrum_resolution: usize,
    /// Take every n-th rollout snapshot into the time-averaged spectrum.
    pub spectrum_every: usize,
    /// Blend weight of the implicit-LES baseline.
    pub implicit_les_alpha: f64,
}

impl EvalConfig {
    pub fn desk() -> EvalConfig {
        EvalConfig {
            rollout_steps: 1000,
            spectrum_resolution: 64,
            spectrum_every: 5,
            implicit_les_alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Coarse-solver settings used by training and evaluation.
    pub les_solver: SolverConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn desk() -> RunConfig {
        let mut train = TrainConfig::desk(niles_model::closure::ClosureMode::Niles);
        train.sde = SdeRunConfig::default();
        RunConfig {
            dataset: DatasetConfig::desk(),
            les_solver: SolverConfig::desk_les(),
            arch: ArchConfig::desk(),
            train,
            eval: EvalConfig::desk(),
        }
    }

    pub fn paper() -> RunConfig {
        RunConfig {
            dataset: DatasetConfig::paper(),
            les_solver: SolverConfig {
                viscosity: 5e-5,
                dt: 1e-3,
                cg_tol: 1e-8,
                cg_max_iters: 2000,
                forcing: Some(Default::default()),
                dealias: false,
                pressure_extrap_order: 2,
                cfl_limit: 0.5,
            },
            arch: ArchConfig::paper(),
            train: TrainConfig {
                precision: Precision::F32,
                ..TrainConfig::desk(niles_model::closure::ClosureMode::Niles)
            },
            eval: EvalConfig {
                rollout_steps: 1000,
                spectrum_resolution: 240,
                spectrum_every: 5,
                implicit_les_alpha: 0.05,
            },
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.les_solver.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        // architecture must match the coarse mesh
        let cm = &self.dataset.coarse_mesh;
        anyhow::ensure!(
            self.arch.grid == (cm.elements_x, cm.elements_y),
            "arch grid {:?} does not match coarse mesh {}x{}",
            self.arch.grid,
            cm.elements_x,
            cm.elements_y
        );
        let nv = (cm.order + 1) * (cm.order + 1);
        anyhow::ensure!(
            self.arch.input_dim == 2 * nv,
            "arch input_dim {} != 2 (P+1)^2 = {}",
            self.arch.input_dim,
            2 * nv
        );
        anyhow::ensure!(
            (self.les_solver.dt / self.dataset.coarse_dt() - 1.0).abs() < 1e-12,
            "les solver dt {} must equal dataset coarse spacing {}",
            self.les_solver.dt,
            self.dataset.coarse_dt()
        );
        anyhow::ensure!(self.eval.spectrum_every > 0, "spectrum_every must be positive");
        Ok(())
    }

    pub fn hash(&self) -> String {
        niles_solver::io::sha256_hex(serde_json::to_string(self).expect("serialize").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_paper_presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value =
            serde_json::to_value(RunConfig::desk()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("mystery".into(), serde_json::json!(1));
        let parsed: Result<RunConfig, _> = serde_json::from_value(v);
        assert!(parsed.is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::desk();
        let mut b = RunConfig::desk();
        assert_eq!(a.hash(), b.hash());
        b.train.base_lr *= 2.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn roundtrip_through_json() {
        let a = RunConfig::desk();
        let text = serde_json::to_string_pretty(&a).unwrap();
        let b: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(a, b);
    }
}
