//! Latent-SDE closure modeling on top of the spectral-element coarse solver:
//! transformer building blocks, the multiscale encoder/decoder pair, prior
//! and variational-posterior SDEs integrated by the reversible Heun scheme
//! with path-KL accumulation, the Monte-Carlo closure tendency, and the
//! rollout-loss training loop with its deterministic-NN and implicit-LES
//! baselines.

pub mod closure;
pub mod encdec;
pub mod nn;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod sde;
pub mod train;

pub use closure::{compute_closure, ClosureMode, ClosureOutput, SdeRunConfig};
pub use encdec::ArchConfig;
pub use params::Params;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at stage `{0}`")]
    NonFinite(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("solver error: {0}")]
    Solver(#[from] niles_solver::SolverError),
    #[error("autodiff error: {0}")]
    Autodiff(#[from] niles_autodiff::AdError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;
