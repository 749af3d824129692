//! Spectral-element incompressible Navier-Stokes on the periodic unit
//! square, with the surrounding machinery for coarse-graining experiments:
//! per-element modal filters, cross-mesh restriction, turbulence metrics,
//! and a manifest-driven filtered-snapshot dataset pipeline.
//!
//! Velocity lives on order-P Gauss-Lobatto-Legendre nodes, pressure on
//! order P-2 Gauss points. Time integration is BDF3 with third-order
//! extrapolation of the advection term and an incremental pressure
//! correction; all linear systems are solved by matrix-free conjugate
//! gradients. The stepping path is written against tensors from
//! `niles-autodiff`, so a coarse step can be differentiated end to end
//! (CG solves contribute transposed solves, everything else its exact
//! adjoint), while plain simulation runs with recording disabled and pays
//! no graph cost.

pub mod basis;
pub mod cg;
pub mod dataset;
pub mod field;
pub mod filter;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod ops;
pub mod physops;
pub mod seeds;
pub mod stepper;

pub use basis::{diff_matrix, gl_basis, gll_basis, Basis1D};
pub use field::FlowField;
pub use mesh::{GatherMode, MeshSpec, SpectralMesh};
pub use ops::MeshOps;
pub use stepper::{SolverConfig, StepHistory};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("cg breakdown at iteration {iteration}: curvature {curvature}")]
    CgBreakdown { iteration: usize, curvature: f64 },
    #[error("cg did not converge after {iterations} iterations (residual {residual:.3e}) in {context}")]
    CgNoConvergence {
        iterations: usize,
        residual: f64,
        context: String,
    },
    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<SolverError>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("dataset integrity: {0}")]
    Integrity(String),
    #[error("autodiff error: {0}")]
    Autodiff(#[from] niles_autodiff::AdError),
}

pub type SolverResult<T> = std::result::Result<T, SolverError>;
