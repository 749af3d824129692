//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation evaluates eagerly and records how it was produced, so a
//! scalar result can be differentiated by walking the recorded graph in
//! reverse topological order. Iterative linear solves and SDE integrations
//! plug in through [`CustomOp`], which lets the owning code supply a
//! hand-derived vector-Jacobian product (e.g. a transposed CG solve) instead
//! of unrolling the iteration.
//!
//! Model parameters may be tagged [`DType::F32`]: storage stays `f64` but the
//! value of every produced tensor is rounded onto the `f32` grid, emulating
//! single-precision model arithmetic while the physics stays in full
//! precision. Gradient checks run everything in [`DType::F64`].

mod backward;
mod check;
mod custom;
mod dtype;
mod tensor;

pub use backward::{backward, GradStore};
pub use check::{check_grad, check_grad_directional, grad_of};
pub use custom::CustomOp;
pub use dtype::DType;
pub use tensor::{is_grad_enabled, no_grad, with_grad, Op, Tensor, TensorId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("backward root must be a scalar tensor, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value detected in {0}")]
    NonFinite(String),
    #[error("custom op `{op}` failed in backward pass: {msg}")]
    CustomBackward { op: String, msg: String },
}

pub type Result<T> = std::result::Result<T, AdError>;
