//! Differentiable tensor operations, losses, and the optimizer the networks
//! are built from. Training runs in f32; gradient checks instantiate the same
//! generic kernels in f64.

mod check;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use check::{finite_diff_check, FiniteDiffReport};
pub use graph::{BnMode, Graph, NodeId};
pub use kernels::{conv2d_out_dim, conv_transpose2d_out_dim};
pub use optim::{apply_lookahead, remove_lookahead, sgd_nesterov_step, zero_grads, Parameter};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("degenerate batch in batch_norm2d train mode: {elements} element(s) per channel, need at least 2")]
    DegenerateBatch { elements: usize },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-finite gradient in parameter '{name}' at element {index}")]
    NonFiniteGradient { name: String, index: usize },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
}

pub type Result<T> = std::result::Result<T, DiffError>;
