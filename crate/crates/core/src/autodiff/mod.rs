//! Minimal reverse-mode automatic differentiation over dense tensors.

mod adam;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("invalid argument: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

#[cfg(test)]
mod tests;
