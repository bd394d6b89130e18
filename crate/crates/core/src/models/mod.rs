//! The four networks of the U-shaped split: client head, transformer body,
//! projection network and client tail.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, SkipReducer};
pub use forward::{
    block_forward, body_full_cls_forward, body_prefix_forward, body_tensor_count, head_forward,
    projection_forward, tail_forward, BlockVars, BodyBinding, BodyVars, HeadVars, ProjectionVars, TailVars,
};
pub use params::{
    bind_all, collect_grads, init_block, init_body, init_head, init_params, init_projection, init_tail, mean,
    weighted_mean, BlockParams, BodyParams, HeadParams, ModelParams, ParamGroup, ProjectionParams, TailParams,
    BLOCK_TENSORS,
};

use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Validation(String),
}

#[cfg(test)]
mod tests;
