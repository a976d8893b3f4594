//! Minimal dense-tensor core: values, a recorded differentiable graph, and
//! the Adam optimizer.

mod adam;
mod gemm;
mod graph;
pub mod rng;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use graph::{
    concat, elu_plus_one_scalar, elu_scalar, sigmoid_scalar, split, Gradients, Graph, NodeId, BCE_CLAMP,
};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NdError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl NdError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }

    pub(crate) fn invalid(detail: String) -> Self {
        Self::Invalid(detail)
    }
}
