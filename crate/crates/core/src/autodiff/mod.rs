//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation with its output value. Learnable
//! tensors live in a [`ParamStore`]; graphs copy them in as nodes and
//! [`Graph::backward`] adds their gradients back into the store. Gradients
//! accumulate until [`ParamStore::zero_grad`] or an optimizer step.

mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

use thiserror::Error;

pub use graph::{sigmoid, Graph, Var};
pub use optim::{AdamHyper, Optimizer, OptimizerKind};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("optimizer step without gradients")]
    MissingGrads,
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[cfg(test)]
mod tests;
