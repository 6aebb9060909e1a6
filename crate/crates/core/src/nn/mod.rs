//! Minimal dense-tensor computation with reverse-mode gradients.
//!
//! A [`graph::Graph`] is a per-forward-pass tape: model code appends ops,
//! values are computed eagerly, and [`graph::Graph::backward`] walks the
//! tape in reverse with a fixed summation order so runs are bit-for-bit
//! reproducible. Parameters live outside the graph in a [`params::ParamStore`]
//! and are bound as shared leaves on every pass.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId, SpikingMode};
pub use params::{Binder, GradBuffer, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("d_model {d_model} is not divisible by {heads} heads")]
    IndivisibleHeads { d_model: usize, heads: usize },
    #[error("positional encoding requires an even dimension, got {0}")]
    OddDimension(usize),
    #[error("quantile {0} outside the open interval (0, 1)")]
    QuantileOutOfRange(f64),
    #[error("non-finite gradient for parameter `{0}`; step aborted")]
    NonFiniteGradient(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("checkpoint i/o: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}
