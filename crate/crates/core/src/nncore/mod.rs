//! Dense-matrix differentiation core and the layer zoo used by the models.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

use thiserror::Error;

pub use graph::{Gradients, Graph, Matrix, SeqBatch, Var};
pub use params::{Param, ParamSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("backward needs a scalar root, got {0}x{1}")]
    NonScalarRoot(usize, usize),
    #[error("graph was already consumed by a backward pass")]
    GraphConsumed,
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid target: {0}")]
    Target(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}
