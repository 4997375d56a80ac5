//! Dense `f64` tensors, reverse-mode autodiff, recurrent and attention
//! layers, and Adam. Everything learned in the crate is built from these.

mod adam;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    constant_matrix, gat_forward, gru_step, masked_group_mean, GatOutput, GatParams, GruParams,
    Linear, Mlp,
};
pub use params::{Checkpoint, ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("tensors support at most two extents, got rank {0}")]
    Rank(usize),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward needs a scalar root, got {0}x{1}")]
    NonScalarRoot(usize, usize),
    #[error("graph was built without gradient recording")]
    NotRecording,
    #[error("non-finite gradient reached node {0} during backward")]
    NanInBackward(usize),
    #[error("non-finite gradient for parameter {0}")]
    NanGradient(String),
    #[error("gradient refers to a parameter from another store")]
    ForeignParam,
    #[error("dropout rate must lie in [0, 1), got {0}")]
    DropoutRate(f64),
    #[error("graph attention needs at least one present node")]
    EmptyGraph,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
}
