//! Self-contained reverse-mode autodiff, the time-conditioned 1-D conv
//! network used for both the flow and the denoiser, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;
mod net;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{sha256_hex, Checkpoint, CheckpointError, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use net::{
    forward_batch, forward_on_tape, net_forward, stack_windows, time_embedding, unstack_windows, ArchSpec,
    BoundParams, FinalLayerInit, VectorFieldParams,
};
pub use tape::{Gradients, NodeId, OpKind, Tape};
pub(crate) use tape::row_correlation;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {op:?} (node {node})")]
    NonFinite { op: OpKind, node: usize },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
