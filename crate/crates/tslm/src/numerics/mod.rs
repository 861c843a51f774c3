//! Minimal dense-tensor math with reverse-mode differentiation.
//!
//! Every differentiable operation lives on a [`Tape`]: a forward pass records
//! nodes (value + backward closure), `Tape::backward` replays them in reverse.
//! Tapes are rebuilt per forward pass; there are no higher-order derivatives.
//! All arithmetic is `f64`.

mod attention;
mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use attention::{causal_self_attention, multi_head_cross_attention, AttnProj};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use params::{Binder, ParamEntry, ParamSet};
pub use tape::{conv1d_patch, NodeId, Tape};
pub use tensor::Tensor;

/// Errors raised by tensor and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite gradient encountered ({context})")]
    NonFiniteGradient { context: String },
    #[error("non-finite value encountered ({context})")]
    NonFiniteValue { context: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint i/o error: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
