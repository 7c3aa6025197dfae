//! The two-branch auto-encoder + LSTM network and its losses.

mod arch;
mod forward;
pub mod loss;
mod params;

pub use arch::{row, ArchConfig, ArchPreset, ConvRow, Variant, HIDDEN_SWEEP};
pub use forward::{fuse, trace_shapes, ForwardOutputs, ForwardVars, FrameBatch, LayerTrace, Net};
pub use loss::{ccc, degenerate_ccc_count, loss_rec, loss_recon, total_loss, Ccc, LossWeights};
pub use params::{ModelParams, ParamGroup, ParamSpec};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    InputShape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("window holds {got} frames, model expects {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("{what}: lengths differ ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{what}: needs at least {min} values, got {got}")]
    TooShort { what: &'static str, min: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0} disabled in this architecture")]
    Disabled(&'static str),
    #[error("batch is missing {0}")]
    MissingModality(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
