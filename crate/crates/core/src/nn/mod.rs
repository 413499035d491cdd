//! Noise-prediction network with a hand-written backward pass.

mod checkpoint;
mod masks;
mod model;
mod real;

use std::io;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, CHECKPOINT_VERSION};
pub use masks::{build_masks, token_index, AttentionMasks, Stage};
pub use model::{Denoiser, DenoiserConfig, ForwardOptions, NoisedSample, TensorInfo};
pub use real::{matmul, matmul_nt, matmul_tn, Real};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error("unknown category index {0}")]
    UnknownCategory(usize),
    #[error("parameter count mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}
