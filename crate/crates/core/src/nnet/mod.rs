//! Encoder-decoder segmentation networks with plain, residual and dense
//! blocks, optional nested (U-Net++) skip topology, exact backpropagation
//! and a binary checkpoint format.

mod checkpoint;
pub mod gradcheck;
pub mod layers;
mod model;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{layer_apply, layer_grad, LayerKind};
pub use model::{predict_mask, BlockKind, Model, ModelConfig, Parameters, StepOutput, PROB_EPSILON};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch in {layer}: expected {expected}, got {got}")]
    Shape {
        layer: String,
        expected: String,
        got: String,
    },
    #[error("non-finite values produced by {layer}")]
    NonFinite { layer: String },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint tensor `{name}` has shape {got:?}, config expects {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Option<Vec<usize>>,
        got: Option<Vec<usize>>,
    },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint config block: {0}")]
    ConfigJson(#[from] serde_json::Error),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}
