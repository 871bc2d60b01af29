//! Multi-pass networks: backbone description, block scheduling over the
//! layer memory, parameter accounting, and checkpointing.

use crate::attention::NfmError;
use crate::tensor::TensorError;
use thiserror::Error;

pub mod backbone;
pub mod checkpoint;
pub mod model;

pub use backbone::{BackboneParams, BackboneSpec, ConvParams, ConvSpec, HeadParams};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{attention_block_formula, ForwardTrace, ModelKind, NFMNetwork, ParamCounts};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] NfmError),
    #[error("invalid network description: {0}")]
    BadSpec(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint blob does not match its manifest checksum")]
    ChecksumMismatch,
    #[error("checkpoint truncated: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint tensor set does not match the network at {name}")]
    TensorMismatch { name: String },
}
