//! The sparse cross-layer attention block and its supporting pieces.
//!
//! A block sits in front of a backbone stage and lets it read from every
//! block output computed so far (across all passes): the stored maps are
//! rescaled to the block's spatial size, tokenized, and attended over with
//! top-k sparse multi-head attention plus an always-present zero slot; the
//! result enters the hidden state through a zero-initialized scalar gate.

mod block;
mod memory;
mod tokens;
mod topk;

pub use block::{
    attend_heads, nfm_block_forward, AttentionBlock, AttentionBlockNodes, AttentionRecord,
};
pub use memory::{LayerMemory, MemoryEntry};
pub use tokens::{build_token_set, TokenGroup, TokenSet};
pub use topk::topk_softmax;

use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How a stored map larger than the attention target is brought to scale.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    /// Rearrange each r x r window into r^2 separate tokens (lossless).
    SpaceToDepth,
    /// Keep one representative pixel per window (lossy ablation mode).
    Nearest,
}

/// Divisor applied to attention dot products.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitScale {
    /// Standard transformer scaling by sqrt(d_k).
    SqrtDk,
    /// Literal scaling by d_k.
    Dk,
}

/// Where attention logits come from.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Query-key dot products.
    Learned,
    /// I.i.d. standard-normal logits drawn fresh every forward; everything
    /// downstream (top-k, normalization, mixing) is unchanged.
    RandomGaussian,
}

/// Configuration of the attention machinery and pass schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NFMConfig {
    pub num_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub top_k: usize,
    pub num_passes: usize,
    pub gamma_init: f64,
    pub use_batchnorm: bool,
    pub rescale_mode: RescaleMode,
    pub logit_scale: LogitScale,
    pub share_backbone_across_passes: bool,
    pub attention_mode: AttentionMode,
    /// Offer the block's own incoming hidden state as an extra key/value
    /// token (it is always the query). Off by default.
    pub include_current_state: bool,
}

impl NFMConfig {
    /// The stacked-digit reference configuration: two passes, four heads,
    /// 16-dimensional keys and values, top-5 attention, zero-initialized
    /// gates, no batchnorm, space-to-depth rescaling, shared backbone.
    pub fn reference() -> Self {
        NFMConfig {
            num_heads: 4,
            key_dim: 16,
            value_dim: 16,
            top_k: 5,
            num_passes: 2,
            gamma_init: 0.0,
            use_batchnorm: false,
            rescale_mode: RescaleMode::SpaceToDepth,
            logit_scale: LogitScale::SqrtDk,
            share_backbone_across_passes: true,
            attention_mode: AttentionMode::Learned,
            include_current_state: false,
        }
    }

    pub fn validate(&self) -> Result<(), NfmError> {
        for (name, v) in [
            ("num_heads", self.num_heads),
            ("key_dim", self.key_dim),
            ("value_dim", self.value_dim),
            ("top_k", self.top_k),
            ("num_passes", self.num_passes),
        ] {
            if v < 1 {
                return Err(NfmError::BadConfig {
                    field: name,
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// The logit divisor implied by `logit_scale`.
    pub fn scale_value(&self) -> f64 {
        match self.logit_scale {
            LogitScale::SqrtDk => (self.key_dim as f64).sqrt(),
            LogitScale::Dk => self.key_dim as f64,
        }
    }
}

/// Errors from attention assembly and evaluation.
#[derive(Debug, Error)]
pub enum NfmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config field {field} must be >= 1, got {value}")]
    BadConfig { field: &'static str, value: usize },
    #[error(
        "memory entry {entry} (pass {pass}, block {block}): size {size} vs target {target} \
         is not a power-of-two ratio"
    )]
    BadRescaleRatio {
        entry: usize,
        pass: usize,
        block: usize,
        size: usize,
        target: usize,
    },
    #[error("memory entry (pass {pass}, block {block}) must be square, got {height}x{width}")]
    NonSquareEntry {
        pass: usize,
        block: usize,
        height: usize,
        width: usize,
    },
    #[error(
        "memory entries out of order: (pass {pass}, block {block}) appended after \
         (pass {prev_pass}, block {prev_block})"
    )]
    OutOfOrderEntry {
        pass: usize,
        block: usize,
        prev_pass: usize,
        prev_block: usize,
    },
    #[error("block '{name}': token set has {got} sources but {registered} are registered")]
    UnregisteredSource {
        name: String,
        got: usize,
        registered: usize,
    },
    #[error("block '{name}': source {index} has {got} channels, projection expects {expected}")]
    SourceChannelMismatch {
        name: String,
        index: usize,
        got: usize,
        expected: usize,
    },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_is_valid() {
        NFMConfig::reference().validate().unwrap();
    }

    #[test]
    fn zero_fields_are_rejected() {
        let mut cfg = NFMConfig::reference();
        cfg.top_k = 0;
        assert!(matches!(
            cfg.validate(),
            Err(NfmError::BadConfig { field: "top_k", .. })
        ));
    }

    #[test]
    fn scale_value_follows_the_mode() {
        let mut cfg = NFMConfig::reference();
        assert!((cfg.scale_value() - 4.0).abs() < 1e-12);
        cfg.logit_scale = LogitScale::Dk;
        assert!((cfg.scale_value() - 16.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = NFMConfig::reference();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"space_to_depth\""));
        let back: NFMConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.num_heads, cfg.num_heads);
        assert_eq!(back.rescale_mode, cfg.rescale_mode);
    }
}
