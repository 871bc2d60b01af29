//! Digit ingestion and the stacked multi-digit benchmark generator, plus
//! occlusion and mixup transforms and the exact-match metric.

use thiserror::Error;

pub mod glyphs;
pub mod idx;
pub mod stacked;
pub mod transforms;

pub use glyphs::{render_glyph, write_synth_corpus};
pub use idx::{load_idx, save_idx, IDXArray};
pub use stacked::{
    class_set_target, generate_for_count, generate_mixed, render_stacked, DigitPool, Sample,
    StackedConfig,
};
pub use transforms::{exact_match_accuracy, mixup_batch, mixup_with_lambda, occlude};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an IDX file: magic bytes {found:#010x}")]
    BadMagic { found: u32 },
    #[error("IDX element type {dtype:#04x} is not unsigned byte")]
    UnsupportedType { dtype: u8 },
    #[error("IDX payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("IDX rank {got} where {expected} was required")]
    RankMismatch { expected: usize, got: usize },
    #[error("digit pool is empty")]
    EmptyPool,
    #[error("label {value} is outside 0..=9")]
    BadLabel { value: u8 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}
