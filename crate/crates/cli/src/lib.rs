//! Experiment harness for the stacked-digit benchmark: run configuration,
//! data preparation, the training loop, evaluation with ablation flags,
//! grid sweeps, metrics emission, and sample rendering.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod gradcheck;
pub mod metrics;
pub mod render;
pub mod sweep;
pub mod train;

pub use config::{Preset, RunConfig};
pub use evaluate::{run_eval, EvalFlags, EvalRow};
pub use metrics::MetricsRecord;
pub use sweep::{run_sweep, SweepGrid};
pub use train::{run_train, TrainOutcome};

use nfm_core::{DataError, NetworkError, TensorError};
use thiserror::Error;

/// Tune the process allocator for training's allocation pattern: batches
/// materialize multi-gigabyte tensor graphs that are freed wholesale, so
/// pages must stay committed and pooled instead of bouncing back to the
/// kernel every step. mimalloc parses its `MIMALLOC_*` environment variables
/// during the first allocation, which on Linux happens before `main`, so the
/// overrides are written straight into its option table instead. Explicit
/// environment settings still win: an option is only touched when its
/// variable is absent.
pub fn tune_allocator() {
    use libmimalloc_sys::{mi_option_set, mi_option_t};
    // Option ids from the allocator's option enum; both C sources bundled
    // with libmimalloc-sys 0.1.49 (v2 and v3) place these at the same slots.
    const MI_OPTION_ARENA_EAGER_COMMIT: mi_option_t = 4;
    const MI_OPTION_PURGE_DELAY: mi_option_t = 15;
    for (env_key, option, value) in [
        ("MIMALLOC_ARENA_EAGER_COMMIT", MI_OPTION_ARENA_EAGER_COMMIT, 1),
        ("MIMALLOC_PURGE_DELAY", MI_OPTION_PURGE_DELAY, 10_000),
    ] {
        if std::env::var_os(env_key).is_none() {
            unsafe { mi_option_set(option, value) };
        }
    }
}

/// Errors surfaced by harness entry points.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid run configuration: {0}")]
    BadConfig(String),
    #[error("training diverged at epoch {epoch}: {what}; last-good checkpoint kept at {kept}")]
    Diverged {
        epoch: usize,
        what: String,
        kept: String,
    },
    #[error("image encoding failed: {0}")]
    Image(String),
}
