//! Data directory management and batch assembly.

use crate::HarnessError;
use nfm_core::dataset::{load_idx, write_synth_corpus, DigitPool, Sample};
use std::path::{Path, PathBuf};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Sizes of the corpus written when the data directory is empty.
pub const DEFAULT_TRAIN_DIGITS: usize = 12_000;
pub const DEFAULT_TEST_DIGITS: usize = 4_000;
const CORPUS_SEED: u64 = 1_234;

fn find(dir: &Path, stem: &str) -> Option<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let path = dir.join(name);
        if path.is_file() {
            return Some(path);
        }
    }
    None
}

/// Make sure the four standard digit files exist under `dir`, writing a
/// deterministic synthetic corpus if any is missing. Returns true when the
/// corpus was (re)generated.
pub fn ensure_corpus(dir: &Path) -> Result<bool, HarnessError> {
    ensure_corpus_sized(dir, DEFAULT_TRAIN_DIGITS, DEFAULT_TEST_DIGITS)
}

pub fn ensure_corpus_sized(dir: &Path, train: usize, test: usize) -> Result<bool, HarnessError> {
    let complete = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
        .iter()
        .all(|stem| find(dir, stem).is_some());
    if complete {
        return Ok(false);
    }
    std::fs::create_dir_all(dir)?;
    write_synth_corpus(dir, train, test, CORPUS_SEED)?;
    Ok(true)
}

/// Load the training-split and test-split digit pools. Pools never cross
/// splits, so stacked samples for evaluation contain no training digit.
pub fn load_pools(dir: &Path) -> Result<(DigitPool, DigitPool), HarnessError> {
    let mut pools = Vec::with_capacity(2);
    for (images, labels) in [(TRAIN_IMAGES, TRAIN_LABELS), (TEST_IMAGES, TEST_LABELS)] {
        let images_path = find(dir, images).ok_or_else(|| {
            HarnessError::BadConfig(format!("{} not found under {}", images, dir.display()))
        })?;
        let labels_path = find(dir, labels).ok_or_else(|| {
            HarnessError::BadConfig(format!("{} not found under {}", labels, dir.display()))
        })?;
        let images = load_idx(&images_path)?;
        let labels = load_idx(&labels_path)?;
        pools.push(DigitPool::from_idx(&images, &labels)?);
    }
    let eval = pools.pop().expect("two pools");
    let train = pools.pop().expect("two pools");
    Ok((train, eval))
}

/// Flatten a slice of samples into network-ready buffers: images as
/// `[n, 1, side, side]` row-major and targets as `[n, 10]`.
pub fn assemble(samples: &[&Sample]) -> (Vec<f32>, Vec<f32>) {
    let mut images = Vec::with_capacity(samples.iter().map(|s| s.image.len()).sum());
    let mut targets = Vec::with_capacity(samples.len() * 10);
    for sample in samples {
        images.extend_from_slice(&sample.image);
        targets.extend_from_slice(&sample.target);
    }
    (images, targets)
}
