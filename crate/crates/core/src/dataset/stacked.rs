//! The stacked multi-digit benchmark: `count` digits are drawn from a pool
//! with replacement, nearest-neighbor-resampled to a small patch, pasted at
//! uniform random positions on a square canvas (overlaps composited by
//! elementwise max), and labeled with the 10-way class-set indicator.

use super::idx::IDXArray;
use super::DataError;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Geometry and count structure of the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedConfig {
    pub canvas_size: usize,
    pub digit_size: usize,
    /// Digit counts mixed into the training stream.
    pub train_counts: Vec<usize>,
    /// Digit counts evaluated separately.
    pub eval_counts: Vec<usize>,
}

impl Default for StackedConfig {
    fn default() -> Self {
        StackedConfig {
            canvas_size: 64,
            digit_size: 16,
            train_counts: vec![1, 3],
            eval_counts: vec![1, 2, 3, 4, 5],
        }
    }
}

impl StackedConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.digit_size == 0 || self.digit_size > self.canvas_size {
            return Err(DataError::BadConfig(format!(
                "digit size {} must fit the {} canvas",
                self.digit_size, self.canvas_size
            )));
        }
        if self.train_counts.is_empty()
            || self.eval_counts.is_empty()
            || self.train_counts.iter().chain(&self.eval_counts).any(|&c| c == 0)
        {
            return Err(DataError::BadConfig("digit counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Source digits: `side x side` byte images with 0..=9 labels.
#[derive(Clone, Debug)]
pub struct DigitPool {
    pub side: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl DigitPool {
    pub fn from_idx(images: &IDXArray, labels: &IDXArray) -> Result<Self, DataError> {
        let (n, rows, cols, data) = images.images()?;
        let labels = labels.labels()?;
        if n != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if n == 0 {
            return Err(DataError::EmptyPool);
        }
        if rows != cols {
            return Err(DataError::BadConfig(format!(
                "digits must be square, got {rows}x{cols}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(DataError::BadLabel { value: bad });
        }
        Ok(DigitPool {
            side: rows,
            images: data.to_vec(),
            labels: labels.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image(&self, index: usize) -> &[u8] {
        let px = self.side * self.side;
        &self.images[index * px..(index + 1) * px]
    }
}

/// One rendered canvas with its multi-label target.
#[derive(Clone, Debug, Serialize)]
pub struct Sample {
    /// `canvas_size x canvas_size`, row-major, values in `[0,1]`.
    pub image: Vec<f32>,
    /// 10-way class-set indicator.
    pub target: [f32; 10],
    pub count: usize,
    /// The drawn classes, duplicates preserved.
    pub classes: Vec<u8>,
}

/// Set-semantics target: bit `c` is 1 iff class `c` appears at least once.
pub fn class_set_target(classes: &[u8]) -> [f32; 10] {
    let mut target = [0.0; 10];
    for &c in classes {
        target[c as usize] = 1.0;
    }
    target
}

/// Nearest-neighbor resample of a square byte image (`src_side`) to
/// `dst_side`: output pixel `(y, x)` reads source pixel
/// `(floor(y*src/dst), floor(x*src/dst))`.
pub fn nearest_resample_u8(src: &[u8], src_side: usize, dst_side: usize) -> Vec<u8> {
    let mut out = vec![0u8; dst_side * dst_side];
    for y in 0..dst_side {
        let sy = y * src_side / dst_side;
        for x in 0..dst_side {
            let sx = x * src_side / dst_side;
            out[y * dst_side + x] = src[sy * src_side + sx];
        }
    }
    out
}

/// Render one sample: per digit the rng yields, in order, the pool index,
/// the x offset, and the y offset.
pub fn render_stacked<R: Rng>(
    pool: &DigitPool,
    count: usize,
    cfg: &StackedConfig,
    rng: &mut R,
) -> Result<Sample, DataError> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(DataError::EmptyPool);
    }
    if count == 0 {
        return Err(DataError::BadConfig("count must be >= 1".into()));
    }
    let canvas = cfg.canvas_size;
    let patch = cfg.digit_size;
    let mut image = vec![0.0f32; canvas * canvas];
    let mut classes = Vec::with_capacity(count);
    for _ in 0..count {
        let index = rng.gen_range(0..pool.len());
        let ox = rng.gen_range(0..=canvas - patch);
        let oy = rng.gen_range(0..=canvas - patch);
        classes.push(pool.labels[index]);
        let small = nearest_resample_u8(pool.image(index), pool.side, patch);
        for y in 0..patch {
            for x in 0..patch {
                let v = small[y * patch + x] as f32 / 255.0;
                let slot = &mut image[(oy + y) * canvas + (ox + x)];
                *slot = slot.max(v);
            }
        }
    }
    let target = class_set_target(&classes);
    Ok(Sample {
        image,
        target,
        count,
        classes,
    })
}

/// A training stream: each sample first draws its digit count uniformly from
/// `counts`, then renders. Pure function of `(pool, cfg, seed)`.
pub fn generate_mixed(
    pool: &DigitPool,
    counts: &[usize],
    n: usize,
    cfg: &StackedConfig,
    seed: u64,
) -> Result<Vec<Sample>, DataError> {
    if counts.is_empty() {
        return Err(DataError::BadConfig("no digit counts to mix".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let count = counts[rng.gen_range(0..counts.len())];
            render_stacked(pool, count, cfg, &mut rng)
        })
        .collect()
}

/// An evaluation set at one fixed digit count.
pub fn generate_for_count(
    pool: &DigitPool,
    count: usize,
    n: usize,
    cfg: &StackedConfig,
    seed: u64,
) -> Result<Vec<Sample>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| render_stacked(pool, count, cfg, &mut rng))
        .collect()
}
