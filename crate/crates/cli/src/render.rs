//! Sample rendering for documentation: PNG dumps of stacked-digit canvases,
//! optionally with an occlusion box applied.

use crate::config::{eval_set_seed, salted_seed, RunConfig};
use crate::data::{ensure_corpus, load_pools};
use crate::HarnessError;
use nfm_core::dataset::{generate_for_count, occlude};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

fn write_png(path: &Path, pixels: &[f32], side: usize) -> Result<(), HarnessError> {
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(side as u32, side as u32, bytes)
        .ok_or_else(|| HarnessError::Image("buffer does not fill the canvas".into()))?;
    img.save(path).map_err(|e| HarnessError::Image(e.to_string()))
}

/// Dump `per_count` rendered samples for every eval count into `out`,
/// named `count{c}_sample{i}.png` (plus `_occluded` variants when asked).
/// Returns the written paths.
pub fn run_render(
    cfg: &RunConfig,
    out: &Path,
    per_count: usize,
    with_occlusion: bool,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out)?;
    let data_dir = Path::new(&cfg.data_dir);
    ensure_corpus(data_dir)?;
    let (_, pool) = load_pools(data_dir)?;
    let stacked = cfg.stacked_config();
    let mut written = Vec::new();
    for &count in &cfg.eval_counts {
        let samples = generate_for_count(&pool, count, per_count, &stacked, eval_set_seed(count))?;
        let mut occl_rng =
            ChaCha8Rng::seed_from_u64(salted_seed(count as u64, "render-occlusion"));
        for (i, sample) in samples.iter().enumerate() {
            let path = out.join(format!("count{count}_sample{i}.png"));
            write_png(&path, &sample.image, cfg.canvas_size)?;
            written.push(path);
            if with_occlusion {
                let mut occluded = sample.image.clone();
                occlude(
                    &mut occluded,
                    cfg.canvas_size,
                    cfg.occlusion_box,
                    &mut occl_rng,
                )?;
                let path = out.join(format!("count{count}_sample{i}_occluded.png"));
                write_png(&path, &occluded, cfg.canvas_size)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
