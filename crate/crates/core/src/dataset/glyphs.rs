//! Procedural digit corpus: each class is a set of stroke polylines in a
//! unit box, rasterized at 28x28 with per-glyph random affine jitter, stroke
//! width, and intensity. The generator is a pure function of its seed, and
//! its output ships in the standard IDX container, so the ingestion path is
//! exercised end to end without any external download.

use super::idx::save_idx;
use super::DataError;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const GLYPH_SIDE: usize = 28;

type Point = (f64, f64);

/// Closed circle approximated by a polyline, `(cx, cy)` center and radii.
fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64, n: usize) -> Vec<Point> {
    (0..=n)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / n as f64).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke polylines for one digit class, in a unit box with y growing down.
fn strokes(class: u8) -> Vec<Vec<Point>> {
    match class {
        0 => vec![arc(0.5, 0.5, 0.26, 0.37, 0.0, 360.0, 28)],
        1 => vec![vec![(0.36, 0.28), (0.54, 0.13), (0.54, 0.87)]],
        2 => vec![{
            let mut s = arc(0.5, 0.32, 0.23, 0.19, 175.0, 355.0, 14);
            s.extend([(0.3, 0.84), (0.76, 0.84)]);
            s
        }],
        3 => vec![
            arc(0.46, 0.31, 0.22, 0.17, 150.0, 400.0, 14),
            arc(0.46, 0.67, 0.25, 0.2, 320.0, 570.0, 14),
        ],
        4 => vec![
            vec![(0.58, 0.13), (0.26, 0.6), (0.8, 0.6)],
            vec![(0.63, 0.38), (0.63, 0.88)],
        ],
        5 => vec![{
            let mut s = vec![(0.72, 0.14), (0.32, 0.14), (0.3, 0.45)];
            s.extend(arc(0.47, 0.63, 0.24, 0.2, 250.0, 480.0, 14));
            s
        }],
        6 => vec![{
            let mut s = vec![(0.62, 0.12), (0.4, 0.4)];
            s.extend(arc(0.49, 0.64, 0.21, 0.21, 200.0, 540.0, 18));
            s
        }],
        7 => vec![vec![(0.26, 0.15), (0.75, 0.15), (0.44, 0.87)]],
        8 => vec![
            arc(0.5, 0.32, 0.19, 0.17, 90.0, 450.0, 20),
            arc(0.5, 0.68, 0.23, 0.2, 270.0, 630.0, 20),
        ],
        9 => vec![
            arc(0.52, 0.35, 0.2, 0.2, 0.0, 360.0, 20),
            vec![(0.72, 0.35), (0.66, 0.87)],
        ],
        other => unreachable!("class {other} outside 0..=9"),
    }
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Rasterize one digit with jitter drawn from `rng` (a fixed number of draws
/// per call, so the stream stays aligned): returns 28x28 bytes, row-major.
pub fn render_glyph<R: Rng>(class: u8, rng: &mut R) -> Vec<u8> {
    let shift_x: f64 = rng.gen_range(-1.8..1.8);
    let shift_y: f64 = rng.gen_range(-1.8..1.8);
    let scale: f64 = rng.gen_range(0.8..1.12);
    let rot: f64 = rng.gen_range(-0.22..0.22);
    let shear: f64 = rng.gen_range(-0.15..0.15);
    let thickness: f64 = rng.gen_range(1.1..2.1);
    let intensity: f64 = rng.gen_range(0.7..1.0);

    let side = GLYPH_SIDE as f64;
    let box_scale = 24.0 * scale;
    let (sin, cos) = rot.sin_cos();
    let to_pixels = |(x, y): Point| -> Point {
        // Center, shear, rotate, scale, then place on the canvas.
        let (cx, cy) = (x - 0.5, y - 0.5);
        let (cx, cy) = (cx + shear * cy, cy);
        let (cx, cy) = (cx * cos - cy * sin, cx * sin + cy * cos);
        (
            side / 2.0 + box_scale * cx + shift_x,
            side / 2.0 + box_scale * cy + shift_y,
        )
    };
    let segments: Vec<(Point, Point)> = strokes(class)
        .iter()
        .flat_map(|poly| {
            poly.windows(2)
                .map(|w| (to_pixels(w[0]), to_pixels(w[1])))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut out = vec![0u8; GLYPH_SIDE * GLYPH_SIDE];
    for y in 0..GLYPH_SIDE {
        for x in 0..GLYPH_SIDE {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segments
                .iter()
                .map(|&(a, b)| point_segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            // Soft-edged stroke: full ink inside, ~0.8px anti-aliased rim.
            let alpha = ((thickness - d) / 0.8 + 0.5).clamp(0.0, 1.0);
            out[y * GLYPH_SIDE + x] = (alpha * intensity * 255.0).round() as u8;
        }
    }
    out
}

/// Generate a balanced corpus: `count` glyphs with labels cycling 0..=9.
pub fn synth_corpus(count: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count * GLYPH_SIDE * GLYPH_SIDE);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = (i % 10) as u8;
        images.extend(render_glyph(class, &mut rng));
        labels.push(class);
    }
    (images, labels)
}

/// Write a train/eval digit corpus under `dir` using the conventional
/// file names. The two splits use unrelated seed streams, so no glyph is
/// shared between them.
pub fn write_synth_corpus(
    dir: impl AsRef<Path>,
    train: usize,
    test: usize,
    seed: u64,
) -> Result<(), DataError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (train_images, train_labels) = synth_corpus(train, seed.wrapping_mul(2).wrapping_add(1));
    let (test_images, test_labels) = synth_corpus(test, seed.wrapping_mul(2).wrapping_add(2));
    save_idx(
        dir.join("train-images-idx3-ubyte"),
        &[train, GLYPH_SIDE, GLYPH_SIDE],
        &train_images,
    )?;
    save_idx(dir.join("train-labels-idx1-ubyte"), &[train], &train_labels)?;
    save_idx(
        dir.join("t10k-images-idx3-ubyte"),
        &[test, GLYPH_SIDE, GLYPH_SIDE],
        &test_images,
    )?;
    save_idx(dir.join("t10k-labels-idx1-ubyte"), &[test], &test_labels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_idx;

    #[test]
    fn generation_is_a_pure_function_of_the_seed() {
        let (a_img, a_lab) = synth_corpus(40, 9);
        let (b_img, b_lab) = synth_corpus(40, 9);
        assert_eq!(a_img, b_img);
        assert_eq!(a_lab, b_lab);
        let (c_img, _) = synth_corpus(40, 10);
        assert_ne!(a_img, c_img);
    }

    #[test]
    fn labels_cycle_through_all_ten_classes() {
        let (_, labels) = synth_corpus(25, 0);
        assert_eq!(&labels[..12], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]);
    }

    #[test]
    fn every_class_leaves_substantial_ink_inside_the_canvas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for class in 0..10u8 {
            let img = render_glyph(class, &mut rng);
            let ink = img.iter().filter(|&&v| v > 128).count();
            assert!(ink > 25, "class {class} has only {ink} bright pixels");
            assert!(ink < 400, "class {class} floods the canvas with {ink}");
        }
    }

    #[test]
    fn distinct_classes_render_distinct_shapes() {
        // Same jitter draw for each class: clone the rng state.
        let base = ChaCha8Rng::seed_from_u64(4);
        let renders: Vec<Vec<u8>> = (0..10u8)
            .map(|c| render_glyph(c, &mut base.clone()))
            .collect();
        for a in 0..10 {
            for b in (a + 1)..10 {
                let differing = renders[a]
                    .iter()
                    .zip(&renders[b])
                    .filter(|(x, y)| x != y)
                    .count();
                assert!(differing > 50, "classes {a} and {b} look alike");
            }
        }
    }

    #[test]
    fn written_corpus_carries_the_standard_headers() {
        let dir = tempfile::tempdir().unwrap();
        write_synth_corpus(dir.path(), 30, 20, 7).unwrap();
        let images = load_idx(dir.path().join("train-images-idx3-ubyte")).unwrap();
        assert_eq!(images.dims, [30, 28, 28]);
        let labels = load_idx(dir.path().join("train-labels-idx1-ubyte")).unwrap();
        assert_eq!(labels.dims, [30]);
        let test_images = load_idx(dir.path().join("t10k-images-idx3-ubyte")).unwrap();
        assert_eq!(test_images.dims, [20, 28, 28]);
        // Train and eval pools come from different streams.
        assert_ne!(images.data[..784], test_images.data[..784]);
    }
}
