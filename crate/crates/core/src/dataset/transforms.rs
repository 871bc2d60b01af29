//! Input-space augmentations and the set-prediction accuracy metric.

use crate::tensor::Element;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::DataError;

/// Zero out one `box_size x box_size` axis-aligned square at a uniform random
/// position fully inside the `canvas x canvas` image (row-major, one channel).
pub fn occlude<R: Rng>(
    image: &mut [f32],
    canvas: usize,
    box_size: usize,
    rng: &mut R,
) -> Result<(), DataError> {
    if image.len() != canvas * canvas {
        return Err(DataError::BadConfig(format!(
            "image has {} pixels, canvas {canvas} needs {}",
            image.len(),
            canvas * canvas
        )));
    }
    if box_size == 0 || box_size > canvas {
        return Err(DataError::BadConfig(format!(
            "occlusion box {box_size} must fit the {canvas} canvas"
        )));
    }
    let ox = rng.gen_range(0..=canvas - box_size);
    let oy = rng.gen_range(0..=canvas - box_size);
    for y in oy..oy + box_size {
        image[y * canvas + ox..y * canvas + ox + box_size].fill(0.0);
    }
    Ok(())
}

/// Convex combination of two equal-length batches with a fixed coefficient:
/// `out = lambda * a + (1 - lambda) * b`, applied to images and targets alike.
pub fn mixup_with_lambda(
    images_a: &[f32],
    targets_a: &[f32],
    images_b: &[f32],
    targets_b: &[f32],
    lambda: f32,
) -> Result<(Vec<f32>, Vec<f32>), DataError> {
    if images_a.len() != images_b.len() || targets_a.len() != targets_b.len() {
        return Err(DataError::BadConfig(
            "mixup requires equal-shaped pairs".into(),
        ));
    }
    let mix = |a: &[f32], b: &[f32]| -> Vec<f32> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| lambda * x + (1.0 - lambda) * y)
            .collect()
    };
    Ok((mix(images_a, images_b), mix(targets_a, targets_b)))
}

/// Mixup with `lambda ~ Beta(alpha, alpha)` drawn once per call. Returns the
/// mixed images, mixed targets, and the drawn coefficient.
pub fn mixup_batch<R: Rng>(
    images_a: &[f32],
    targets_a: &[f32],
    images_b: &[f32],
    targets_b: &[f32],
    alpha: f32,
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<f32>, f32), DataError> {
    if !(alpha > 0.0) {
        return Err(DataError::BadConfig(format!(
            "mixup alpha must be positive, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha as f64, alpha as f64)
        .map_err(|e| DataError::BadConfig(format!("bad mixup distribution: {e}")))?;
    let lambda = beta.sample(rng) as f32;
    let (images, targets) = mixup_with_lambda(images_a, targets_a, images_b, targets_b, lambda)?;
    Ok((images, targets, lambda))
}

/// Exact-match accuracy for 10-way set prediction: class `c` is predicted
/// present iff `logit_c > 0` (i.e. `sigmoid(logit_c) > 0.5`); a sample counts
/// as correct only when all 10 indicator bits match the target. Targets above
/// `0.5` count as present, so mixed (soft) targets round to their dominant
/// side. Returns the fraction correct.
pub fn exact_match_accuracy<E: Element>(logits: &[E], targets: &[E], classes: usize) -> f64 {
    assert_eq!(logits.len(), targets.len());
    assert!(classes > 0 && logits.len() % classes == 0);
    let n = logits.len() / classes;
    if n == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    for i in 0..n {
        let row = &logits[i * classes..(i + 1) * classes];
        let want = &targets[i * classes..(i + 1) * classes];
        let all = row.iter().zip(want).all(|(&l, &t)| {
            let predicted = Element::to_f64(l) > 0.0;
            let actual = Element::to_f64(t) > 0.5;
            predicted == actual
        });
        if all {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn occlusion_zeroes_exactly_one_box() {
        let canvas = 16;
        let mut image = vec![1.0f32; canvas * canvas];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        occlude(&mut image, canvas, 5, &mut rng).unwrap();
        let zeros: Vec<usize> = image
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(zeros.len(), 25);
        // The zeroed pixels form an axis-aligned 5x5 square.
        let min_x = zeros.iter().map(|i| i % canvas).min().unwrap();
        let min_y = zeros.iter().map(|i| i / canvas).min().unwrap();
        for dy in 0..5 {
            for dx in 0..5 {
                assert_eq!(image[(min_y + dy) * canvas + (min_x + dx)], 0.0);
            }
        }
    }

    #[test]
    fn occlusion_box_always_fits_inside_the_canvas() {
        let canvas = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mut image = vec![1.0f32; canvas * canvas];
            occlude(&mut image, canvas, 3, &mut rng).unwrap();
            assert_eq!(image.iter().filter(|&&v| v == 0.0).count(), 9);
        }
        // A box the full canvas size is legal and blanks everything.
        let mut image = vec![1.0f32; canvas * canvas];
        occlude(&mut image, canvas, canvas, &mut rng).unwrap();
        assert!(image.iter().all(|&v| v == 0.0));
        // Oversized boxes and mismatched buffers are rejected.
        assert!(occlude(&mut image, canvas, canvas + 1, &mut rng).is_err());
        let mut short = vec![0.0f32; 7];
        assert!(occlude(&mut short, canvas, 2, &mut rng).is_err());
    }

    #[test]
    fn mixup_identities_hold() {
        let a = vec![1.0f32, 0.0, 0.5];
        let b = vec![0.0f32, 1.0, 0.5];
        let ta = vec![1.0f32, 0.0];
        let tb = vec![0.0f32, 1.0];
        let (ix, tx) = mixup_with_lambda(&a, &ta, &b, &tb, 1.0).unwrap();
        assert_eq!(ix, a);
        assert_eq!(tx, ta);
        let (ix, tx) = mixup_with_lambda(&a, &ta, &b, &tb, 0.0).unwrap();
        assert_eq!(ix, b);
        assert_eq!(tx, tb);
        let (ix, tx) = mixup_with_lambda(&a, &ta, &b, &tb, 0.5).unwrap();
        assert_eq!(ix, vec![0.5, 0.5, 0.5]);
        assert_eq!(tx, vec![0.5, 0.5]);
    }

    #[test]
    fn mixup_batch_draws_lambda_in_unit_interval() {
        let a = vec![1.0f32; 8];
        let b = vec![0.0f32; 8];
        let ta = vec![1.0f32; 2];
        let tb = vec![0.0f32; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let (images, targets, lambda) =
                mixup_batch(&a, &ta, &b, &tb, 0.2, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&lambda));
            assert!(images.iter().all(|&v| (v - lambda).abs() < 1e-6));
            assert!(targets.iter().all(|&v| (v - lambda).abs() < 1e-6));
        }
        assert!(mixup_batch(&a, &ta, &b, &tb, 0.0, &mut rng).is_err());
        assert!(mixup_with_lambda(&a, &ta, &b[..4], &tb, 0.5).is_err());
    }

    #[test]
    fn exact_match_requires_every_bit() {
        // Two samples, 10 classes. Sample 0: perfect. Sample 1: one bit off.
        let mut logits = vec![-5.0f32; 20];
        let mut targets = vec![0.0f32; 20];
        logits[3] = 5.0;
        targets[3] = 1.0;
        logits[10 + 7] = 5.0; // predicted present...
        targets[10 + 7] = 0.0; // ...but absent in the target
        assert_eq!(exact_match_accuracy(&logits, &targets, 10), 0.5);

        // Huge logits saturate sigmoid but the decision rule is sign-based.
        let logits = vec![1e30f32, -1e30];
        let targets = vec![1.0f32, 0.0];
        assert_eq!(exact_match_accuracy(&logits, &targets, 2), 1.0);

        // Boundary: logit exactly 0 decodes as absent.
        let logits = vec![0.0f64, -1.0];
        let targets = vec![1.0f64, 0.0];
        assert_eq!(exact_match_accuracy(&logits, &targets, 2), 0.0);
    }

    #[test]
    fn soft_targets_round_to_their_dominant_side() {
        let logits = vec![4.0f32, -4.0];
        let targets = vec![0.8f32, 0.2];
        assert_eq!(exact_match_accuracy(&logits, &targets, 2), 1.0);
        let targets = vec![0.4f32, 0.2];
        assert_eq!(exact_match_accuracy(&logits, &targets, 2), 0.0);
    }
}
