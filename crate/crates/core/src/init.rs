//! Weight initialization.

use crate::tensor::Element;
use rand::Rng;

/// Fan-in-scaled uniform draw: every value uniform in
/// `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
///
/// Draws are made in f64 and converted, so a given seed produces the same
/// parameter stream (up to rounding) in both precisions.
pub fn fan_in_uniform<E: Element, R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<E> {
    assert!(fan_in > 0, "fan-in must be positive");
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}
