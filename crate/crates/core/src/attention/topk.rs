//! Public entry point for the sparse softmax kernel.

use crate::tensor::{topk_softmax_slice, Element, TensorError};

/// Top-k sparse softmax over one logit vector: the `min(k, T)` largest
/// logits (ties toward the lower index) receive softmax weights computed
/// over just that subset; every other weight is exactly zero.
pub fn topk_softmax<E: Element>(logits: &[E], k: usize) -> Result<Vec<E>, TensorError> {
    topk_softmax_slice(logits, k)
}
