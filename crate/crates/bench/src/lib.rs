//! Shared fixtures for the criterion benchmarks: deterministic tensors and
//! pre-built networks so every run measures the same workload.

use nfm_core::{BackboneSpec, Graph, ModelKind, NFMConfig, NFMNetwork, TensorId};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic values in `[-1, 1)` for a tensor of `n` elements.
pub fn filled(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(-1.0f32, 1.0);
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

/// A fresh graph holding one non-differentiable leaf of the given shape.
pub fn graph_with_leaf(shape: &[usize], seed: u64) -> (Graph<f32>, TensorId) {
    let mut graph = Graph::new();
    let n: usize = shape.iter().product();
    let id = graph
        .leaf(filled(n, seed), shape, false)
        .expect("benchmark leaf");
    (graph, id)
}

/// An 8x8-input three-block network in the requested flavor, deterministic
/// weights. `passes` is ignored for the baseline.
pub fn small_network(kind: ModelKind, passes: usize) -> NFMNetwork<f32> {
    let mut cfg = NFMConfig::reference();
    cfg.num_heads = 2;
    cfg.key_dim = 4;
    cfg.value_dim = 4;
    cfg.top_k = 3;
    cfg.num_passes = passes;
    NFMNetwork::build(BackboneSpec::tiny(), cfg, kind, 7).expect("benchmark network")
}
