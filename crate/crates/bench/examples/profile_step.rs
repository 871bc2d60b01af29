//! Phase-timed training steps at desk scale, for quick profiling:
//! `cargo run -p nfm-bench --example profile_step -- [batch] [iters] [passes] [divisor]`.

use mimalloc::MiMalloc;
use nfm_bench::filled;
use nfm_core::{BackboneSpec, Graph, ModelKind, NFMConfig, NFMNetwork};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

fn main() {
    nfm_cli::tune_allocator();
    let mut args = std::env::args().skip(1);
    let batch: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(16);
    let iters: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(3);
    let passes: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);
    let divisor: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(16);

    let spec = BackboneSpec::stacked_digit(divisor);
    let mut cfg = NFMConfig::reference();
    cfg.num_passes = passes.max(1);
    let kind = if passes == 0 {
        ModelKind::Baseline
    } else {
        ModelKind::Nfm
    };
    let mut net: NFMNetwork<f32> = NFMNetwork::build(spec, cfg, kind, 7).expect("network");
    let input = filled(batch * 64 * 64, 5);
    let targets: Vec<f32> = (0..batch * 10).map(|i| ((i % 7) == 0) as u8 as f32).collect();

    let (mut t_fwd, mut t_bwd, mut t_setup) = (0.0f64, 0.0, 0.0);
    for _ in 0..iters {
        let t0 = Instant::now();
        let mut graph: Graph<f32> = Graph::new();
        let x = graph
            .leaf(input.clone(), &[batch, 1, 64, 64], false)
            .unwrap();
        let t = graph.leaf(targets.clone(), &[batch, 10], false).unwrap();
        let mut binding = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        t_setup += t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let (logits, _) = net
            .forward_multipass(&mut graph, x, true, &mut rng, false, &mut binding)
            .unwrap();
        let loss = graph.sigmoid_bce_loss(logits, t).unwrap();
        t_fwd += t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        graph.backward(loss).unwrap();
        t_bwd += t2.elapsed().as_secs_f64();
    }
    let n = iters as f64;
    println!(
        "batch {batch}, passes {passes}, divisor {divisor}: setup {:.1} ms, forward {:.1} ms, backward {:.1} ms per iter",
        1e3 * t_setup / n,
        1e3 * t_fwd / n,
        1e3 * t_bwd / n
    );
}
