//! Checkpoint evaluation: per-digit-count scoring on shared, fixed-seed
//! evaluation sets, with evaluation-time ablation flags. Never writes to the
//! checkpoint.

use crate::config::{eval_set_seed, salted_seed, RunConfig};
use crate::data::{assemble, ensure_corpus, load_pools};
use crate::HarnessError;
use nfm_core::attention::AttentionMode;
use nfm_core::dataset::{exact_match_accuracy, generate_for_count, occlude, Sample};
use nfm_core::network::load_checkpoint;
use nfm_core::{Element, Graph, ModelKind, NFMNetwork};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Evaluation-time ablations. None of these touch stored parameters.
#[derive(Clone, Debug, Default)]
pub struct EvalFlags {
    /// Replace query-key logits with fresh standard-normal draws.
    pub random_attention: bool,
    /// Zero one occlusion box per image before scoring.
    pub occlude: bool,
    /// Run a different number of passes than the checkpoint was trained
    /// with (must not exceed the trained pass count).
    pub passes_override: Option<usize>,
}

/// Scored metrics for one digit count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and exact-match accuracy of `net` over `samples`, processed in
/// batches in eval mode (running statistics are read, never updated).
pub fn score_samples<E: Element>(
    net: &mut NFMNetwork<E>,
    samples: &[Sample],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), HarnessError> {
    let side = net.spec.input_size;
    let classes = net.spec.classes;
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut n = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, targets) = assemble(&refs);
        let b = refs.len();
        let mut graph: Graph<E> = Graph::new();
        let input = graph.leaf(
            images.iter().map(|&v| E::from_f64(v as f64)).collect(),
            &[b, 1, side, side],
            false,
        )?;
        let target_id = graph.leaf(
            targets.iter().map(|&v| E::from_f64(v as f64)).collect(),
            &[b, classes],
            false,
        )?;
        let mut binding = Vec::new();
        let (logits, _) = net.forward_multipass(&mut graph, input, false, rng, false, &mut binding)?;
        let loss = graph.sigmoid_bce_loss(logits, target_id)?;
        let loss_val = Element::to_f64(graph.data(loss)[0]);
        let acc = exact_match_accuracy(graph.data(logits), graph.data(target_id), classes);
        loss_sum += loss_val * b as f64;
        acc_sum += acc * b as f64;
        n += b;
    }
    if n == 0 {
        return Err(HarnessError::BadConfig("no samples to score".into()));
    }
    Ok((loss_sum / n as f64, acc_sum / n as f64))
}

/// Apply evaluation-time ablation flags to an in-memory network, rejecting
/// combinations the checkpoint cannot honor.
pub fn apply_flags<E: Element>(
    net: &mut NFMNetwork<E>,
    flags: &EvalFlags,
) -> Result<(), HarnessError> {
    if let Some(passes) = flags.passes_override {
        if net.kind == ModelKind::Baseline {
            return Err(HarnessError::BadConfig(
                "a baseline checkpoint has no pass count to override".into(),
            ));
        }
        if passes == 0 || passes > net.cfg.num_passes {
            return Err(HarnessError::BadConfig(format!(
                "pass override {passes} outside 1..={} trained passes",
                net.cfg.num_passes
            )));
        }
        net.cfg.num_passes = passes;
    }
    if flags.random_attention {
        if net.kind == ModelKind::Baseline {
            return Err(HarnessError::BadConfig(
                "random-attention ablation needs an attention model".into(),
            ));
        }
        net.cfg.attention_mode = AttentionMode::RandomGaussian;
    }
    Ok(())
}

/// Generate the fixed evaluation set for one digit count, applying the
/// occlusion flag if requested. Deterministic per (count, config geometry).
pub fn eval_set(
    pool: &nfm_core::DigitPool,
    count: usize,
    cfg: &RunConfig,
    occluded: bool,
) -> Result<Vec<Sample>, HarnessError> {
    let mut samples = generate_for_count(
        pool,
        count,
        cfg.eval_samples,
        &cfg.stacked_config(),
        eval_set_seed(count),
    )?;
    if occluded {
        let mut rng = ChaCha8Rng::seed_from_u64(salted_seed(count as u64, "occlusion-boxes"));
        for sample in &mut samples {
            occlude(&mut sample.image, cfg.canvas_size, cfg.occlusion_box, &mut rng)?;
        }
    }
    Ok(samples)
}

/// Evaluate a checkpoint per digit count on freshly generated fixed-seed
/// sets. The checkpoint file is only ever read.
pub fn run_eval(
    checkpoint: &Path,
    cfg: &RunConfig,
    flags: &EvalFlags,
) -> Result<Vec<EvalRow>, HarnessError> {
    if cfg.f64_mode {
        eval_typed::<f64>(checkpoint, cfg, flags)
    } else {
        eval_typed::<f32>(checkpoint, cfg, flags)
    }
}

fn eval_typed<E: Element>(
    checkpoint: &Path,
    cfg: &RunConfig,
    flags: &EvalFlags,
) -> Result<Vec<EvalRow>, HarnessError> {
    let mut net: NFMNetwork<E> = load_checkpoint(checkpoint)?;
    if net.spec.input_size != cfg.canvas_size {
        return Err(HarnessError::BadConfig(format!(
            "checkpoint expects {0}x{0} inputs but the config renders {1}x{1} canvases",
            net.spec.input_size, cfg.canvas_size
        )));
    }
    apply_flags(&mut net, flags)?;
    let data_dir = Path::new(&cfg.data_dir);
    ensure_corpus(data_dir)?;
    let (_, eval_pool) = load_pools(data_dir)?;
    let mut rows = Vec::new();
    for &count in &cfg.eval_counts {
        if count == 0 {
            return Err(HarnessError::BadConfig("digit count 0 requested".into()));
        }
        let samples = eval_set(&eval_pool, count, cfg, flags.occlude)?;
        let mut rng = ChaCha8Rng::seed_from_u64(salted_seed(count as u64, "eval-forward"));
        let (loss, accuracy) = score_samples(&mut net, &samples, cfg.batch_size, &mut rng)?;
        rows.push(EvalRow {
            count,
            loss,
            accuracy,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nfm_core::network::save_checkpoint;
    use nfm_core::{BackboneSpec, NFMConfig};

    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.seed = Some(1);
        cfg.canvas_size = 8;
        cfg.digit_size = 4;
        cfg.eval_samples = 12;
        cfg.batch_size = 4;
        cfg.eval_counts = vec![1, 2];
        cfg.occlusion_box = 3;
        cfg.data_dir = dir.join("data").to_string_lossy().into_owned();
        cfg
    }

    fn tiny_net(kind: ModelKind) -> NFMNetwork<f32> {
        let mut nfm = NFMConfig::reference();
        nfm.num_heads = 2;
        nfm.key_dim = 2;
        nfm.value_dim = 2;
        nfm.top_k = 2;
        NFMNetwork::build(BackboneSpec::tiny(), nfm, kind, 5).unwrap()
    }

    #[test]
    fn untrained_gated_network_scores_exactly_like_its_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let nfm_path = dir.path().join("nfm.ckpt");
        let base_path = dir.path().join("base.ckpt");
        save_checkpoint(&tiny_net(ModelKind::Nfm), &nfm_path).unwrap();
        save_checkpoint(&tiny_net(ModelKind::Baseline), &base_path).unwrap();
        let flags = EvalFlags::default();
        let nfm_rows = run_eval(&nfm_path, &cfg, &flags).unwrap();
        let base_rows = run_eval(&base_path, &cfg, &flags).unwrap();
        assert_eq!(nfm_rows, base_rows);
        assert_eq!(nfm_rows.len(), 2);
    }

    #[test]
    fn evaluation_is_deterministic_and_read_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&tiny_net(ModelKind::Nfm), &path).unwrap();
        let before = std::fs::read(&path).unwrap();
        let flags = EvalFlags {
            random_attention: true,
            occlude: true,
            passes_override: Some(1),
        };
        let a = run_eval(&path, &cfg, &flags).unwrap();
        let b = run_eval(&path, &cfg, &flags).unwrap();
        assert_eq!(a, b);
        assert_eq!(std::fs::read(&path).unwrap(), before);
    }

    #[test]
    fn impossible_flag_combinations_are_rejected() {
        let mut base = tiny_net(ModelKind::Baseline);
        let err = apply_flags(
            &mut base,
            &EvalFlags {
                passes_override: Some(1),
                ..EvalFlags::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("baseline"));
        assert!(apply_flags(
            &mut base,
            &EvalFlags {
                random_attention: true,
                ..EvalFlags::default()
            }
        )
        .is_err());
        let mut nfm = tiny_net(ModelKind::Nfm);
        assert!(apply_flags(
            &mut nfm,
            &EvalFlags {
                passes_override: Some(3),
                ..EvalFlags::default()
            }
        )
        .is_err());
    }

    #[test]
    fn canvas_mismatch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.canvas_size = 16;
        cfg.digit_size = 8;
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&tiny_net(ModelKind::Nfm), &path).unwrap();
        assert!(matches!(
            run_eval(&path, &cfg, &EvalFlags::default()),
            Err(HarnessError::BadConfig(_))
        ));
    }

    #[test]
    fn eval_sets_are_shared_across_configs_with_the_same_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        std::fs::create_dir_all(&cfg.data_dir).unwrap();
        crate::data::ensure_corpus_sized(Path::new(&cfg.data_dir), 40, 16).unwrap();
        let (_, pool) = load_pools(Path::new(&cfg.data_dir)).unwrap();
        let mut other = cfg.clone();
        other.seed = Some(99);
        other.top_k = 3;
        let a = eval_set(&pool, 2, &cfg, false).unwrap();
        let b = eval_set(&pool, 2, &other, false).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.target, y.target);
        }
    }
}
