//! The training loop: seeded data streams, Adam updates, per-epoch
//! train/validation metrics, best-validation checkpointing, and final
//! per-count evaluation. A finished run leaves an `outcome.json` marker so
//! re-running the same configuration in the same directory is a no-op.

use crate::config::{salted_seed, RunConfig};
use crate::data::{assemble, ensure_corpus, load_pools};
use crate::evaluate::{eval_set, score_samples, EvalRow};
use crate::metrics::{
    accuracy_plot_svg, append_metrics, summary_csv, write_idempotent, MetricsRecord, RunColumns,
};
use crate::HarnessError;
use nfm_core::dataset::{exact_match_accuracy, generate_mixed, mixup_batch, Sample};
use nfm_core::network::{load_checkpoint, save_checkpoint};
use nfm_core::tensor::{adam_step, AdamEntry, AdamHyper, OptimizerState};
use nfm_core::{Element, Graph, NFMNetwork};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

/// What a finished training run leaves behind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub config_hash: String,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub eval: Vec<EvalRow>,
    pub out_dir: String,
    /// True when this outcome was read back from a completed run directory
    /// instead of being trained now.
    #[serde(default)]
    pub reused: bool,
}

fn enum_string<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

pub(crate) fn run_columns(cfg: &RunConfig, status: &str) -> RunColumns {
    RunColumns {
        config_hash: cfg.config_hash(),
        status: status.to_string(),
        model: enum_string(&cfg.model),
        passes: cfg.passes,
        top_k: cfg.top_k,
        heads: cfg.heads,
        key_dim: cfg.key_dim,
        value_dim: cfg.value_dim,
        rescale_mode: enum_string(&cfg.rescale_mode),
        share_backbone: cfg.share_backbone,
        seed: cfg.seed(),
    }
}

/// Train per `cfg`, or return the stored outcome if this exact configuration
/// already finished in `cfg.out_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let out_dir = Path::new(&cfg.out_dir);
    if let Some(outcome) = finished_outcome(cfg, out_dir)? {
        return Ok(outcome);
    }
    if cfg.f64_mode {
        train_typed::<f64>(cfg)
    } else {
        train_typed::<f32>(cfg)
    }
}

/// A completed run is recognized by an outcome marker whose config hash
/// matches; anything else (absent, partial, different config) trains anew.
fn finished_outcome(cfg: &RunConfig, out_dir: &Path) -> Result<Option<TrainOutcome>, HarnessError> {
    let marker = out_dir.join("outcome.json");
    if !marker.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&marker)?;
    match serde_json::from_str::<TrainOutcome>(&text) {
        Ok(mut outcome) if outcome.config_hash == cfg.config_hash() => {
            outcome.reused = true;
            outcome.out_dir = cfg.out_dir.clone();
            Ok(Some(outcome))
        }
        _ => Ok(None),
    }
}

fn train_typed<E: Element>(cfg: &RunConfig) -> Result<TrainOutcome, HarnessError> {
    let out_dir = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    let metrics_path = out_dir.join("metrics.jsonl");
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }
    let hash = cfg.config_hash();
    let seed = cfg.seed();

    let data_dir = Path::new(&cfg.data_dir);
    ensure_corpus(data_dir)?;
    let (train_pool, eval_pool) = load_pools(data_dir)?;
    let stacked = cfg.stacked_config();
    let samples = generate_mixed(
        &train_pool,
        &cfg.train_counts,
        cfg.train_samples,
        &stacked,
        salted_seed(seed, "training-stream"),
    )?;
    let n_val = ((samples.len() as f64) * cfg.val_fraction).round() as usize;
    let (train_set, val_set) = samples.split_at(samples.len() - n_val);

    let kind = cfg.model;
    let mut net: NFMNetwork<E> = NFMNetwork::build(cfg.backbone_spec(), cfg.nfm_config(), kind, seed)?;
    let hyper = AdamHyper {
        lr: cfg.learning_rate,
        ..AdamHyper::default()
    };
    let mut opt: OptimizerState<E> =
        OptimizerState::new(net.params().iter().map(|(_, _, d)| d.len()), hyper);

    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    save_checkpoint(&net, &last_path)?;
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;

    let side = cfg.canvas_size;
    let classes = net.spec.classes;
    let mut forward_rng = ChaCha8Rng::seed_from_u64(salted_seed(seed, "training-forward"));
    let mut mixup_rng = ChaCha8Rng::seed_from_u64(salted_seed(seed, "mixup"));

    let diverged = |epoch: usize, what: String| HarnessError::Diverged {
        epoch,
        what,
        kept: last_path.display().to_string(),
    };

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(salted_seed(seed, &format!("shuffle-epoch-{epoch}")));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // Batch statistics are undefined over a single sample.
            if cfg.use_batchnorm && chunk.len() < 2 {
                continue;
            }
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (mut images, mut targets) = assemble(&refs);
            let b = refs.len();
            let mut soft_targets = false;
            if cfg.mixup_alpha > 0.0 && b > 1 {
                // Pair every sample with its successor (cyclically).
                let img_len = side * side;
                let rotate = |buf: &[f32], stride: usize| -> Vec<f32> {
                    let mut out = Vec::with_capacity(buf.len());
                    out.extend_from_slice(&buf[stride..]);
                    out.extend_from_slice(&buf[..stride]);
                    out
                };
                let images_b = rotate(&images, img_len);
                let targets_b = rotate(&targets, classes);
                let (mi, mt, _lambda) = mixup_batch(
                    &images,
                    &targets,
                    &images_b,
                    &targets_b,
                    cfg.mixup_alpha as f32,
                    &mut mixup_rng,
                )?;
                images = mi;
                targets = mt;
                soft_targets = true;
            }

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
            let (logits, _) =
                net.forward_multipass(&mut graph, input, true, &mut forward_rng, false, &mut binding)?;
            let loss = if soft_targets {
                graph.sigmoid_bce_loss_soft(logits, target_id)?
            } else {
                graph.sigmoid_bce_loss(logits, target_id)?
            };
            let loss_val = Element::to_f64(graph.data(loss)[0]);
            if !loss_val.is_finite() {
                return Err(diverged(epoch, format!("loss became {loss_val}")));
            }
            let acc = exact_match_accuracy(graph.data(logits), graph.data(target_id), classes);
            loss_sum += loss_val * b as f64;
            acc_sum += acc * b as f64;
            seen += b;

            graph.backward(loss)?;
            let mut grads: HashMap<String, Vec<E>> = HashMap::new();
            for (name, tid) in &binding {
                if let Some(g) = graph.grad(*tid) {
                    grads.insert(name.clone(), g.to_vec());
                }
            }
            drop(graph);
            let mut params = net.params_mut();
            let entries: Vec<AdamEntry<'_, E>> = params
                .iter_mut()
                .map(|(name, data)| AdamEntry {
                    name: name.as_str(),
                    param: data.as_mut_slice(),
                    grad: grads.get(name.as_str()).map(|g| g.as_slice()),
                })
                .collect();
            adam_step(&mut opt, entries)
                .map_err(|e| diverged(epoch, e.to_string()))?;
        }
        if seen == 0 {
            return Err(HarnessError::BadConfig(format!(
                "no usable training batches (batch_size {} vs {} samples)",
                cfg.batch_size,
                train_set.len()
            )));
        }
        let train_loss = loss_sum / seen as f64;
        let train_acc = acc_sum / seen as f64;
        append_metrics(
            &metrics_path,
            &MetricsRecord {
                epoch,
                split: "train".into(),
                count: None,
                loss: train_loss,
                accuracy: train_acc,
                wall_time_s: epoch_start.elapsed().as_secs_f64(),
                config_hash: hash.clone(),
            },
        )?;

        let (val_loss, val_acc) = if val_set.is_empty() {
            (train_loss, train_acc)
        } else {
            let val_start = Instant::now();
            let mut rng =
                ChaCha8Rng::seed_from_u64(salted_seed(seed, &format!("val-epoch-{epoch}")));
            let (l, a) = score_samples(&mut net, val_set, cfg.batch_size, &mut rng)?;
            append_metrics(
                &metrics_path,
                &MetricsRecord {
                    epoch,
                    split: "val".into(),
                    count: None,
                    loss: l,
                    accuracy: a,
                    wall_time_s: val_start.elapsed().as_secs_f64(),
                    config_hash: hash.clone(),
                },
            )?;
            (l, a)
        };
        if !val_loss.is_finite() {
            return Err(diverged(epoch, format!("validation loss became {val_loss}")));
        }

        save_checkpoint(&net, &last_path)?;
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            save_checkpoint(&net, &best_path)?;
        }
        eprintln!(
            "[{hash}] epoch {epoch:>3}: train loss {train_loss:.4} acc {train_acc:.4} | \
             val loss {val_loss:.4} acc {val_acc:.4}"
        );
    }

    // Score the best-validation snapshot per digit count on the shared
    // fixed-seed evaluation sets.
    let mut best_net: NFMNetwork<E> = load_checkpoint(&best_path)?;
    let mut eval_rows = Vec::new();
    for &count in &cfg.eval_counts {
        let eval_start = Instant::now();
        let samples = eval_set(&eval_pool, count, cfg, cfg.occlude_eval)?;
        let mut rng = ChaCha8Rng::seed_from_u64(salted_seed(count as u64, "eval-forward"));
        let (loss, accuracy) = score_samples(&mut best_net, &samples, cfg.batch_size, &mut rng)?;
        append_metrics(
            &metrics_path,
            &MetricsRecord {
                epoch: best_epoch,
                split: "eval".into(),
                count: Some(count),
                loss,
                accuracy,
                wall_time_s: eval_start.elapsed().as_secs_f64(),
                config_hash: hash.clone(),
            },
        )?;
        eval_rows.push(EvalRow {
            count,
            loss,
            accuracy,
        });
    }

    let records = crate::metrics::read_metrics(&metrics_path)?;
    let csv = summary_csv(&[(run_columns(cfg, "ok"), records)]);
    write_idempotent(&out_dir.join("summary.csv"), &csv)?;
    let series = vec![(
        format!("{} ({})", enum_string(&cfg.model), hash),
        eval_rows.iter().map(|r| (r.count, r.accuracy)).collect(),
    )];
    write_idempotent(&out_dir.join("plot.svg"), &accuracy_plot_svg(&series))?;

    let outcome = TrainOutcome {
        config_hash: hash,
        best_epoch,
        best_val_accuracy: best_val,
        eval: eval_rows,
        out_dir: cfg.out_dir.clone(),
        reused: false,
    };
    std::fs::write(
        out_dir.join("outcome.json"),
        serde_json::to_string_pretty(&outcome)?,
    )?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{read_metrics, strip_wall_time};

    /// A configuration small enough to train in well under a second.
    fn smoke_cfg(root: &Path, tag: &str) -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.seed = Some(11);
        cfg.canvas_size = 8;
        cfg.digit_size = 4;
        cfg.train_counts = vec![1];
        cfg.eval_counts = vec![1, 2];
        cfg.train_samples = 64;
        cfg.eval_samples = 16;
        cfg.epochs = 1;
        cfg.batch_size = 16;
        cfg.heads = 2;
        cfg.key_dim = 2;
        cfg.value_dim = 2;
        cfg.top_k = 2;
        cfg.width_divisor = 128;
        cfg.data_dir = root.join("data").to_string_lossy().into_owned();
        cfg.out_dir = root.join(tag).to_string_lossy().into_owned();
        cfg
    }

    #[test]
    fn smoke_run_emits_metrics_checkpoints_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        crate::data::ensure_corpus_sized(&dir.path().join("data"), 60, 30).unwrap();
        let cfg = smoke_cfg(dir.path(), "run");
        let outcome = run_train(&cfg).unwrap();
        assert!(!outcome.reused);
        assert_eq!(outcome.eval.len(), 2);
        let out = Path::new(&cfg.out_dir);
        let records = read_metrics(&out.join("metrics.jsonl")).unwrap();
        assert!(records.iter().any(|r| r.split == "train"));
        assert!(records.iter().any(|r| r.split == "val"));
        assert_eq!(records.iter().filter(|r| r.split == "eval").count(), 2);
        assert!(out.join("best.ckpt").is_file());
        assert!(out.join("last.ckpt").is_file());
        assert!(out.join("summary.csv").is_file());
        assert!(out.join("plot.svg").is_file());
        let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2);
    }

    #[test]
    fn identical_config_and_seed_reproduce_metrics_exactly() {
        let dir = tempfile::tempdir().unwrap();
        crate::data::ensure_corpus_sized(&dir.path().join("data"), 60, 30).unwrap();
        let cfg_a = smoke_cfg(dir.path(), "a");
        let cfg_b = smoke_cfg(dir.path(), "b");
        run_train(&cfg_a).unwrap();
        run_train(&cfg_b).unwrap();
        let a = read_metrics(&Path::new(&cfg_a.out_dir).join("metrics.jsonl")).unwrap();
        let b = read_metrics(&Path::new(&cfg_b.out_dir).join("metrics.jsonl")).unwrap();
        assert_eq!(strip_wall_time(&a), strip_wall_time(&b));
        assert!(!a.is_empty());
    }

    #[test]
    fn finished_runs_are_reused_not_retrained() {
        let dir = tempfile::tempdir().unwrap();
        crate::data::ensure_corpus_sized(&dir.path().join("data"), 60, 30).unwrap();
        let cfg = smoke_cfg(dir.path(), "resume");
        let first = run_train(&cfg).unwrap();
        let metrics = std::fs::read(Path::new(&cfg.out_dir).join("metrics.jsonl")).unwrap();
        let second = run_train(&cfg).unwrap();
        assert!(second.reused);
        assert_eq!(second.best_epoch, first.best_epoch);
        assert_eq!(second.eval, first.eval);
        assert_eq!(
            std::fs::read(Path::new(&cfg.out_dir).join("metrics.jsonl")).unwrap(),
            metrics
        );
        // A different config in the same directory does retrain.
        let mut changed = cfg.clone();
        changed.seed = Some(12);
        let third = run_train(&changed).unwrap();
        assert!(!third.reused);
    }

    #[test]
    fn exploding_learning_rate_aborts_with_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        crate::data::ensure_corpus_sized(&dir.path().join("data"), 60, 30).unwrap();
        let mut cfg = smoke_cfg(dir.path(), "diverge");
        cfg.learning_rate = 1e30;
        cfg.epochs = 3;
        let err = run_train(&cfg).unwrap_err();
        match &err {
            HarnessError::Diverged { kept, .. } => {
                assert!(Path::new(kept).is_file());
                let net: NFMNetwork<f32> = load_checkpoint(Path::new(kept)).unwrap();
                for (_, _, data) in net.params() {
                    assert!(data.iter().all(|v| v.is_finite()));
                }
            }
            other => panic!("expected divergence, got {other}"),
        }
        // No completion marker: a rerun would start over.
        assert!(!Path::new(&cfg.out_dir).join("outcome.json").exists());
    }

    #[test]
    fn mixup_training_uses_soft_targets_without_breaking() {
        let dir = tempfile::tempdir().unwrap();
        crate::data::ensure_corpus_sized(&dir.path().join("data"), 60, 30).unwrap();
        let mut cfg = smoke_cfg(dir.path(), "mixup");
        cfg.mixup_alpha = 0.2;
        let outcome = run_train(&cfg).unwrap();
        assert_eq!(outcome.eval.len(), 2);
    }
}
