//! Grid sweeps over attention hyperparameters: one training run per cell,
//! resumable by config hash, with failures recorded instead of aborting the
//! grid.

use crate::config::RunConfig;
use crate::metrics::{read_metrics, summary_csv, write_idempotent, MetricsRecord};
use crate::train::{run_columns, run_train, TrainOutcome};
use crate::HarnessError;
use nfm_core::attention::RescaleMode;
use std::path::Path;

/// Value lists per swept axis. An empty axis means "keep the base value".
#[derive(Clone, Debug, Default)]
pub struct SweepGrid {
    pub heads: Vec<usize>,
    pub top_k: Vec<usize>,
    pub key_dim: Vec<usize>,
    pub value_dim: Vec<usize>,
    pub passes: Vec<usize>,
    pub rescale_mode: Vec<RescaleMode>,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SweepGrid {
    /// Materialize the Cartesian product as full run configurations.
    pub fn cells(&self, base: &RunConfig) -> Vec<RunConfig> {
        let mut cells = Vec::new();
        for &heads in &axis(&self.heads, base.heads) {
            for &top_k in &axis(&self.top_k, base.top_k) {
                for &key_dim in &axis(&self.key_dim, base.key_dim) {
                    for &value_dim in &axis(&self.value_dim, base.value_dim) {
                        for &passes in &axis(&self.passes, base.passes) {
                            for &rescale_mode in &axis(&self.rescale_mode, base.rescale_mode) {
                                let mut cfg = base.clone();
                                cfg.heads = heads;
                                cfg.top_k = top_k;
                                cfg.key_dim = key_dim;
                                cfg.value_dim = value_dim;
                                cfg.passes = passes;
                                cfg.rescale_mode = rescale_mode;
                                cells.push(cfg);
                            }
                        }
                    }
                }
            }
        }
        cells
    }
}

/// One grid cell's fate.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub config: RunConfig,
    pub status: String,
    pub outcome: Option<TrainOutcome>,
}

/// Run every cell (reusing any that already finished in its hash-named
/// directory), then regenerate the aggregated summary CSV. A failing cell is
/// recorded with its error and the sweep continues.
pub fn run_sweep(
    base: &RunConfig,
    grid: &SweepGrid,
    out: &Path,
) -> Result<Vec<SweepRow>, HarnessError> {
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for mut cfg in grid.cells(base) {
        cfg.out_dir = out
            .join("runs")
            .join(cfg.config_hash())
            .to_string_lossy()
            .into_owned();
        let row = match run_train(&cfg) {
            Ok(outcome) => SweepRow {
                config: cfg,
                status: "ok".into(),
                outcome: Some(outcome),
            },
            Err(e) => SweepRow {
                config: cfg,
                status: format!("error: {e}"),
                outcome: None,
            },
        };
        eprintln!(
            "sweep cell {}: {}",
            row.config.config_hash(),
            row.status.lines().next().unwrap_or("?")
        );
        rows.push(row);
    }
    let summary = sweep_summary(&rows)?;
    write_idempotent(&out.join("summary.csv"), &summary)?;
    Ok(rows)
}

/// The sweep-level CSV: per completed cell one row per eval count, per
/// failed cell a single row carrying the error status.
pub fn sweep_summary(rows: &[SweepRow]) -> Result<String, HarnessError> {
    let mut runs = Vec::new();
    for row in rows {
        let records: Vec<MetricsRecord> = match &row.outcome {
            Some(outcome) => {
                let path = Path::new(&outcome.out_dir).join("metrics.jsonl");
                if path.is_file() {
                    read_metrics(&path)?
                } else {
                    Vec::new()
                }
            }
            None => Vec::new(),
        };
        runs.push((run_columns(&row.config, &row.status), records));
    }
    Ok(summary_csv(&runs))
}
