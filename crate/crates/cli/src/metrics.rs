//! Metrics emission: append-only JSONL records, an idempotently regenerated
//! summary CSV, and an optional accuracy-vs-count SVG plot.

use crate::HarnessError;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

/// One scored pass over one split, one JSON object per line on disk.
///
/// `wall_time_s` is the only nondeterministic field; reproducibility
/// comparisons go through [`strip_wall_time`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    /// Digit count for per-count evaluation rows; `None` for mixed-count
    /// training/validation rows.
    pub count: Option<usize>,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_time_s: f64,
    pub config_hash: String,
}

/// Append one record to a JSONL file, creating it if needed.
pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<(), HarnessError> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let line = serde_json::to_string(record)?;
    writeln!(file, "{line}")?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(HarnessError::from))
        .collect()
}

/// The deterministic projection of a metrics stream: the same records with
/// wall time zeroed, in file order. Two runs of the same config and seed
/// must agree exactly on this projection.
pub fn strip_wall_time(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    records
        .iter()
        .map(|r| MetricsRecord {
            wall_time_s: 0.0,
            ..r.clone()
        })
        .collect()
}

/// Columns describing a run in the summary CSV, one value set per run.
#[derive(Clone, Debug)]
pub struct RunColumns {
    pub config_hash: String,
    pub status: String,
    pub model: String,
    pub passes: usize,
    pub top_k: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub rescale_mode: String,
    pub share_backbone: bool,
    pub seed: u64,
}

pub const SUMMARY_HEADER: &str = "config_hash,status,model,passes,top_k,heads,key_dim,value_dim,\
rescale_mode,share_backbone,seed,count,loss,accuracy";

/// Render the summary CSV for a set of runs: one row per evaluation record
/// (runs x counts), plus a single metric-less row for runs that produced no
/// evaluation records (errors). Deterministic: rows are emitted in the given
/// run order, counts ascending.
pub fn summary_csv(runs: &[(RunColumns, Vec<MetricsRecord>)]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for (cols, records) in runs {
        let mut eval_rows: Vec<&MetricsRecord> = records
            .iter()
            .filter(|r| r.split == "eval" && r.count.is_some())
            .collect();
        eval_rows.sort_by_key(|r| r.count);
        let prefix = format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            cols.config_hash,
            cols.status,
            cols.model,
            cols.passes,
            cols.top_k,
            cols.heads,
            cols.key_dim,
            cols.value_dim,
            cols.rescale_mode,
            cols.share_backbone,
            cols.seed
        );
        if eval_rows.is_empty() {
            let _ = writeln!(out, "{prefix},,,");
        }
        for row in eval_rows {
            let _ = writeln!(
                out,
                "{prefix},{},{},{}",
                row.count.expect("filtered"),
                row.loss,
                row.accuracy
            );
        }
    }
    out
}

/// Write `content` to `path` only if it differs, so regeneration is
/// idempotent down to file timestamps being the only possible change.
pub fn write_idempotent(path: &Path, content: &str) -> Result<(), HarnessError> {
    if let Ok(existing) = std::fs::read_to_string(path) {
        if existing == content {
            return Ok(());
        }
    }
    std::fs::write(path, content)?;
    Ok(())
}

/// Accuracy-vs-digit-count line plot as a standalone SVG document. Each
/// series is one labeled polyline over (count, accuracy in [0,1]) points.
pub fn accuracy_plot_svg(series: &[(String, Vec<(usize, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 60.0;
    const MR: f64 = 160.0;
    const MT: f64 = 24.0;
    const MB: f64 = 48.0;
    let counts: Vec<usize> = {
        let mut all: Vec<usize> = series
            .iter()
            .flat_map(|(_, pts)| pts.iter().map(|&(c, _)| c))
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    };
    let (lo, hi) = match (counts.first(), counts.last()) {
        (Some(&lo), Some(&hi)) if hi > lo => (lo as f64, hi as f64),
        (Some(&lo), _) => (lo as f64 - 0.5, lo as f64 + 0.5),
        _ => (0.0, 1.0),
    };
    let x = |count: f64| ML + (count - lo) / (hi - lo) * (W - ML - MR);
    let y = |acc: f64| MT + (1.0 - acc) * (H - MT - MB);
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    // Axes and gridlines.
    for tick in 0..=10 {
        let acc = tick as f64 / 10.0;
        let yy = y(acc);
        let _ = write!(
            svg,
            "<line x1=\"{ML}\" y1=\"{yy}\" x2=\"{}\" y2=\"{yy}\" stroke=\"#ddd\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.1}</text>\n",
            W - MR,
            ML - 6.0,
            yy + 4.0,
            acc
        );
    }
    for &count in &counts {
        let xx = x(count as f64);
        let _ = write!(
            svg,
            "<line x1=\"{xx}\" y1=\"{MT}\" x2=\"{xx}\" y2=\"{}\" stroke=\"#eee\"/>\n\
             <text x=\"{xx}\" y=\"{}\" text-anchor=\"middle\">{count}</text>\n",
            H - MB,
            H - MB + 18.0
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">digits per image</text>\n\
         <text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">\
         exact-match accuracy</text>\n",
        ML + (W - ML - MR) / 2.0,
        H - 10.0,
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0
    );
    for (i, (label, points)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let mut sorted = points.clone();
        sorted.sort_by_key(|&(c, _)| c);
        let path: Vec<String> = sorted
            .iter()
            .map(|&(c, a)| format!("{:.2},{:.2}", x(c as f64), y(a)))
            .collect();
        let _ = write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        );
        for &(c, a) in &sorted {
            let _ = write!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                x(c as f64),
                y(a)
            );
        }
        let ly = MT + 16.0 + i as f64 * 18.0;
        let _ = write!(
            svg,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n<text x=\"{}\" y=\"{}\">{label}</text>\n",
            W - MR + 10.0,
            W - MR + 34.0,
            W - MR + 40.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
