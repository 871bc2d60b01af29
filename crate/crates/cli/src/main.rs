//! `nfm` — train, evaluate, sweep, gradient-check, and render for the
//! stacked-digit benchmark. Configuration comes from a flat JSON file
//! (--config) with individual command-line flags overriding file values.

use clap::{Args, Parser, Subcommand};
use mimalloc::MiMalloc;
use nfm_cli::config::{Preset, RunConfig};
use nfm_cli::evaluate::{run_eval, EvalFlags};
use nfm_cli::gradcheck::run_gradcheck;
use nfm_cli::render::run_render;
use nfm_cli::sweep::{run_sweep, SweepGrid};
use nfm_cli::train::run_train;
use nfm_cli::HarnessError;
use nfm_core::attention::RescaleMode;
use nfm_core::ModelKind;
use std::path::PathBuf;

// Training materializes multi-gigabyte activation graphs per batch; a
// pooling allocator keeps those pages resident instead of returning them to
// the kernel between batches.
#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(
    name = "nfm",
    about = "Sparse cross-layer attention networks on the stacked-digit benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every run-configured subcommand. Each flag overrides the
/// matching config-file key; unset flags leave file/preset values alone.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Flat JSON config file mirroring the run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no config file is given: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<String>,
    /// Output directory for metrics, checkpoints, and summaries.
    #[arg(long)]
    out: Option<String>,
    /// baseline or nfm.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long = "topk")]
    topk: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dk: Option<usize>,
    #[arg(long)]
    dv: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated digit counts mixed into training, e.g. 1,3.
    #[arg(long, value_delimiter = ',')]
    train_counts: Option<Vec<usize>>,
    /// Comma-separated digit counts evaluated, e.g. 1,2,3,4,5.
    #[arg(long, value_delimiter = ',')]
    eval_counts: Option<Vec<usize>>,
    /// space_to_depth or nearest.
    #[arg(long)]
    rescale_mode: Option<String>,
    /// true shares one backbone across passes; false clones it per pass.
    #[arg(long)]
    share_backbone: Option<bool>,
    #[arg(long)]
    mixup_alpha: Option<f64>,
    #[arg(long)]
    width_divisor: Option<usize>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Train and evaluate in 64-bit precision.
    #[arg(long = "f64")]
    f64_mode: bool,
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> Result<T, HarnessError> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| HarnessError::BadConfig(format!("unrecognized {what}: {value}")))
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::from_json_file(path)?,
            (None, Some(preset)) => RunConfig::preset(parse_enum::<Preset>("preset", preset)?),
            (None, None) => RunConfig::desk(),
        };
        if let (Some(_), Some(preset)) = (&self.config, &self.preset) {
            // A config file already names its preset; a conflicting flag
            // would silently lose, so reject the combination.
            let flag = parse_enum::<Preset>("preset", preset)?;
            if flag != cfg.preset {
                return Err(HarnessError::BadConfig(
                    "--preset conflicts with the config file's preset; set it in the file".into(),
                ));
            }
        }
        if let Some(v) = self.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.model {
            cfg.model = parse_enum::<ModelKind>("model", v)?;
        }
        if let Some(v) = self.passes {
            cfg.passes = v;
        }
        if let Some(v) = self.topk {
            cfg.top_k = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.dk {
            cfg.key_dim = v;
        }
        if let Some(v) = self.dv {
            cfg.value_dim = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = &self.train_counts {
            cfg.train_counts = v.clone();
        }
        if let Some(v) = &self.eval_counts {
            cfg.eval_counts = v.clone();
        }
        if let Some(v) = &self.rescale_mode {
            cfg.rescale_mode = parse_enum::<RescaleMode>("rescale mode", v)?;
        }
        if let Some(v) = self.share_backbone {
            cfg.share_backbone = v;
        }
        if let Some(v) = self.mixup_alpha {
            cfg.mixup_alpha = v;
        }
        if let Some(v) = self.width_divisor {
            cfg.width_divisor = v;
        }
        if let Some(v) = self.train_samples {
            cfg.train_samples = v;
        }
        if let Some(v) = self.eval_samples {
            cfg.eval_samples = v;
        }
        if self.f64_mode {
            cfg.f64_mode = true;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and evaluate its best-validation checkpoint per count.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate an existing checkpoint per digit count (read-only).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Replace learned attention logits with standard-normal draws.
        #[arg(long)]
        ablate_random_attention: bool,
        /// Zero one occlusion box per evaluated image.
        #[arg(long)]
        occlude: bool,
    },
    /// Train one run per cell of a hyperparameter grid, resumably.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',')]
        grid_heads: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        grid_topk: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        grid_dk: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        grid_dv: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        grid_passes: Option<Vec<usize>>,
        /// Comma-separated rescale modes (space_to_depth,nearest).
        #[arg(long, value_delimiter = ',')]
        grid_rescale: Option<Vec<String>>,
    },
    /// Verify tape gradients of the full two-pass network numerically.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Dump rendered sample canvases as PNG files.
    Render {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 4)]
        per_count: usize,
        /// Additionally dump occluded variants.
        #[arg(long)]
        occlude: bool,
    },
    /// Write the synthetic digit corpus in the standard IDX layout.
    SynthData {
        #[arg(long)]
        data_dir: String,
        #[arg(long, default_value_t = nfm_cli::data::DEFAULT_TRAIN_DIGITS)]
        train: usize,
        #[arg(long, default_value_t = nfm_cli::data::DEFAULT_TEST_DIGITS)]
        test: usize,
    },
}

fn main() {
    nfm_cli::tune_allocator();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { overrides } => {
            let cfg = overrides.resolve()?;
            let outcome = run_train(&cfg)?;
            if outcome.reused {
                eprintln!(
                    "run {} already complete in {}; reusing",
                    outcome.config_hash, outcome.out_dir
                );
            }
            println!("{}", serde_json::to_string_pretty(&outcome)?);
        }
        Command::Eval {
            checkpoint,
            overrides,
            ablate_random_attention,
            occlude,
        } => {
            let mut cfg = match (&overrides.config, checkpoint.parent()) {
                (Some(_), _) => overrides.resolve()?,
                (None, Some(dir)) if dir.join("config.json").is_file() => {
                    let mut o = Overrides {
                        config: Some(dir.join("config.json")),
                        ..overrides
                    };
                    // The checkpoint's own pass count governs; --passes is an
                    // evaluation-time override handled below.
                    o.passes = None;
                    o.resolve()?
                }
                _ => overrides.resolve()?,
            };
            // Evaluation needs no run seed; results depend only on the
            // checkpoint and the fixed evaluation-set seeds.
            cfg.seed.get_or_insert(0);
            let flags = EvalFlags {
                random_attention: ablate_random_attention,
                occlude,
                passes_override: overrides.passes,
            };
            let rows = run_eval(&checkpoint, &cfg, &flags)?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Command::Sweep {
            overrides,
            grid_heads,
            grid_topk,
            grid_dk,
            grid_dv,
            grid_passes,
            grid_rescale,
        } => {
            let cfg = overrides.resolve()?;
            let rescale_mode = grid_rescale
                .unwrap_or_default()
                .iter()
                .map(|s| parse_enum::<RescaleMode>("rescale mode", s))
                .collect::<Result<Vec<_>, _>>()?;
            let grid = SweepGrid {
                heads: grid_heads.unwrap_or_default(),
                top_k: grid_topk.unwrap_or_default(),
                key_dim: grid_dk.unwrap_or_default(),
                value_dim: grid_dv.unwrap_or_default(),
                passes: grid_passes.unwrap_or_default(),
                rescale_mode,
            };
            let out = PathBuf::from(&cfg.out_dir);
            let rows = run_sweep(&cfg, &grid, &out)?;
            let ok = rows.iter().filter(|r| r.status == "ok").count();
            println!(
                "sweep finished: {ok}/{} cells ok; summary at {}",
                rows.len(),
                out.join("summary.csv").display()
            );
        }
        Command::Gradcheck { seeds, tolerance } => {
            let reports = run_gradcheck(seeds, tolerance)?;
            for report in &reports {
                println!(
                    "seed {}: {} ({} coordinates, max rel error {:.3e})",
                    report.seed,
                    if report.passed() { "pass" } else { "FAIL" },
                    report.coordinates_checked,
                    report.max_rel_error
                );
            }
            if reports.iter().any(|r| !r.passed()) {
                return Err(HarnessError::BadConfig(
                    "gradient check failed; see report above".into(),
                ));
            }
        }
        Command::Render {
            overrides,
            per_count,
            occlude,
        } => {
            let mut cfg = overrides.resolve()?;
            cfg.seed.get_or_insert(0);
            let out = PathBuf::from(&cfg.out_dir);
            let written = run_render(&cfg, &out, per_count, occlude)?;
            println!("wrote {} images under {}", written.len(), out.display());
        }
        Command::SynthData {
            data_dir,
            train,
            test,
        } => {
            let wrote =
                nfm_cli::data::ensure_corpus_sized(std::path::Path::new(&data_dir), train, test)?;
            println!(
                "{} corpus in {data_dir} ({train} train / {test} test digits)",
                if wrote { "wrote" } else { "found existing" }
            );
        }
    }
    Ok(())
}
