//! The flat run configuration: one struct covering model, data, and
//! optimization choices, read from a flat JSON file and overridable
//! field-by-field from the command line.

use crate::HarnessError;
use nfm_core::attention::{AttentionMode, LogitScale, RescaleMode};
use nfm_core::{BackboneSpec, ModelKind, NFMConfig, StackedConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Named starting points a run can be derived from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// CPU-sized: canvas 64, 10k training samples, 2k eval samples per
    /// count, 30 epochs, batch 64, narrowed backbone.
    Desk,
    /// Full-scale reference: two passes, top-5, 4 heads, 16-dim keys and
    /// values, learning rate 0.001, 300 epochs, full-width backbone.
    Paper,
}

/// Everything a run needs, flat so a JSON config file mirrors it key for key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Model.
    pub model: ModelKind,
    pub passes: usize,
    pub top_k: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub rescale_mode: RescaleMode,
    pub logit_scale: LogitScale,
    pub share_backbone: bool,
    pub include_current_state: bool,
    pub use_batchnorm: bool,
    pub gamma_init: f64,
    pub width_divisor: usize,
    /// Store every conv layer in attention memory instead of one entry per
    /// block.
    pub memory_per_layer: bool,
    // Data.
    pub canvas_size: usize,
    pub digit_size: usize,
    pub train_counts: Vec<usize>,
    pub eval_counts: Vec<usize>,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub data_dir: String,
    // Optimization.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: Option<u64>,
    /// Beta(alpha, alpha) mixup coefficient; 0 disables mixup.
    pub mixup_alpha: f64,
    pub occlude_eval: bool,
    pub occlusion_box: usize,
    pub val_fraction: f64,
    // Run plumbing.
    pub out_dir: String,
    pub f64_mode: bool,
    pub preset: Preset,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// The CPU-scale preset.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelKind::Nfm,
            passes: 2,
            top_k: 5,
            heads: 4,
            key_dim: 16,
            value_dim: 16,
            rescale_mode: RescaleMode::SpaceToDepth,
            logit_scale: LogitScale::SqrtDk,
            share_backbone: true,
            include_current_state: false,
            use_batchnorm: false,
            gamma_init: 0.0,
            width_divisor: 16,
            memory_per_layer: false,
            canvas_size: 64,
            digit_size: 16,
            train_counts: vec![1, 3],
            eval_counts: vec![1, 2, 3, 4, 5],
            train_samples: 10_000,
            eval_samples: 2_000,
            data_dir: "data".into(),
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.001,
            seed: None,
            mixup_alpha: 0.0,
            occlude_eval: false,
            occlusion_box: 16,
            val_fraction: 0.1,
            out_dir: "runs/run".into(),
            f64_mode: false,
            preset: Preset::Desk,
        }
    }

    /// The full-scale preset (same attention settings, full-width backbone,
    /// long schedule).
    pub fn paper() -> Self {
        RunConfig {
            width_divisor: 1,
            train_samples: 60_000,
            eval_samples: 10_000,
            epochs: 300,
            preset: Preset::Paper,
            ..RunConfig::desk()
        }
    }

    pub fn preset(which: Preset) -> Self {
        match which {
            Preset::Desk => RunConfig::desk(),
            Preset::Paper => RunConfig::paper(),
        }
    }

    /// Load a flat JSON config file on top of its declared preset: the file
    /// first picks the preset ("desk" unless given), then its remaining keys
    /// override preset values.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, HarnessError> {
        #[derive(Deserialize)]
        struct PresetOnly {
            #[serde(default)]
            preset: Option<Preset>,
        }
        let preset = serde_json::from_str::<PresetOnly>(text)?
            .preset
            .unwrap_or(Preset::Desk);
        let base = serde_json::to_value(RunConfig::preset(preset))?;
        let mut merged = base;
        let overlay: serde_json::Value = serde_json::from_str(text)?;
        let obj = overlay
            .as_object()
            .ok_or_else(|| HarnessError::BadConfig("config file must be a JSON object".into()))?;
        for (key, value) in obj {
            merged
                .as_object_mut()
                .expect("config serializes to an object")
                .insert(key.clone(), value.clone());
        }
        Ok(serde_json::from_value(merged)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seed.is_none() {
            return Err(HarnessError::BadConfig(
                "seed is mandatory (set \"seed\" in the config or pass --seed)".into(),
            ));
        }
        if self.train_counts.is_empty() || self.eval_counts.is_empty() {
            return Err(HarnessError::BadConfig(
                "train_counts and eval_counts must be non-empty".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.train_samples == 0 {
            return Err(HarnessError::BadConfig(
                "epochs, batch_size, and train_samples must be >= 1".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(HarnessError::BadConfig(format!(
                "val_fraction {} outside [0, 0.5)",
                self.val_fraction
            )));
        }
        if self.mixup_alpha < 0.0 {
            return Err(HarnessError::BadConfig(format!(
                "mixup_alpha {} must be >= 0",
                self.mixup_alpha
            )));
        }
        self.stacked_config()
            .validate()
            .map_err(HarnessError::from)?;
        self.backbone_spec().validate()?;
        self.nfm_config().validate().map_err(|e| {
            HarnessError::BadConfig(format!("attention configuration rejected: {e}"))
        })?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config carries a seed")
    }

    pub fn nfm_config(&self) -> NFMConfig {
        NFMConfig {
            num_heads: self.heads,
            key_dim: self.key_dim,
            value_dim: self.value_dim,
            top_k: self.top_k,
            num_passes: self.passes,
            gamma_init: self.gamma_init,
            use_batchnorm: self.use_batchnorm,
            rescale_mode: self.rescale_mode,
            logit_scale: self.logit_scale,
            share_backbone_across_passes: self.share_backbone,
            attention_mode: AttentionMode::Learned,
            include_current_state: self.include_current_state,
        }
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        let mut spec = BackboneSpec::stacked_digit(self.width_divisor);
        spec.input_size = self.canvas_size;
        if self.memory_per_layer {
            spec = spec.with_per_layer_memory();
        }
        spec
    }

    pub fn stacked_config(&self) -> StackedConfig {
        StackedConfig {
            canvas_size: self.canvas_size,
            digit_size: self.digit_size,
            train_counts: self.train_counts.clone(),
            eval_counts: self.eval_counts.clone(),
        }
    }

    /// Stable identity of the scientific content of this config: every field
    /// except the filesystem locations (`data_dir`, `out_dir`), hashed.
    pub fn config_hash(&self) -> String {
        let mut scrubbed = self.clone();
        scrubbed.data_dir = String::new();
        scrubbed.out_dir = String::new();
        let canon = serde_json::to_string(&scrubbed).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Deterministic stream seed for a named purpose, decorrelated from (but
/// fully determined by) the run seed.
pub fn salted_seed(seed: u64, tag: &str) -> u64 {
    let digest = Sha256::digest(tag.as_bytes());
    let salt = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    seed ^ salt
}

/// Seed for the shared per-count evaluation sets. Independent of the run
/// seed so every run is scored on identical samples.
pub fn eval_set_seed(count: usize) -> u64 {
    salted_seed(count as u64, "held-out-evaluation-set")
}
