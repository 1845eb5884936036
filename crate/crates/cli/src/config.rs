//! Experiment configuration: presets, JSON files and flag overrides.

use std::path::Path;

use dkl_core::data::{ShiftConfig, SplitMode};
use dkl_core::metrics::MetricsOptions;
use dkl_core::train::{ModelKind, TrainConfig};
use dkl_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const EXPERIMENT_SCHEMA: &str = "dkl-experiment/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    pub mode: SplitMode,
    /// Generator settings used when no cohort directory is given.
    pub cohort: ShiftConfig,
    /// Template for every run; `model` and `seed` are set per run.
    pub train: TrainConfig,
    pub models: Vec<ModelKind>,
    pub runs: usize,
    /// Master seed: cohort generation, the split, and run `r` trains with
    /// `seed + r`.
    pub seed: u64,
    pub metrics: MetricsOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Preset::Temporal.config()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 2,400 era-A and 1,600 era-B episodes, test on era B.
    Temporal,
    /// 1,800 + 1,200 episodes pooled and split at random.
    Internal,
    /// Tiny cohort, two epochs, one run.
    Smoke,
}

/// Training defaults of the experiment presets. The desk-scale cohorts are
/// about seven times smaller than the full registry, so the batch is shrunk
/// to give the default learning rate a comparable number of optimizer steps
/// per epoch.
pub fn preset_train() -> TrainConfig {
    TrainConfig { batch_size: PRESET_BATCH_SIZE, ..TrainConfig::default() }
}

pub const PRESET_BATCH_SIZE: usize = 21;

impl Preset {
    pub fn for_mode(mode: SplitMode) -> Self {
        match mode {
            SplitMode::TemporalShift => Preset::Temporal,
            SplitMode::Internal => Preset::Internal,
        }
    }

    pub fn config(self) -> ExperimentConfig {
        let base = ExperimentConfig {
            schema: EXPERIMENT_SCHEMA.into(),
            mode: SplitMode::TemporalShift,
            cohort: ShiftConfig::default(),
            train: preset_train(),
            models: ModelKind::ALL.to_vec(),
            runs: 10,
            seed: 0,
            metrics: MetricsOptions::default(),
        };
        match self {
            Preset::Temporal => base,
            Preset::Internal => ExperimentConfig {
                mode: SplitMode::Internal,
                cohort: ShiftConfig { n_era_a: 1800, n_era_b: 1200, ..ShiftConfig::default() },
                ..base
            },
            Preset::Smoke => ExperimentConfig {
                cohort: ShiftConfig { n_era_a: 60, n_era_b: 40, ..ShiftConfig::default() },
                train: TrainConfig { epochs: 2, batch_size: 20, num_inducing: 16, ..base.train },
                runs: 1,
                ..base
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != EXPERIMENT_SCHEMA {
            return Err(Error::VersionMismatch { expected: EXPERIMENT_SCHEMA.into(), found: self.schema.clone() });
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("no model kinds selected".into()));
        }
        self.cohort.validate()?;
        self.train.validate()
    }
}

/// Overlays `file` onto `base`, recursing into objects so a file only needs
/// the fields it changes.
fn merge(base: &mut serde_json::Value, file: serde_json::Value) {
    match (base, file) {
        (serde_json::Value::Object(b), serde_json::Value::Object(f)) => {
            for (k, v) in f {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset values overlaid with a config file. Malformed files are reported
/// as `path:line:column: message`.
pub fn load(preset: Preset, file: Option<&Path>) -> Result<ExperimentConfig> {
    let base = preset.config();
    let Some(path) = file else {
        return Ok(base);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let anchored = |e: serde_json::Error| Error::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()));
    // Parse on its own first so unknown fields and type errors keep their
    // line numbers.
    serde_json::from_str::<ExperimentConfig>(&text).map_err(anchored)?;
    let overlay: serde_json::Value = serde_json::from_str(&text).map_err(anchored)?;
    let mut value = serde_json::to_value(&base)?;
    merge(&mut value, overlay);
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
