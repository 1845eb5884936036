//! The `dkl` command line: cohort generation, preprocessing, training,
//! evaluation, experiment presets and report bundles.

pub mod bundle;
pub mod config;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dkl_core::data::{
    apply_norm, generate_cohort, prepare_splits, preprocess_episode, processed_path, read_cohort, read_manifest,
    read_processed, split, write_cohort, write_json, write_processed, CohortManifest, Era, ProcessedEpisode,
    SplitMode, PROCESSED_SCHEMA,
};
use dkl_core::metrics::{evaluate, MetricsOptions, MetricsReport, PredictionSet};
use dkl_core::train::{
    evaluate_model, run_experiment, train_model, Checkpoint, EpochLog, ExperimentData, ExperimentResult, ModelKind,
    TrainConfig,
};
use dkl_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::bundle::{BundleConfig, CohortSource};
use crate::config::{ExperimentConfig, Preset};

#[derive(Debug, Parser)]
#[command(name = "dkl", version, about = "Deep kernel learning for ICU mortality under temporal shift")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn parse_mode(s: &str) -> std::result::Result<SplitMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Configuration flags shared by commands that build an experiment config.
#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// JSON configuration; only the fields it names override the preset.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Starting preset (default: the one matching --mode, else temporal).
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Split protocol: temporal-shift or internal.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<SplitMode>,
    /// Master seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    /// Preset, then config file, then flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let preset = self.preset.unwrap_or_else(|| self.mode.map_or(Preset::Temporal, Preset::for_mode));
        let mut c = config::load(preset, self.config.as_deref())?;
        if let Some(mode) = self.mode {
            c.mode = mode;
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic two-era cohort into a directory.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Replace an existing cohort.
        #[arg(long)]
        force: bool,
    },
    /// Cache the un-normalized 48 × 76 tensors of a cohort directory.
    Preprocess {
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
        /// Output file (default: processed.bin inside the cohort).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train one model and save its best-validation checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Cohort directory (default: generate one from the config).
        #[arg(long, value_name = "DIR")]
        cohort: Option<PathBuf>,
        #[arg(long, value_parser = parse_model, default_value = "dkl")]
        model: ModelKind,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on one split of a cohort.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        cohort: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Split protocol the checkpoint was trained under.
        #[arg(long, value_parser = parse_mode, default_value = "temporal-shift")]
        mode: SplitMode,
        /// Split seed the checkpoint was trained under.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run every selected model kind for several seeds and write a report bundle.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "N")]
        runs: Option<usize>,
        /// Restrict to these model kinds (repeatable).
        #[arg(long, value_parser = parse_model)]
        model: Vec<ModelKind>,
        #[arg(long, value_name = "DIR")]
        cohort: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Worker threads (default: logical cores).
        #[arg(long, value_name = "N")]
        jobs: Option<usize>,
    },
    /// Re-render a bundle's figures from its CSVs and print its table.
    Report {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

/// Failure of a command with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: exit_code(&e), message: e.to_string() }
    }
}

/// 1 for usage and configuration errors, 3 for numeric failures, 2 for data
/// and format problems.
pub fn exit_code(e: &Error) -> u8 {
    use dkl_core::tensor::TensorError;
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) | Error::UndefinedMetric(_) => 3,
        Error::Tensor(TensorError::NotPositiveDefinite { .. } | TensorError::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

pub fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Generate { config, out, force } => cmd_generate(&config.resolve()?, &out, force)?,
        Command::Preprocess { cohort, out, force } => {
            cmd_preprocess(&cohort, out.as_deref(), force)?;
        }
        Command::Train { config, cohort, model, out, force } => {
            cmd_train(&config.resolve()?, cohort.as_deref(), model, &out, force)?;
        }
        Command::Evaluate { checkpoint, cohort, split, mode, seed, out } => {
            let report = cmd_evaluate(&checkpoint, &cohort, &split, mode, seed)?;
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            println!("{text}");
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
        Command::Experiment { config, runs, model, cohort, out, force, jobs } => {
            let mut c = config.resolve()?;
            if let Some(n) = runs {
                c.runs = n;
            }
            if !model.is_empty() {
                c.models = model;
            }
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let result = cmd_experiment(&c, cohort.as_deref(), &out, force, jobs)?;
            print_table(&bundle::read_aggregate(&out)?);
            if let Some(f) = result.failures.first() {
                let code = if result.failures.iter().any(|f| f.numeric) { 3 } else { 2 };
                return Err(Failure {
                    code,
                    message: format!("{} run(s) failed; first: {} run {}: {}", result.failures.len(), f.model, f.run, f.error),
                });
            }
        }
        Command::Report { out } => {
            bundle::render_figures(&out)?;
            print_table(&bundle::read_aggregate(&out)?);
        }
    }
    Ok(())
}

fn print_table(rows: &[(String, Vec<f64>)]) {
    println!("{:<9} {:>4}  {:>15}  {:>15}  {:>15}  {:>15}", "model", "runs", "AUC-ROC", "AUC-PR", "Brier", "unsharpness");
    for (model, v) in rows {
        println!(
            "{model:<9} {:>4}  {:>7.3} ± {:<5.3}  {:>7.3} ± {:<5.3}  {:>7.4} ± {:<5.4}  {:>7.4} ± {:<5.4}",
            v[0], v[5], v[6], v[7], v[8], v[9], v[10], v[11], v[12]
        );
    }
}

/// Generates the cohort of `config` into `out`.
pub fn cmd_generate(config: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    config.cohort.validate()?;
    if out.join("cohort.json").exists() || out.join("index.csv").exists() {
        if !force {
            return Err(Error::Config(format!("{} already holds a cohort (pass --force to replace it)", out.display())));
        }
        for f in ["cohort.json", "index.csv", "processed.bin"] {
            let p = out.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(io(&p))?;
            }
        }
        let eps = out.join("episodes");
        if eps.is_dir() {
            fs::remove_dir_all(&eps).map_err(io(&eps))?;
        }
    }
    let cohort = generate_cohort(&config.cohort, config.seed)?;
    let manifest = CohortManifest::new(cohort.len(), Some(config.seed), Some(config.cohort.clone()));
    write_cohort(out, &manifest, &cohort)?;
    progress(&format!("wrote {} episodes to {}", cohort.len(), out.display()));
    Ok(())
}

pub fn cmd_preprocess(cohort: &Path, out: Option<&Path>, force: bool) -> Result<PathBuf> {
    let path = out.map_or_else(|| processed_path(cohort), Path::to_path_buf);
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists (pass --force to overwrite)", path.display())));
    }
    let (_, raw) = read_cohort(cohort)?;
    let processed = raw.iter().map(preprocess_episode).collect::<Result<Vec<_>>>()?;
    write_processed(&path, &processed)?;
    progress(&format!("wrote {} ({} episodes, {PROCESSED_SCHEMA})", path.display(), processed.len()));
    Ok(path)
}

/// Un-normalized episodes of a cohort directory, from its processed cache
/// when one matches the manifest.
pub fn load_cohort(dir: &Path) -> Result<(CohortManifest, Vec<ProcessedEpisode>)> {
    let manifest = read_manifest(dir)?;
    let cache = processed_path(dir);
    if cache.exists() {
        let eps = read_processed(&cache)?;
        if eps.len() == manifest.episodes {
            return Ok((manifest, eps));
        }
        progress(&format!("ignoring stale {}", cache.display()));
    }
    let (manifest, raw) = read_cohort(dir)?;
    let eps = raw.iter().map(preprocess_episode).collect::<Result<Vec<_>>>()?;
    Ok((manifest, eps))
}

fn cohort_for(config: &ExperimentConfig, dir: Option<&Path>) -> Result<(CohortSource, Vec<ProcessedEpisode>)> {
    match dir {
        Some(d) => {
            let (manifest, eps) = load_cohort(d)?;
            Ok((CohortSource::Directory { episodes: eps.len(), generator_seed: manifest.seed }, eps))
        }
        None => {
            let raw = generate_cohort(&config.cohort, config.seed)?;
            let eps = raw.iter().map(preprocess_episode).collect::<Result<Vec<_>>>()?;
            Ok((CohortSource::Generated, eps))
        }
    }
}

/// Outcome of `dkl train`, written next to the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: ModelKind,
    pub mode: SplitMode,
    pub seed: u64,
    pub cohort: CohortSource,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub history: Vec<EpochLog>,
    pub validation: MetricsReport,
}

pub fn cmd_train(
    config: &ExperimentConfig,
    cohort: Option<&Path>,
    model: ModelKind,
    out: &Path,
    force: bool,
) -> Result<TrainSummary> {
    config.validate()?;
    let ckpt_path = out.join("checkpoint.json");
    if ckpt_path.exists() && !force {
        return Err(Error::Config(format!("{} exists (pass --force to overwrite)", ckpt_path.display())));
    }
    let (source, eps) = cohort_for(config, cohort)?;
    let prep = prepare_splits(&eps, config.mode, config.seed)?;
    let train_cfg = TrainConfig { model, seed: config.seed, ..config.train.clone() };
    progress(&format!(
        "training {} on {} episodes ({} validation)",
        model.label(),
        prep.train.len(),
        prep.val.len()
    ));
    let result = train_model(&train_cfg, &prep.train, &prep.val)?;
    let mut ckpt = result.checkpoint;
    ckpt.norm = Some(prep.norm);
    let val: Vec<&ProcessedEpisode> = prep.val.iter().collect();
    let (_, validation) = evaluate_model(&ckpt.params, &ckpt.train, &val, "validation", &config.metrics)?;
    fs::create_dir_all(out).map_err(io(out))?;
    ckpt.save(&ckpt_path)?;
    let summary = TrainSummary {
        model,
        mode: config.mode,
        seed: config.seed,
        cohort: source,
        best_epoch: result.best_epoch,
        best_val_auc: result.best_val_auc,
        history: result.history,
        validation,
    };
    write_json(&out.join("train.json"), &summary)?;
    progress(&format!("best epoch {} (validation AUC-ROC {:.4})", summary.best_epoch, summary.best_val_auc));
    Ok(summary)
}

pub fn cmd_evaluate(checkpoint: &Path, cohort: &Path, split_name: &str, mode: SplitMode, seed: u64) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (_, eps) = load_cohort(cohort)?;
    let eras: Vec<Era> = eps.iter().map(|e| e.era).collect();
    let splits = split(&eras, mode, seed)?;
    let idx = splits.by_name(split_name)?;
    let selected = idx
        .iter()
        .map(|&i| match &ckpt.norm {
            Some(norm) => apply_norm(&eps[i], norm),
            None => Ok(eps[i].clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<_> = selected.iter().map(|e| &e.x).collect();
    let probabilities = ckpt.predict(&xs)?;
    let outcomes = selected.iter().map(|e| e.label == 1).collect();
    let cohort_name = if split_name == "val" { "validation" } else { split_name };
    evaluate(&PredictionSet::new(probabilities, outcomes, cohort_name)?, &MetricsOptions::default())
}

/// Runs the experiment and writes its bundle to `out`.
pub fn cmd_experiment(
    config: &ExperimentConfig,
    cohort: Option<&Path>,
    out: &Path,
    force: bool,
    jobs: usize,
) -> Result<ExperimentResult> {
    config.validate()?;
    bundle::prepare_dir(out, force)?;
    let (source, eps) = cohort_for(config, cohort)?;
    let prep = prepare_splits(&eps, config.mode, config.seed)?;
    progress(&format!(
        "{} split: {} train, {} validation, {} test; {} run(s) of {} model kind(s)",
        config.mode.as_str(),
        prep.train.len(),
        prep.val.len(),
        prep.test.len(),
        config.runs,
        config.models.len()
    ));
    let data = ExperimentData { train: &prep.train, val: &prep.val, test: &prep.test };
    let mut result =
        run_experiment(&config.train, &config.models, config.runs, config.seed, &data, &config.metrics, jobs, &progress)?;
    for (_, _, ckpt) in &mut result.best {
        ckpt.norm = Some(prep.norm.clone());
    }
    let outcomes: Vec<bool> = prep.test.iter().map(|e| e.label == 1).collect();
    let bundle_cfg = BundleConfig { config: config.clone(), cohort: source, split: prep.splits.sizes() };
    bundle::write_bundle(out, &bundle_cfg, &result, &outcomes)?;
    progress(&format!("report bundle written to {}", out.display()));
    Ok(result)
}
