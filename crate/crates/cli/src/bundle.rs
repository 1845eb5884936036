//! Report bundle of an experiment: configuration, aggregate table, per-run
//! records, best checkpoints, curve CSVs, figures and a summary.
//!
//! ```text
//! config.json            resolved configuration, master seed included
//! aggregate.csv          one row per model kind, mean and std columns
//! summary.json           Brier, Cox fits with intervals, unsharpness
//! runs/<model>-runNN.json
//! checkpoints/<model>.json   best-validation run of each kind
//! curves/<model>-roc.csv, curves/<model>-reliability.csv
//! figures/roc.svg, figures/calibration.svg
//! ```
//!
//! Figures are rendered from the curve CSVs alone, so `dkl report` can
//! regenerate them.

use std::fs;
use std::path::{Path, PathBuf};

use dkl_core::data::{write_json, SplitSizes};
use dkl_core::metrics::{reliability_bins, roc_curve_points, CoxFit, MetricsOptions, PredictionSet};
use dkl_core::train::{AggregateRow, ExperimentResult, MeanStd, ModelKind, RunFailure, RunRecord};
use dkl_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::plot::{calibration_svg, roc_svg, Series};

pub const SUMMARY_SCHEMA: &str = "dkl-summary/v1";

/// Models whose curves and figures are emitted when they were run.
pub const HEADLINE: [ModelKind; 2] = [ModelKind::BiLstm, ModelKind::Dkl];

/// Where the experiment's episodes came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum CohortSource {
    /// Drawn from `config.cohort` with the master seed.
    Generated,
    /// Read from a cohort directory; its manifest's generator seed if known.
    Directory { episodes: usize, generator_seed: Option<u64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub config: ExperimentConfig,
    pub cohort: CohortSource,
    pub split: SplitSizes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub auc_roc: f64,
    pub brier: f64,
    pub unsharpness: f64,
    pub cox: CoxFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: ModelKind,
    pub runs: usize,
    pub auc_roc: MeanStd,
    pub auc_pr: MeanStd,
    pub brier: MeanStd,
    pub unsharpness: MeanStd,
    pub cox_intercept: MeanStd,
    pub cox_slope: MeanStd,
    /// Run with the highest validation AUC-ROC.
    pub best_run: Option<usize>,
    pub per_run: Vec<RunSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub mode: String,
    pub seed: u64,
    pub models: Vec<ModelSummary>,
    pub failures: Vec<RunFailure>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Readies `dir` for a new bundle. A non-empty directory is refused unless
/// `force`, in which case the bundle's own subdirectories are cleared.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io(dir))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!("{} is not empty (pass --force to overwrite)", dir.display())));
        }
        for sub in ["runs", "checkpoints", "curves", "figures"] {
            let p = dir.join(sub);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(io(&p))?;
            }
        }
    }
    for sub in ["", "runs", "checkpoints", "curves", "figures"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io(&p))?;
    }
    Ok(())
}

pub fn run_file(record: &RunRecord) -> String {
    format!("{}-run{:02}.json", record.model, record.run)
}

const AGGREGATE_HEADER: [&str; 18] = [
    "model",
    "runs",
    "val_auc_roc_mean",
    "val_auc_roc_std",
    "val_auc_pr_mean",
    "val_auc_pr_std",
    "test_auc_roc_mean",
    "test_auc_roc_std",
    "test_auc_pr_mean",
    "test_auc_pr_std",
    "test_brier_mean",
    "test_brier_std",
    "test_unsharpness_mean",
    "test_unsharpness_std",
    "test_cox_intercept_mean",
    "test_cox_intercept_std",
    "test_cox_slope_mean",
    "test_cox_slope_std",
];

fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGGREGATE_HEADER)?;
    for r in rows {
        let mut rec = vec![r.model.label().to_string(), r.runs.to_string()];
        for m in [
            &r.val_auc_roc,
            &r.val_auc_pr,
            &r.test_auc_roc,
            &r.test_auc_pr,
            &r.test_brier,
            &r.test_unsharpness,
            &r.test_cox_intercept,
            &r.test_cox_slope,
        ] {
            rec.push(m.mean.to_string());
            rec.push(m.std.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(io(path))
}

fn summarize(config: &ExperimentConfig, result: &ExperimentResult) -> Summary {
    let models = result
        .aggregate
        .iter()
        .map(|row| {
            let per_run: Vec<RunSummary> = result
                .runs
                .iter()
                .filter(|r| r.model == row.model)
                .map(|r| RunSummary {
                    run: r.run,
                    seed: r.seed,
                    best_epoch: r.best_epoch,
                    auc_roc: r.test.auc_roc,
                    brier: r.test.brier,
                    unsharpness: r.test.unsharpness,
                    cox: r.test.cox.clone(),
                })
                .collect();
            ModelSummary {
                model: row.model,
                runs: row.runs,
                auc_roc: row.test_auc_roc,
                auc_pr: row.test_auc_pr,
                brier: row.test_brier,
                unsharpness: row.test_unsharpness,
                cox_intercept: row.test_cox_intercept,
                cox_slope: row.test_cox_slope,
                best_run: result.best_run(row.model).map(|r| r.run),
                per_run,
            }
        })
        .collect();
    Summary {
        schema: SUMMARY_SCHEMA.into(),
        mode: config.mode.as_str().into(),
        seed: config.seed,
        models,
        failures: result.failures.clone(),
    }
}

fn curve_paths(dir: &Path, model: ModelKind) -> (PathBuf, PathBuf) {
    let curves = dir.join("curves");
    (curves.join(format!("{model}-roc.csv")), curves.join(format!("{model}-reliability.csv")))
}

fn write_curves(dir: &Path, record: &RunRecord, outcomes: &[bool], options: &MetricsOptions) -> Result<()> {
    let preds = PredictionSet::new(record.test_probabilities.clone(), outcomes.to_vec(), "test")?;
    let (roc_path, rel_path) = curve_paths(dir, record.model);
    let mut w = csv::Writer::from_path(&roc_path)?;
    w.write_record(["fpr", "tpr"])?;
    for (x, y) in roc_curve_points(&preds)? {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush().map_err(io(&roc_path))?;
    let bins = reliability_bins(&preds, options.n_bins, options.bin_strategy)?;
    let mut w = csv::Writer::from_path(&rel_path)?;
    w.write_record(["lo", "hi", "count", "mean_predicted", "observed_frequency"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for b in bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string(), opt(b.mean_predicted), opt(b.observed_frequency)])?;
    }
    w.flush().map_err(io(&rel_path))
}

/// Writes the complete bundle. `outcomes` are the test labels in the order
/// of each run's `test_probabilities`.
pub fn write_bundle(dir: &Path, bundle: &BundleConfig, result: &ExperimentResult, outcomes: &[bool]) -> Result<()> {
    write_json(&dir.join("config.json"), bundle)?;
    write_aggregate(&dir.join("aggregate.csv"), &result.aggregate)?;
    for r in &result.runs {
        write_json(&dir.join("runs").join(run_file(r)), r)?;
    }
    for (model, _, ckpt) in &result.best {
        ckpt.save(&dir.join("checkpoints").join(format!("{model}.json")))?;
    }
    let kinds: Vec<ModelKind> = result.best.iter().map(|(k, _, _)| *k).collect();
    for model in figure_models(&kinds) {
        if let Some(best) = result.best_run(model) {
            write_curves(dir, best, outcomes, &bundle.config.metrics)?;
        }
    }
    write_json(&dir.join("summary.json"), &summarize(&bundle.config, result))?;
    render_figures(dir)
}

/// The headline models if any were run, otherwise every model run.
fn figure_models(kinds: &[ModelKind]) -> Vec<ModelKind> {
    let headline: Vec<ModelKind> = HEADLINE.iter().copied().filter(|k| kinds.contains(k)).collect();
    if headline.is_empty() { kinds.to_vec() } else { headline }
}

fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records().map(|rec| rec.map_err(Error::from)).collect()
}

fn parse(path: &Path, field: &str) -> Result<f64> {
    field.parse().map_err(|_| Error::Format(format!("{}: bad number {field:?}", path.display())))
}

/// Renders `figures/roc.svg` and `figures/calibration.svg` from the curve
/// CSVs present in the bundle.
pub fn render_figures(dir: &Path) -> Result<()> {
    let mut roc = Vec::new();
    let mut calibration = Vec::new();
    for model in ModelKind::ALL {
        let (roc_path, rel_path) = curve_paths(dir, model);
        if !roc_path.exists() || !rel_path.exists() {
            continue;
        }
        let points = read_rows(&roc_path)?
            .iter()
            .map(|r| Ok((parse(&roc_path, &r[0])?, parse(&roc_path, &r[1])?)))
            .collect::<Result<Vec<_>>>()?;
        roc.push(Series { name: model.label().into(), points });
        let mut points = Vec::new();
        for r in read_rows(&rel_path)? {
            if !r[3].is_empty() && !r[4].is_empty() {
                points.push((parse(&rel_path, &r[3])?, parse(&rel_path, &r[4])?));
            }
        }
        calibration.push(Series { name: model.label().into(), points });
    }
    if roc.is_empty() {
        return Err(Error::Format(format!("{} holds no curve CSVs", dir.join("curves").display())));
    }
    let figures = dir.join("figures");
    fs::create_dir_all(&figures).map_err(io(&figures))?;
    let roc_path = figures.join("roc.svg");
    fs::write(&roc_path, roc_svg(&roc)).map_err(io(&roc_path))?;
    let cal_path = figures.join("calibration.svg");
    fs::write(&cal_path, calibration_svg(&calibration)).map_err(io(&cal_path))
}

/// Reads `aggregate.csv` back as `(model label, columns)`.
pub fn read_aggregate(dir: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let path = dir.join("aggregate.csv");
    read_rows(&path)?
        .iter()
        .map(|r| {
            let values = r.iter().skip(1).map(|f| parse(&path, f)).collect::<Result<Vec<_>>>()?;
            Ok((r[0].to_string(), values))
        })
        .collect()
}

pub fn aggregate_header() -> &'static [&'static str] {
    &AGGREGATE_HEADER
}
