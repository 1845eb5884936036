//! Optimization loop, model selection and multi-run experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{NormStats, ProcessedEpisode};
use crate::error::{Error, Result};
use crate::gp::{elbo, predict_marginals, predict_proba, RbfKernel, RbfKernelParams, Variational, VariationalState};
use crate::metrics::{auc_roc, evaluate, MetricsOptions, MetricsReport, PredictionSet};
use crate::nn::{
    baseline_logit, dropout_mask, extract_features, feature_extract, time_major, Extractor, ExtractorConfig,
    ExtractorParams, Linear, LinearParams,
};
use crate::params::ParamTree;
use crate::quadrature::GaussHermite;
use crate::tensor::{Tape, Tensor, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_SCHEMA: &str = "dkl-checkpoint/v1";
/// Episodes per forward pass when predicting.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lstm,
    #[serde(rename = "bilstm")]
    BiLstm,
    DklLstm,
    Dkl,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Lstm, ModelKind::BiLstm, ModelKind::DklLstm, ModelKind::Dkl];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::BiLstm => "bilstm",
            ModelKind::DklLstm => "dkl-lstm",
            ModelKind::Dkl => "dkl",
        }
    }

    /// Display name used in tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Lstm => "LSTM",
            ModelKind::BiLstm => "BiLSTM",
            ModelKind::DklLstm => "DKL-LSTM",
            ModelKind::Dkl => "DKL",
        }
    }

    pub fn is_bidirectional(self) -> bool {
        matches!(self, ModelKind::BiLstm | ModelKind::Dkl)
    }

    pub fn is_dkl(self) -> bool {
        matches!(self, ModelKind::DklLstm | ModelKind::Dkl)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?} (expected lstm, bilstm, dkl-lstm or dkl)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub encoder_size: usize,
    pub hidden_size: usize,
    pub feature_dim: usize,
    pub num_inducing: usize,
    /// One RBF lengthscale per feature dimension.
    pub ard: bool,
    pub quadrature_nodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Dkl,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 100,
            dropout: 0.3,
            seed: 0,
            encoder_size: 16,
            hidden_size: 16,
            feature_dim: 16,
            num_inducing: 100,
            ard: false,
            quadrature_nodes: crate::quadrature::DEFAULT_NODES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.model.is_dkl() && (self.num_inducing == 0 || self.quadrature_nodes == 0) {
            return Err(Error::Config("DKL models need inducing points and quadrature nodes".into()));
        }
        self.extractor_config(1).validate()
    }

    pub fn extractor_config(&self, input_dim: usize) -> ExtractorConfig {
        ExtractorConfig {
            input_dim,
            encoder_size: self.encoder_size,
            hidden_size: self.hidden_size,
            bidirectional: self.model.is_bidirectional(),
            dropout_rate: self.dropout,
            feature_dim: self.feature_dim,
        }
    }
}

/// Prediction head on top of the extracted features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head<T> {
    Linear(Linear<T>),
    Gp { kernel: RbfKernel<T>, variational: Variational<T> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model<T> {
    pub extractor: Extractor<T>,
    pub head: Head<T>,
}

pub type ModelParams = Model<Tensor>;

impl<T> Model<T> {
    /// Maps every leaf, calling `f` in [`ParamTree`] order.
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Model<U> {
        let extractor = self.extractor.map(f);
        let head = match &self.head {
            Head::Linear(l) => Head::Linear(l.map(f)),
            Head::Gp { kernel, variational } => Head::Gp {
                kernel: kernel.map(f),
                variational: variational.map(f),
            },
        };
        Model { extractor, head }
    }
}

impl<T> ParamTree<T> for Model<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        self.extractor.visit(f);
        match &self.head {
            Head::Linear(l) => l.visit(f),
            Head::Gp { kernel, variational } => {
                kernel.visit(f);
                variational.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.extractor.visit_mut(f);
        match &mut self.head {
            Head::Linear(l) => l.visit_mut(f),
            Head::Gp { kernel, variational } => {
                kernel.visit_mut(f);
                variational.visit_mut(f);
            }
        }
    }
}

impl<T> ParamTree<T> for Vec<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        self.iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.iter_mut().for_each(f);
    }
}

impl ModelParams {
    /// Leaf names in [`ParamTree`] order.
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["input_linear.weight", "input_linear.bias"]
            .into_iter()
            .map(String::from)
            .collect();
        let mut lstm = |prefix: &str| {
            for leaf in ["w_ih", "w_hh", "bias"] {
                out.push(format!("{prefix}.{leaf}"));
            }
        };
        lstm("forward_lstm");
        if self.extractor.is_bidirectional() {
            lstm("backward_lstm");
        }
        out.extend(["combine_linear.weight", "combine_linear.bias"].map(String::from));
        match &self.head {
            Head::Linear(_) => out.extend(["head.weight", "head.bias"].map(String::from)),
            Head::Gp { .. } => out.extend(
                [
                    "kernel.log_lengthscale",
                    "kernel.log_outputscale",
                    "variational.inducing",
                    "variational.mean",
                    "variational.chol_raw",
                ]
                .map(String::from),
            ),
        }
        out
    }
}

/// Adam moments, one pair per parameter leaf.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    names: Vec<String>,
}

impl AdamState {
    pub fn new<P: ParamTree<Tensor>>(params: &P) -> Self {
        let leaves = params.leaves();
        let zeros: Vec<Tensor> = leaves.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let names = (0..leaves.len()).map(|i| format!("parameter {i}")).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, names }
    }

    /// Names used in error messages, in leaf order.
    pub fn with_names(mut self, names: Vec<String>) -> Self {
        assert_eq!(names.len(), self.m.len(), "one name per parameter");
        self.names = names;
        self
    }

    /// One bias-corrected Adam update. Nothing is modified when any gradient
    /// is non-finite.
    pub fn step<P: ParamTree<Tensor>>(&mut self, params: &mut P, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Config(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() {
                return Err(Error::Config(format!(
                    "gradient of {} has shape {:?}, parameter has {:?}",
                    self.names[i],
                    g.shape(),
                    self.m[i].shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {}", self.names[i])));
            }
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |p| {
            let (m, v, g) = (m[i].data_mut(), v[i].data_mut(), grads[i].data());
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            }
            i += 1;
        });
        Ok(())
    }
}

/// Self-contained trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub train: TrainConfig,
    pub extractor: ExtractorConfig,
    /// Normalization the model expects its inputs to have been given.
    pub norm: Option<NormStats>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::data::write_json(path, self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), e.line())))?;
        let found = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
        if found != CHECKPOINT_SCHEMA {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_SCHEMA.into(),
                found: found.into(),
            });
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        ckpt.params.extractor.validate()?;
        if let Head::Gp { variational, .. } = &ckpt.params.head {
            variational.validate(ckpt.params.extractor.feature_dim())?;
        }
        Ok(ckpt)
    }

    /// Event probabilities for episodes that are already normalized.
    pub fn predict(&self, episodes: &[&Tensor]) -> Result<Vec<f64>> {
        predict(&self.params, &self.train, episodes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-instance training loss over the epoch's minibatches.
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub history: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
}

/// Initial parameters for a model kind. DKL inducing locations are the
/// features of the first `num_inducing` training episodes under the fresh
/// extractor, resampled with replacement when there are fewer episodes.
pub fn init_model<R: Rng>(config: &TrainConfig, train: &[&Tensor], rng: &mut R) -> Result<ModelParams> {
    let first = train.first().ok_or_else(|| Error::Config("empty training set".into()))?;
    let ext_cfg = config.extractor_config(first.cols());
    let extractor = ExtractorParams::init(&ext_cfg, rng)?;
    let head = if config.model.is_dkl() {
        let m = config.num_inducing;
        let picks: Vec<&Tensor> = if train.len() >= m {
            train[..m].to_vec()
        } else {
            (0..m).map(|_| train[rng.random_range(0..train.len())]).collect()
        };
        let mut rows = Vec::with_capacity(m * config.feature_dim);
        for chunk in picks.chunks(EVAL_CHUNK) {
            rows.extend_from_slice(extract_features(&extractor, chunk)?.data());
        }
        Head::Gp {
            kernel: RbfKernelParams::unit(config.feature_dim, config.ard),
            variational: VariationalState::prior(Tensor::matrix(m, config.feature_dim, rows)?),
        }
    } else {
        Head::Linear(LinearParams::init(config.feature_dim, 1, rng))
    };
    Ok(Model { extractor, head })
}

/// Event probabilities in evaluation mode (no dropout).
pub fn predict(params: &ModelParams, config: &TrainConfig, episodes: &[&Tensor]) -> Result<Vec<f64>> {
    let rule = match &params.head {
        Head::Gp { .. } => Some(GaussHermite::new(config.quadrature_nodes)?),
        Head::Linear(_) => None,
    };
    let mut out = Vec::with_capacity(episodes.len());
    for chunk in episodes.chunks(EVAL_CHUNK) {
        let features = extract_features(&params.extractor, chunk)?;
        match &params.head {
            Head::Linear(head) => {
                let logits = features.matmul(&head.weight.transpose())?;
                let b = head.bias.item();
                out.extend(logits.data().iter().map(|z| sigmoid(z + b)));
            }
            Head::Gp { kernel, variational } => {
                let pred = predict_marginals(kernel, variational, &features)?;
                out.extend(predict_proba(&pred, rule.as_ref().expect("gp rule")));
            }
        }
    }
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn prediction_set(probabilities: Vec<f64>, episodes: &[&ProcessedEpisode], cohort: &str) -> Result<PredictionSet> {
    let outcomes = episodes.iter().map(|e| e.label == 1).collect();
    PredictionSet::new(probabilities, outcomes, cohort)
}

/// Predictions and the full metric battery for a set of episodes.
pub fn evaluate_model(
    params: &ModelParams,
    config: &TrainConfig,
    episodes: &[&ProcessedEpisode],
    cohort: &str,
    options: &MetricsOptions,
) -> Result<(PredictionSet, MetricsReport)> {
    let xs: Vec<&Tensor> = episodes.iter().map(|e| &e.x).collect();
    let preds = prediction_set(predict(params, config, &xs)?, episodes, cohort)?;
    let report = evaluate(&preds, options)?;
    Ok((preds, report))
}

/// One minibatch loss: mean binary cross-entropy, or −ELBO with the
/// likelihood term scaled to `n_total` instances. `mask` is an inverted
/// dropout mask on the encoder output and `rule` is required for DKL heads.
pub fn batch_loss<'t>(
    tape: &'t Tape,
    params: &Model<Var<'t>>,
    batch: &[&ProcessedEpisode],
    mask: Option<&Tensor>,
    n_total: usize,
    rule: Option<&GaussHermite>,
) -> Result<Var<'t>> {
    let xs: Vec<&Tensor> = batch.iter().map(|e| &e.x).collect();
    let x = tape.constant(time_major(&xs)?);
    let labels: Vec<f64> = batch.iter().map(|e| f64::from(e.label)).collect();
    let b = batch.len();
    match &params.head {
        Head::Linear(head) => {
            let logits = baseline_logit(&params.extractor, head, x, b, mask)?;
            Ok(logits.bce_with_logits(&Tensor::column(labels))?.mean()?)
        }
        Head::Gp { kernel, variational } => {
            let features = feature_extract(&params.extractor, x, b, mask)?;
            let bound = elbo(kernel, variational, features, &labels, n_total, rule.ok_or_else(|| Error::Config("a DKL loss needs a quadrature rule".into()))?)?;
            Ok(bound.scale(-1.0)?)
        }
    }
}

pub fn train_model(config: &TrainConfig, train: &[ProcessedEpisode], val: &[ProcessedEpisode]) -> Result<RunResult> {
    train_model_observed(config, train, val, &mut |_, _| {})
}

/// [`train_model`] with a callback receiving each epoch's log and the
/// parameters at the end of that epoch.
pub fn train_model_observed(
    config: &TrainConfig,
    train: &[ProcessedEpisode],
    val: &[ProcessedEpisode],
    observer: &mut dyn FnMut(&EpochLog, &ModelParams),
) -> Result<RunResult> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty sets, got {} train and {} validation episodes",
            train.len(),
            val.len()
        )));
    }
    let shape = train[0].x.shape().to_vec();
    if let Some(bad) = train.iter().chain(val).find(|e| e.x.shape() != shape.as_slice()) {
        return Err(Error::Config(format!("episode {} has shape {:?}, expected {shape:?}", bad.id, bad.x.shape())));
    }
    let steps = shape[0];
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(k);
        rng
    };
    let (mut init_rng, mut shuffle_rng, mut dropout_rng) = (stream(0), stream(1), stream(2));

    let train_x: Vec<&Tensor> = train.iter().map(|e| &e.x).collect();
    let mut params = init_model(config, &train_x, &mut init_rng)?;
    let ext_cfg = config.extractor_config(shape[1]);
    let mut adam = AdamState::new(&params).with_names(params.names());
    let rule = if config.model.is_dkl() { Some(GaussHermite::new(config.quadrature_nodes)?) } else { None };
    let val_refs: Vec<&ProcessedEpisode> = val.iter().collect();

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&ProcessedEpisode> = idx.iter().map(|&i| &train[i]).collect();
            let mask = if config.dropout > 0.0 {
                Some(dropout_mask(config.dropout, &[steps * batch.len(), config.encoder_size], &mut dropout_rng)?)
            } else {
                None
            };
            let tape = Tape::new();
            let vars = params.map(&mut |t| tape.param(t.clone()));
            let loss = batch_loss(&tape, &vars, &batch, mask.as_ref(), train.len(), rule.as_ref())?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at epoch {epoch}, batch {}", bi + 1)));
            }
            let grads = tape.backward(loss)?;
            let mut flat = Vec::new();
            vars.visit(&mut |v| flat.push(grads.wrt(*v)));
            adam.step(&mut params, &flat, config.learning_rate)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {}: {e}", bi + 1)))?;
            loss_sum += if config.model.is_dkl() { value / train.len() as f64 } else { value };
            batches += 1;
        }
        let xs: Vec<&Tensor> = val_refs.iter().map(|e| &e.x).collect();
        let val_auc = auc_roc(&prediction_set(predict(&params, config, &xs)?, &val_refs, "validation")?)?;
        let log = EpochLog { epoch, train_loss: loss_sum / batches as f64, val_auc };
        observer(&log, &params);
        history.push(log);
        if best.as_ref().is_none_or(|(_, auc, _)| val_auc > *auc) {
            best = Some((epoch, val_auc, params.clone()));
        }
    }
    let (best_epoch, best_val_auc, best_params) = best.expect("at least one epoch");
    Ok(RunResult {
        best_epoch,
        best_val_auc,
        history,
        checkpoint: Checkpoint {
            schema: CHECKPOINT_SCHEMA.into(),
            train: config.clone(),
            extractor: ext_cfg,
            norm: None,
            best_epoch,
            best_val_auc,
            params: best_params,
        },
    })
}

/// Mean and sample standard deviation; a single value has std 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: ModelKind,
    pub run: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub history: Vec<EpochLog>,
    pub validation: MetricsReport,
    pub test: MetricsReport,
    pub test_probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub model: ModelKind,
    pub run: usize,
    pub seed: u64,
    pub error: String,
    /// Exit-code class of the failure: `numeric` or `data`.
    pub numeric: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: ModelKind,
    pub runs: usize,
    pub single_run: bool,
    pub val_auc_roc: MeanStd,
    pub val_auc_pr: MeanStd,
    pub test_auc_roc: MeanStd,
    pub test_auc_pr: MeanStd,
    pub test_brier: MeanStd,
    pub test_unsharpness: MeanStd,
    pub test_cox_intercept: MeanStd,
    pub test_cox_slope: MeanStd,
}

/// Per-model aggregates over completed runs, in [`ModelKind`] order.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut kinds: Vec<ModelKind> = records.iter().map(|r| r.model).collect();
    kinds.sort();
    kinds.dedup();
    kinds
        .into_iter()
        .map(|model| {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.model == model).collect();
            let stat = |f: &dyn Fn(&RunRecord) -> f64| MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            AggregateRow {
                model,
                runs: rs.len(),
                single_run: rs.len() == 1,
                val_auc_roc: stat(&|r| r.validation.auc_roc),
                val_auc_pr: stat(&|r| r.validation.auc_pr),
                test_auc_roc: stat(&|r| r.test.auc_roc),
                test_auc_pr: stat(&|r| r.test.auc_pr),
                test_brier: stat(&|r| r.test.brier),
                test_unsharpness: stat(&|r| r.test.unsharpness),
                test_cox_intercept: stat(&|r| r.test.cox.intercept),
                test_cox_slope: stat(&|r| r.test.cox.slope),
            }
        })
        .collect()
}

pub struct ExperimentData<'a> {
    pub train: &'a [ProcessedEpisode],
    pub val: &'a [ProcessedEpisode],
    pub test: &'a [ProcessedEpisode],
}

pub struct ExperimentResult {
    /// Completed runs ordered by model kind, then run index.
    pub runs: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub aggregate: Vec<AggregateRow>,
    /// Checkpoint of each model kind's best-validation run.
    pub best: Vec<(ModelKind, usize, Checkpoint)>,
}

impl ExperimentResult {
    /// Best-validation run of a model kind (earliest run on ties).
    pub fn best_run(&self, model: ModelKind) -> Option<&RunRecord> {
        let (_, run, _) = self.best.iter().find(|(k, _, _)| *k == model)?;
        self.runs.iter().find(|r| r.model == model && r.run == *run)
    }
}

/// Trains every model kind `n_runs` times with seeds `seed0 + run` on a pool
/// of `jobs` threads, then evaluates each best-epoch checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    template: &TrainConfig,
    kinds: &[ModelKind],
    n_runs: usize,
    seed0: u64,
    data: &ExperimentData<'_>,
    options: &MetricsOptions,
    jobs: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<ExperimentResult> {
    if n_runs == 0 {
        return Err(Error::Config("at least one run is required".into()));
    }
    if kinds.is_empty() {
        return Err(Error::Config("no model kinds selected".into()));
    }
    if data.test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let tasks: Vec<(ModelKind, usize)> =
        kinds.iter().flat_map(|&k| (0..n_runs).map(move |r| (k, r))).collect();
    let one = |&(model, run): &(ModelKind, usize)| -> std::result::Result<(RunRecord, Checkpoint), RunFailure> {
        let seed = seed0.wrapping_add(run as u64);
        let config = TrainConfig { model, seed, ..template.clone() };
        let outcome = (|| {
            let result = train_model(&config, data.train, data.val)?;
            let params = &result.checkpoint.params;
            let val: Vec<&ProcessedEpisode> = data.val.iter().collect();
            let test: Vec<&ProcessedEpisode> = data.test.iter().collect();
            let (_, validation) = evaluate_model(params, &config, &val, "validation", options)?;
            let (preds, test) = evaluate_model(params, &config, &test, "test", options)?;
            Ok::<_, Error>((
                RunRecord {
                    model,
                    run,
                    seed,
                    config: config.clone(),
                    best_epoch: result.best_epoch,
                    best_val_auc: result.best_val_auc,
                    history: result.history,
                    validation,
                    test,
                    test_probabilities: preds.probabilities,
                },
                result.checkpoint,
            ))
        })();
        match outcome {
            Ok((record, ckpt)) => {
                progress(&format!(
                    "{} run {} (seed {seed}): best epoch {}, val AUC {:.4}, test AUC {:.4}",
                    model.label(),
                    run,
                    record.best_epoch,
                    record.best_val_auc,
                    record.test.auc_roc
                ));
                Ok((record, ckpt))
            }
            Err(e) => {
                progress(&format!("{} run {run} (seed {seed}) failed: {e}", model.label()));
                Err(RunFailure {
                    model,
                    run,
                    seed,
                    numeric: matches!(e, Error::Numeric(_) | Error::Tensor(_)),
                    error: e.to_string(),
                })
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<_> = pool.install(|| tasks.par_iter().map(one).collect());

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut best: Vec<(ModelKind, usize, Checkpoint)> = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok((record, ckpt)) => {
                match best.iter_mut().find(|(k, _, _)| *k == record.model) {
                    Some(slot) if record.best_val_auc > slot.2.best_val_auc => {
                        *slot = (record.model, record.run, ckpt);
                    }
                    Some(_) => {}
                    None => best.push((record.model, record.run, ckpt)),
                }
                runs.push(record);
            }
            Err(f) => failures.push(f),
        }
    }
    let aggregate = aggregate(&runs);
    Ok(ExperimentResult { runs, failures, aggregate, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Era;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0]), Tensor::scalar(3.0)];
        let before = p.clone();
        let mut adam = AdamState::new(&p);
        let zeros = vec![Tensor::zeros(&[2]), Tensor::scalar(0.0)];
        for _ in 0..5 {
            adam.step(&mut p, &zeros, 1e-3).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::scalar(0.5)];
        let mut adam = AdamState::new(&p);
        adam.step(&mut p, &[Tensor::scalar(1.0)], 1e-3).unwrap();
        let delta = p[0].item() - 0.5;
        assert!((delta + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut adam = AdamState::new(&p);
        for _ in 0..1000 {
            let g = 2.0 * p[0].item();
            adam.step(&mut p, &[Tensor::scalar(g)], 1e-2).unwrap();
        }
        assert!(p[0].item().abs() < 0.05, "{}", p[0].item());
    }

    #[test]
    fn nan_gradient_names_the_parameter_and_changes_nothing() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut adam = AdamState::new(&p).with_names(vec!["alpha".into(), "beta".into()]);
        let err = adam.step(&mut p, &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)], 1e-3).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("beta")), "{err}");
        assert_eq!(p, vec![Tensor::scalar(1.0), Tensor::scalar(2.0)]);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn small_step_decreases_a_smooth_loss() {
        // f(x) = Σ (x_i − c_i)² + x_0 x_1
        let c = [0.3, -1.2, 2.0];
        let f = |x: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + x[0] * x[1];
        let mut p = vec![Tensor::vector(vec![1.0, 1.0, 1.0])];
        let mut adam = AdamState::new(&p);
        for _ in 0..20 {
            let x = p[0].data().to_vec();
            let g = vec![2.0 * (x[0] - c[0]) + x[1], 2.0 * (x[1] - c[1]) + x[0], 2.0 * (x[2] - c[2])];
            let before = f(&x);
            adam.step(&mut p, &[Tensor::vector(g)], 1e-5).unwrap();
            assert!(f(p[0].data()) < before);
        }
    }

    #[test]
    fn model_kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert!("gru".parse::<ModelKind>().is_err());
        assert!(ModelKind::Dkl.is_bidirectional() && !ModelKind::DklLstm.is_bidirectional());
    }

    #[test]
    fn parameter_names_match_leaf_count() {
        let eps = [Tensor::zeros(&[3, 4]), Tensor::ones(&[3, 4])];
        let refs: Vec<&Tensor> = eps.iter().collect();
        for model in ModelKind::ALL {
            let cfg = TrainConfig { model, num_inducing: 3, ..Default::default() };
            let params = init_model(&cfg, &refs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(params.names().len(), params.leaves().len(), "{model}");
        }
    }

    #[test]
    fn sample_std_and_single_run_convention() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[0.7]), MeanStd { mean: 0.7, std: 0.0 });
    }

    #[test]
    fn empty_sets_are_config_errors() {
        let ep = ProcessedEpisode { id: "a".into(), era: Era::A, label: 1, x: Tensor::zeros(&[2, 3]) };
        let cfg = TrainConfig::default();
        assert!(matches!(train_model(&cfg, &[], std::slice::from_ref(&ep)), Err(Error::Config(_))));
        assert!(matches!(train_model(&cfg, std::slice::from_ref(&ep), &[]), Err(Error::Config(_))));
    }
}
