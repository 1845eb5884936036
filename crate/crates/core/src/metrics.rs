//! Evaluation battery for binary risk predictions: discrimination (AUC-ROC,
//! AUC-PR), accuracy (Brier), calibration curves, Cox recalibration and
//! unsharpness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[ε, 1 − ε]` before taking log odds.
pub const LOGIT_CLAMP: f64 = 1e-7;
/// Two-sided 95% normal quantile used for Wald intervals.
pub const Z_95: f64 = 1.96;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub probabilities: Vec<f64>,
    pub outcomes: Vec<bool>,
    pub cohort: String,
}

impl PredictionSet {
    pub fn new(probabilities: Vec<f64>, outcomes: Vec<bool>, cohort: impl Into<String>) -> Result<Self> {
        if probabilities.len() != outcomes.len() {
            return Err(Error::Config(format!(
                "{} probabilities but {} outcomes",
                probabilities.len(),
                outcomes.len()
            )));
        }
        if probabilities.is_empty() {
            return Err(Error::Config("prediction set is empty".into()));
        }
        if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Numeric(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            probabilities,
            outcomes,
            cohort: cohort.into(),
        })
    }

    /// Convenience constructor from 0/1 labels.
    pub fn from_labels(probabilities: Vec<f64>, labels: &[f64], cohort: impl Into<String>) -> Result<Self> {
        Self::new(probabilities, labels.iter().map(|&y| y > 0.5).collect(), cohort)
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.outcomes.iter().filter(|&&y| y).count()
    }

    pub fn prevalence(&self) -> f64 {
        self.positives() as f64 / self.len() as f64
    }

    fn require_both_classes(&self, what: &str) -> Result<(usize, usize)> {
        let pos = self.positives();
        let neg = self.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::UndefinedMetric(format!(
                "{what} needs both classes, got {pos} positives and {neg} negatives"
            )));
        }
        Ok((pos, neg))
    }

    /// Groups of tied scores in descending score order, as (positives, negatives).
    fn descending_groups(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.probabilities[b].total_cmp(&self.probabilities[a]));
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut last = f64::NAN;
        for i in idx {
            let p = self.probabilities[i];
            if p != last || groups.is_empty() {
                groups.push((0, 0));
                last = p;
            }
            let g = groups.last_mut().expect("pushed above");
            if self.outcomes[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// Mann–Whitney AUC: concordant pairs plus half the tied pairs, over `n₊·n₋`.
pub fn auc_roc(preds: &PredictionSet) -> Result<f64> {
    let (pos, neg) = preds.require_both_classes("AUC-ROC")?;
    // walk from the highest score: each positive is concordant with every
    // negative ranked below it and half-credited against tied negatives
    let mut negatives_below = neg as f64;
    let mut sum = 0.0;
    for (p, n) in preds.descending_groups() {
        negatives_below -= n as f64;
        sum += p as f64 * (negatives_below + 0.5 * n as f64);
    }
    Ok(sum / (pos as f64 * neg as f64))
}

/// Average precision: Σ precision × recall increment over tie groups in
/// descending score order.
pub fn auc_pr(preds: &PredictionSet) -> Result<f64> {
    let pos = preds.positives();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUC-PR needs at least one positive".into()));
    }
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for (p, n) in preds.descending_groups() {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (p as f64 / pos as f64);
        }
    }
    Ok(ap)
}

pub fn brier(preds: &PredictionSet) -> f64 {
    let sum: f64 = preds
        .probabilities
        .iter()
        .zip(&preds.outcomes)
        .map(|(&p, &y)| (p - if y { 1.0 } else { 0.0 }).powi(2))
        .sum();
    sum / preds.len() as f64
}

/// `Σ pᵢ(1 − pᵢ) / N`.
pub fn unsharpness(preds: &PredictionSet) -> f64 {
    let sum: f64 = preds.probabilities.iter().map(|&p| p * (1.0 - p)).sum();
    sum / preds.len() as f64
}

/// ROC points `(FPR, TPR)` from `(0, 0)` through one point per distinct score.
pub fn roc_curve_points(preds: &PredictionSet) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = preds.require_both_classes("ROC curve")?;
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (p, n) in preds.descending_groups() {
        tp += p;
        fp += n;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Precision–recall points `(recall, precision)`, one per distinct score.
pub fn pr_curve_points(preds: &PredictionSet) -> Result<Vec<(f64, f64)>> {
    let (pos, _) = preds.require_both_classes("PR curve")?;
    let (mut tp, mut fp) = (0usize, 0usize);
    Ok(preds
        .descending_groups()
        .into_iter()
        .map(|(p, n)| {
            tp += p;
            fp += n;
            (tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect())
}

/// Trapezoidal area under a polyline.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinStrategy {
    #[default]
    EqualWidth,
    Quantile,
}

/// Reliability bin `[lo, hi)`; the last bin also contains `hi`. Means are
/// `None` for empty bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_predicted: Option<f64>,
    pub observed_frequency: Option<f64>,
}

pub fn reliability_bins(preds: &PredictionSet, n_bins: usize, strategy: BinStrategy) -> Result<Vec<ReliabilityBin>> {
    if n_bins < 2 {
        return Err(Error::Config(format!("need at least 2 reliability bins, got {n_bins}")));
    }
    let edges: Vec<f64> = match strategy {
        BinStrategy::EqualWidth => (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect(),
        BinStrategy::Quantile => {
            let mut sorted = preds.probabilities.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let mut e = vec![0.0];
            e.extend((1..n_bins).map(|i| sorted[(i * n / n_bins).min(n - 1)]));
            e.push(1.0);
            e
        }
    };
    let mut count = vec![0usize; n_bins];
    let mut sum_p = vec![0.0; n_bins];
    let mut sum_y = vec![0.0; n_bins];
    for (&p, &y) in preds.probabilities.iter().zip(&preds.outcomes) {
        // last edge whose value is ≤ p, so ties with an interior edge go up
        let k = edges[1..n_bins].partition_point(|&e| e <= p);
        count[k] += 1;
        sum_p[k] += p;
        sum_y[k] += if y { 1.0 } else { 0.0 };
    }
    Ok((0..n_bins)
        .map(|k| {
            let c = count[k];
            let mean = |s: f64| (c > 0).then(|| s / c as f64);
            ReliabilityBin {
                lo: edges[k],
                hi: edges[k + 1],
                count: c,
                mean_predicted: mean(sum_p[k]),
                observed_frequency: mean(sum_y[k]),
            }
        })
        .collect())
}

/// Logistic recalibration `y ~ Bernoulli(σ(α + β·logit p))`.
///
/// Intervals are Wald intervals from the inverse observed information and are
/// `None` when the information matrix is singular.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_se: Option<f64>,
    pub slope_se: Option<f64>,
    pub intercept_ci: Option<[f64; 2]>,
    pub slope_ci: Option<[f64; 2]>,
    pub converged: bool,
    /// The regressor `logit p` has zero variance, so the slope is not identified.
    pub degenerate: bool,
    pub iterations: usize,
}

impl CoxFit {
    /// The intercept CI excludes 0.
    pub fn intercept_significant(&self) -> bool {
        self.intercept_ci.is_some_and(|[lo, hi]| lo > 0.0 || hi < 0.0)
    }

    /// The slope CI excludes 1.
    pub fn slope_significant(&self) -> bool {
        self.slope_ci.is_some_and(|[lo, hi]| lo > 1.0 || hi < 1.0)
    }
}

pub const COX_MAX_ITER: usize = 100;
pub const COX_TOL: f64 = 1e-8;

fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_lik(x: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let eta = a + b * xi;
            // y·η − log(1 + e^η)
            yi * eta - (eta.max(0.0) + (-eta.abs()).exp().ln_1p())
        })
        .sum()
}

/// Newton–Raphson fit of the Cox recalibration model.
pub fn cox_recalibration(preds: &PredictionSet) -> Result<CoxFit> {
    preds.require_both_classes("Cox recalibration")?;
    let x: Vec<f64> = preds.probabilities.iter().map(|&p| logit(p)).collect();
    let y: Vec<f64> = preds.outcomes.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let spread = x.iter().map(|v| (v - mean_x).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * mean_x.abs().max(1.0) {
        // Only the intercept is identified: α + β·x̄ = logit ȳ with β = 0.
        let ybar = y.iter().sum::<f64>() / n;
        let a = (ybar / (1.0 - ybar)).ln();
        let se = 1.0 / (n * ybar * (1.0 - ybar)).sqrt();
        return Ok(CoxFit {
            intercept: a,
            slope: 0.0,
            intercept_se: Some(se),
            slope_se: None,
            intercept_ci: Some([a - Z_95 * se, a + Z_95 * se]),
            slope_ci: None,
            converged: true,
            degenerate: true,
            iterations: 0,
        });
    }

    let (mut a, mut b) = (0.0, 1.0);
    let mut ll = log_lik(&x, &y, a, b);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < COX_MAX_ITER {
        iterations += 1;
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(&y) {
            let p = sigmoid(a + b * xi);
            let r = yi - p;
            let w = p * (1.0 - p);
            ga += r;
            gb += r * xi;
            haa += w;
            hab += w * xi;
            hbb += w * xi * xi;
        }
        let det = haa * hbb - hab * hab;
        if !(det > 0.0) || !det.is_finite() {
            break;
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        // step halving keeps the log-likelihood non-decreasing
        let mut step = 1.0;
        let (mut na, mut nb, mut nll) = (a + da, b + db, log_lik(&x, &y, a + da, b + db));
        while nll < ll - 1e-12 * ll.abs() && step > 1e-10 {
            step *= 0.5;
            na = a + step * da;
            nb = b + step * db;
            nll = log_lik(&x, &y, na, nb);
        }
        let change = (na - a).abs().max((nb - b).abs());
        a = na;
        b = nb;
        ll = nll;
        if change < COX_TOL {
            converged = true;
            break;
        }
        if b.abs() > 1e8 {
            break;
        }
    }

    let (mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0);
    for &xi in &x {
        let p = sigmoid(a + b * xi);
        let w = p * (1.0 - p);
        haa += w;
        hab += w * xi;
        hbb += w * xi * xi;
    }
    let det = haa * hbb - hab * hab;
    let (se_a, se_b) = if det > 0.0 && det.is_finite() {
        (Some((hbb / det).sqrt()), Some((haa / det).sqrt()))
    } else {
        (None, None)
    };
    let ci = |est: f64, se: Option<f64>| se.map(|s| [est - Z_95 * s, est + Z_95 * s]);
    Ok(CoxFit {
        intercept: a,
        slope: b,
        intercept_se: se_a,
        slope_se: se_b,
        intercept_ci: ci(a, se_a),
        slope_ci: ci(b, se_b),
        converged,
        degenerate: false,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsOptions {
    pub n_bins: usize,
    pub bin_strategy: BinStrategy,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            n_bins: 10,
            bin_strategy: BinStrategy::EqualWidth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cohort: String,
    pub n: usize,
    pub prevalence: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub brier: f64,
    pub unsharpness: f64,
    pub reliability: Vec<ReliabilityBin>,
    pub cox: CoxFit,
}

pub fn evaluate(preds: &PredictionSet, options: &MetricsOptions) -> Result<MetricsReport> {
    Ok(MetricsReport {
        cohort: preds.cohort.clone(),
        n: preds.len(),
        prevalence: preds.prevalence(),
        auc_roc: auc_roc(preds)?,
        auc_pr: auc_pr(preds)?,
        brier: brier(preds),
        unsharpness: unsharpness(preds),
        reliability: reliability_bins(preds, options.n_bins, options.bin_strategy)?,
        cox: cox_recalibration(preds)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(p: &[f64], y: &[u8]) -> PredictionSet {
        PredictionSet::new(p.to_vec(), y.iter().map(|&v| v == 1).collect(), "test").unwrap()
    }

    #[test]
    fn auc_roc_examples() {
        assert_eq!(auc_roc(&set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auc_roc(&set(&[0.3; 5], &[0, 1, 0, 1, 1])).unwrap(), 0.5);
        assert_eq!(auc_roc(&set(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap(), 0.75);
        assert!(matches!(auc_roc(&set(&[0.1, 0.4], &[1, 1])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_pr_examples() {
        assert_eq!(auc_pr(&set(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auc_pr(&set(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1])).unwrap(), 0.25);
        let ap = auc_pr(&set(&[0.4; 10], &[1, 0, 0, 1, 0, 0, 0, 1, 0, 0])).unwrap();
        assert!((ap - 0.3).abs() < 1e-15);
        assert!(matches!(auc_pr(&set(&[0.1, 0.4], &[0, 0])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn brier_and_unsharpness_examples() {
        assert_eq!(brier(&set(&[0.0, 1.0, 1.0], &[0, 1, 1])), 0.0);
        assert_eq!(brier(&set(&[0.5, 0.5], &[0, 1])), 0.25);
        assert!((brier(&set(&[0.2, 0.9], &[0, 1])) - 0.025).abs() < 1e-15);
        assert_eq!(unsharpness(&set(&[0.0, 1.0, 0.0], &[0, 1, 1])), 0.0);
        assert_eq!(unsharpness(&set(&[0.5; 3], &[0, 1, 1])), 0.25);
        assert!((unsharpness(&set(&[0.2, 0.6], &[0, 1])) - 0.20).abs() < 1e-15);
    }

    #[test]
    fn reliability_examples() {
        let s = set(&[0.31, 0.35, 0.33, 0.39], &[0, 1, 0, 0]);
        let bins = reliability_bins(&s, 10, BinStrategy::EqualWidth).unwrap();
        assert_eq!(bins.len(), 10);
        assert_eq!(bins.iter().filter(|b| b.count > 0).count(), 1);
        assert_eq!(bins[3].count, 4);
        assert_eq!(bins[3].observed_frequency, Some(0.25));
        assert!(bins[0].mean_predicted.is_none());
        let edge = set(&[0.0, 1.0, 0.1], &[0, 1, 1]);
        let bins = reliability_bins(&edge, 10, BinStrategy::EqualWidth).unwrap();
        assert_eq!((bins[0].count, bins[1].count, bins[9].count), (1, 1, 1));
        assert!(reliability_bins(&edge, 1, BinStrategy::EqualWidth).is_err());
    }

    #[test]
    fn calibrated_synthetic_set_has_small_bin_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..200_000).map(|_| rng.random::<f64>()).collect();
        let y: Vec<bool> = p.iter().map(|&pi| rng.random::<f64>() < pi).collect();
        let s = PredictionSet::new(p, y, "mc").unwrap();
        for strategy in [BinStrategy::EqualWidth, BinStrategy::Quantile] {
            let bins = reliability_bins(&s, 10, strategy).unwrap();
            assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), s.len());
            for b in &bins {
                let (m, f) = (b.mean_predicted.unwrap(), b.observed_frequency.unwrap());
                let se = (m * (1.0 - m) / b.count as f64).sqrt().max(1e-3);
                assert!((m - f).abs() < 3.0 * se + 1e-3, "{b:?}");
            }
        }
    }

    #[test]
    fn cox_recovers_ideal_and_inverse_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 50_000;
        let p: Vec<f64> = (0..n).map(|_| sigmoid(rng.random_range(-4.0..2.0))).collect();
        let y: Vec<bool> = p.iter().map(|&pi| rng.random::<f64>() < pi).collect();
        let ideal = cox_recalibration(&PredictionSet::new(p.clone(), y.clone(), "c").unwrap()).unwrap();
        assert!(ideal.converged && !ideal.degenerate);
        assert!(!ideal.intercept_significant() && !ideal.slope_significant(), "{ideal:?}");

        let (a, b) = (1.0, 0.5);
        let shifted: Vec<f64> = p.iter().map(|&pi| sigmoid(a + b * logit(pi))).collect();
        let fit = cox_recalibration(&PredictionSet::new(shifted, y, "c").unwrap()).unwrap();
        assert!(fit.converged);
        assert!((fit.intercept + a / b).abs() < 3.0 * fit.intercept_se.unwrap(), "{fit:?}");
        assert!((fit.slope - 1.0 / b).abs() < 3.0 * fit.slope_se.unwrap(), "{fit:?}");
        let [lo, hi] = fit.slope_ci.unwrap();
        assert!(lo <= fit.slope && fit.slope <= hi);
        assert!(fit.slope_significant() && fit.intercept_significant());
    }

    #[test]
    fn cox_flags_constant_predictions_and_separation() {
        let s = set(&[0.25; 8], &[1, 0, 0, 0, 1, 0, 0, 0]);
        let fit = cox_recalibration(&s).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.slope, 0.0);
        assert!((sigmoid(fit.intercept) - 0.25).abs() < 1e-12);

        let sep = set(&[0.1, 0.2, 0.3, 0.6, 0.7, 0.8], &[0, 0, 0, 1, 1, 1]);
        let fit = cox_recalibration(&sep).unwrap();
        assert!(!fit.converged);
        assert!(fit.slope.abs() > 10.0);
    }

    #[test]
    fn curve_examples() {
        let perfect = set(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]);
        assert!(roc_curve_points(&perfect).unwrap().contains(&(0.0, 1.0)));
        let ties = set(&[0.5; 4], &[0, 1, 0, 1]);
        assert_eq!(roc_curve_points(&ties).unwrap(), vec![(0.0, 0.0), (1.0, 1.0)]);
        let pr = pr_curve_points(&perfect).unwrap();
        assert_eq!(pr.last(), Some(&(1.0, 0.5)));
    }

    #[test]
    fn report_round_trips_through_json() {
        let s = set(&[0.1, 0.4, 0.35, 0.8, 0.2, 0.6], &[0, 0, 1, 1, 0, 1]);
        let r = evaluate(&s, &MetricsOptions::default()).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(evaluate(&s, &MetricsOptions::default()).unwrap(), r);
    }

    #[test]
    fn invalid_sets_are_rejected() {
        assert!(PredictionSet::new(vec![0.1], vec![], "x").is_err());
        assert!(PredictionSet::new(vec![], vec![], "x").is_err());
        assert!(PredictionSet::new(vec![1.2], vec![true], "x").is_err());
        assert!(PredictionSet::new(vec![f64::NAN], vec![true], "x").is_err());
    }
}
