//! Sparse variational GP classification layer.
//!
//! The latent function has a zero mean and an RBF covariance over extracted
//! features. The approximate posterior over the inducing values is stored in
//! whitened form `u = L_z v`, `q(v) = N(m_v, L_v L_vᵀ)`, so its prior is
//! `N(0, I)` and the KL term is closed form. Observations are Bernoulli with
//! a logistic link; expectations over the marginal latent Gaussians use
//! Gauss–Hermite quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::leaf_params;
use crate::quadrature::GaussHermite;
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Floor applied to predictive latent variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// RBF hyperparameters θ on the log scale.
///
/// `log_lengthscale` has one entry (shared) or one per feature (ARD).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel<T> {
    pub log_lengthscale: T,
    pub log_outputscale: T,
}
leaf_params!(RbfKernel { log_lengthscale, log_outputscale });

pub type RbfKernelParams = RbfKernel<Tensor>;

impl RbfKernelParams {
    /// ℓ = 1, σ_f² = 1; `ard` gives one lengthscale per feature dimension.
    pub fn unit(feature_dim: usize, ard: bool) -> Self {
        let n = if ard { feature_dim } else { 1 };
        Self {
            log_lengthscale: Tensor::zeros(&[n]),
            log_outputscale: Tensor::scalar(0.0),
        }
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscale.data().iter().map(|v| v.exp()).collect()
    }

    pub fn outputscale(&self) -> f64 {
        self.log_outputscale.item().exp()
    }
}

/// Inducing locations `Z` `[m × d]`, whitened mean `m_v` `[m × 1]` and the raw
/// Cholesky parameter `[m × m]`: strictly-lower entries of `L_v` below the
/// diagonal, `log diag(L_v)` on it, zeros above.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variational<T> {
    pub inducing: T,
    pub mean: T,
    pub chol_raw: T,
}
leaf_params!(Variational { inducing, mean, chol_raw });

pub type VariationalState = Variational<Tensor>;

impl VariationalState {
    /// Prior-matching state (`m_v = 0`, `L_v = I`) at the given locations.
    pub fn prior(inducing: Tensor) -> Self {
        let m = inducing.rows();
        Self {
            inducing,
            mean: Tensor::zeros(&[m, 1]),
            chol_raw: Tensor::zeros(&[m, m]),
        }
    }

    /// Builds a state from an explicit lower-triangular `L_v`.
    pub fn from_cholesky(inducing: Tensor, mean: Tensor, chol: &Tensor) -> Result<Self> {
        let m = inducing.rows();
        if !inducing.is_matrix() || mean.len() != m || chol.shape() != [m, m] {
            return Err(Error::State(format!(
                "shapes Z {:?}, m_v {:?}, L_v {:?} disagree",
                inducing.shape(),
                mean.shape(),
                chol.shape()
            )));
        }
        let mut raw = Tensor::zeros(&[m, m]);
        for i in 0..m {
            let d = chol.get(i, i);
            if !(d > 0.0) {
                return Err(Error::State(format!("L_v diagonal entry {i} is {d}, must be positive")));
            }
            raw.set(i, i, d.ln());
            for j in 0..i {
                raw.set(i, j, chol.get(i, j));
            }
        }
        let mean = mean.reshape(vec![m, 1])?;
        Ok(Self {
            inducing,
            mean,
            chol_raw: raw,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.rows()
    }

    /// The lower-triangular factor `L_v`.
    pub fn chol(&self) -> Tensor {
        let m = self.num_inducing();
        let mut l = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in 0..i {
                l.set(i, j, self.chol_raw.get(i, j));
            }
            l.set(i, i, self.chol_raw.get(i, i).exp());
        }
        l
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let m = self.num_inducing();
        if m == 0 || self.inducing.shape() != [m, feature_dim] {
            return Err(Error::State(format!(
                "inducing locations {:?} do not match feature width {feature_dim}",
                self.inducing.shape()
            )));
        }
        if self.mean.shape() != [m, 1] || self.chol_raw.shape() != [m, m] {
            return Err(Error::State("variational mean/covariance shapes disagree".into()));
        }
        if !(self.inducing.is_finite() && self.mean.is_finite() && self.chol_raw.is_finite()) {
            return Err(Error::State("non-finite variational parameters".into()));
        }
        Ok(())
    }
}

/// Marginal latent Gaussians per instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GpPredictive {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Recorded predictive marginals, both `[n × 1]`.
#[derive(Clone, Copy, Debug)]
pub struct PredictiveVars<'t> {
    pub mean: Var<'t>,
    pub variance: Var<'t>,
}

impl PredictiveVars<'_> {
    pub fn to_values(&self) -> GpPredictive {
        GpPredictive {
            mean: self.mean.value().data().to_vec(),
            variance: self.variance.value().data().to_vec(),
        }
    }
}

/// `K[i,j] = σ_f² exp(-‖(xᵢ − yⱼ)/ℓ‖² / 2)`.
pub fn rbf_kernel<'t>(kernel: &RbfKernel<Var<'t>>, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    let d = x.shape().get(1).copied().unwrap_or(0);
    if y.shape().get(1).copied() != Some(d) {
        return Err(crate::tensor::TensorError::Dimension {
            op: "rbf_kernel",
            detail: format!("feature widths {:?} vs {:?}", x.shape(), y.shape()),
        }
        .into());
    }
    let inv_ls = kernel.log_lengthscale.scale(-1.0)?.exp()?;
    let inv_ls = match inv_ls.value().len() {
        1 => inv_ls.broadcast(&[d])?,
        n if n == d => inv_ls,
        n => {
            return Err(Error::Config(format!("{n} lengthscales for {d} features")));
        }
    };
    let xs = x.mul_row(inv_ls)?;
    let ys = if x.id() == y.id() { xs } else { y.mul_row(inv_ls)? };
    let sq = xs.sq_dist(ys)?;
    let shape = sq.shape();
    let log_os = kernel.log_outputscale.broadcast(&shape)?;
    Ok(sq.scale(-0.5)?.add(log_os)?.exp()?)
}

/// Whitened sparse-variational predictive marginals at features `F` `[n × d]`:
/// `A = L_z⁻¹ K_zf`, `μ = Aᵀ m_v`, `σ² = k(f,f) − ‖A·ᵢ‖² + ‖L_vᵀ A·ᵢ‖²`.
pub fn predictive_marginals<'t>(
    kernel: &RbfKernel<Var<'t>>,
    state: &Variational<Var<'t>>,
    features: Var<'t>,
) -> Result<PredictiveVars<'t>> {
    let n = features.shape()[0];
    if n == 0 {
        return Err(Error::Config("predictive_marginals needs at least one instance".into()));
    }
    let z = state.inducing;
    let kzz = rbf_kernel(kernel, z, z)?;
    let lz = kzz.cholesky()?;
    let kzf = rbf_kernel(kernel, z, features)?;
    let a = lz.solve_lower(kzf, false)?;
    let mean = a.matmul_tn(state.mean)?;
    let lv = state.chol_raw.lower_exp_diag()?;
    let b = lv.matmul_tn(a)?;
    let prior = kernel.log_outputscale.exp()?.broadcast(&[1, n])?;
    let variance = prior
        .sub(a.square()?.sum_rows()?)?
        .add(b.square()?.sum_rows()?)?
        .clamp_min(VARIANCE_FLOOR)?
        .transpose()?;
    Ok(PredictiveVars { mean, variance })
}

/// `KL(N(m_v, L_v L_vᵀ) ‖ N(0, I)) = ½(‖L_v‖²_F + ‖m_v‖² − m − log det L_v L_vᵀ)`.
pub fn kl_whitened<'t>(state: &Variational<Var<'t>>) -> Result<Var<'t>> {
    let m = state.chol_raw.shape()[0] as f64;
    let lv = state.chol_raw.lower_exp_diag()?;
    let fro = lv.square()?.sum()?;
    let norm = state.mean.square()?.sum()?;
    let logdet = lv.log_det_from_cholesky()?;
    Ok(fro.add(norm)?.sub(logdet)?.add_scalar(-m)?.scale(0.5)?)
}

fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Σᵢ E_{q(fᵢ)}[log p(yᵢ | fᵢ)] under the logistic link, by quadrature.
struct BernoulliExpectation {
    labels: Vec<f64>,
    rule: GaussHermite,
}

impl BernoulliExpectation {
    fn forward(&self, mean: &[f64], variance: &[f64]) -> f64 {
        let norm = std::f64::consts::PI.sqrt().recip();
        let mut total = 0.0;
        for ((&mu, &var), &y) in mean.iter().zip(variance).zip(&self.labels) {
            let s = (2.0 * var).sqrt();
            let sign = 2.0 * y - 1.0;
            for (t, w) in self.rule.nodes().iter().zip(self.rule.weights()) {
                total += w * norm * log_sigmoid(sign * (s * t + mu));
            }
        }
        total
    }
}

impl CustomOp for BernoulliExpectation {
    fn name(&self) -> &'static str {
        "bernoulli_expected_log_lik"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad_output.item();
        let norm = std::f64::consts::PI.sqrt().recip();
        let (mean, variance) = (inputs[0], inputs[1]);
        let mut dmean = Tensor::zeros(mean.shape());
        let mut dvar = Tensor::zeros(variance.shape());
        for i in 0..self.labels.len() {
            let (mu, var, y) = (mean.data()[i], variance.data()[i], self.labels[i]);
            let sd = var.sqrt();
            let s = std::f64::consts::SQRT_2 * sd;
            let (mut dm, mut ds) = (0.0, 0.0);
            for (t, w) in self.rule.nodes().iter().zip(self.rule.weights()) {
                // d/df log p(y|f) = y − σ(f)
                let r = y - sigmoid(s * t + mu);
                dm += w * norm * r;
                ds += w * norm * r * t;
            }
            dmean.data_mut()[i] = g * dm;
            // f = √2·√var·t + μ ⇒ ∂f/∂var = t / (√2·√var)
            dvar.data_mut()[i] = g * ds / (std::f64::consts::SQRT_2 * sd);
        }
        vec![Some(dmean), Some(dvar)]
    }
}

fn check_labels(labels: &[f64], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Config(format!("{} labels for {n} instances", labels.len())));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Bernoulli expected log-likelihood, summed over instances.
pub fn expected_log_lik<'t>(
    pred: &PredictiveVars<'t>,
    labels: &[f64],
    rule: &GaussHermite,
) -> Result<Var<'t>> {
    let tape: &Tape = pred.mean.tape();
    let (mean, variance) = (pred.mean.value(), pred.variance.value());
    check_labels(labels, mean.len())?;
    if variance.len() != mean.len() {
        return Err(Error::Config("mean/variance lengths differ".into()));
    }
    let op = BernoulliExpectation {
        labels: labels.to_vec(),
        rule: rule.clone(),
    };
    let value = op.forward(mean.data(), variance.data());
    Ok(tape.custom(&[pred.mean, pred.variance], Tensor::scalar(value), Box::new(op))?)
}

/// Minibatch ELBO: `(N/|B|)·Σ_B E[log p(y|f)] − KL`.
pub fn elbo<'t>(
    kernel: &RbfKernel<Var<'t>>,
    state: &Variational<Var<'t>>,
    features: Var<'t>,
    labels: &[f64],
    n_total: usize,
    rule: &GaussHermite,
) -> Result<Var<'t>> {
    let batch = labels.len();
    if batch == 0 {
        return Err(Error::Config("empty minibatch".into()));
    }
    if n_total < batch {
        return Err(Error::Config(format!("N_total {n_total} smaller than batch {batch}")));
    }
    let pred = predictive_marginals(kernel, state, features)?;
    let ell = expected_log_lik(&pred, labels, rule)?;
    let kl = kl_whitened(state)?;
    Ok(ell.scale(n_total as f64 / batch as f64)?.sub(kl)?)
}

/// Predictive Bernoulli mean `E[σ(f)]` per instance.
pub fn predict_proba(pred: &GpPredictive, rule: &GaussHermite) -> Vec<f64> {
    pred.mean
        .iter()
        .zip(&pred.variance)
        .map(|(&mu, &var)| rule.expect(mu, var, sigmoid))
        .collect()
}

/// Predictive marginals evaluated without gradient tracking.
pub fn predict_marginals(
    kernel: &RbfKernelParams,
    state: &VariationalState,
    features: &Tensor,
) -> Result<GpPredictive> {
    let tape = Tape::new();
    let k = kernel.map(&mut |t| tape.constant(t.clone()));
    let s = state.map(&mut |t| tape.constant(t.clone()));
    let f = tape.constant(features.clone());
    Ok(predictive_marginals(&k, &s, f)?.to_values())
}

/// Gaussian-likelihood counterpart of [`expected_log_lik`]:
/// `Σᵢ −½ log(2π s²) − ((yᵢ − μᵢ)² + σᵢ²)/(2 s²)` for noise variance `s²`.
///
/// Used to anchor the variational machinery against exact GP regression.
pub fn gaussian_expected_log_lik<'t>(
    pred: &PredictiveVars<'t>,
    targets: &[f64],
    noise_variance: f64,
) -> Result<Var<'t>> {
    let tape = pred.mean.tape();
    let n = targets.len();
    if pred.mean.value().len() != n {
        return Err(Error::Config("target count mismatch".into()));
    }
    let y = tape.constant(Tensor::column(targets.to_vec()));
    let resid = y.sub(pred.mean)?.square()?.sum()?;
    let spread = pred.variance.sum()?;
    let c = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * noise_variance).ln();
    Ok(resid.add(spread)?.scale(-0.5 / noise_variance)?.add_scalar(c)?)
}
