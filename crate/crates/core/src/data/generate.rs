//! Synthetic ICU cohort with a controllable shift between two record-system
//! eras.
//!
//! Each patient has a latent severity `s ~ N(0, 1)` and an in-hospital death
//! label `y ~ Bernoulli(σ(a₀ + a₁·s))`. Continuous channels follow noisy
//! patient trajectories driven by a clinical course that is only weakly tied
//! to `s` at admission and converges to it by the last hour; the Glasgow
//! coma scale and capillary refill are drawn from severity-tilted
//! distributions. Era B can drift channel statistics, raise missingness,
//! record the coma scale with a different label vocabulary and stop
//! recording its total.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{variable_index, Era, Measurement, RawEpisode, Value, VariableKind, N_VARIABLES, STEPS, VARIABLES};
use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;

/// Era-B change of a continuous channel on the standardized scale:
/// `u ↦ mean_shift + scale·u + b` where `b ~ N(0, noise²)` is a per-patient
/// recording offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelDrift {
    pub variable: String,
    pub mean_shift: f64,
    pub scale: f64,
    #[serde(default)]
    pub noise: f64,
}

/// Probability that an hourly bin holds no measurement of a variable.
/// For height and weight it is the probability of never being measured; the
/// coma-scale components are assessed together at the eye-opening rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingRate {
    pub variable: String,
    pub era_a: f64,
    pub era_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub n_era_a: usize,
    pub n_era_b: usize,
    /// Target era-A in-hospital mortality.
    pub prevalence: f64,
    /// Label-model loading `a₁` on the latent severity.
    pub severity_coef: f64,
    /// Correlation between the admission-hour state and severity. It rises
    /// linearly to 1 at the last hour.
    pub admission_signal: f64,
    /// Added to the label intercept in era B.
    pub era_b_logit_shift: f64,
    pub drift: Vec<ChannelDrift>,
    pub missing: Vec<MissingRate>,
    /// Era B records the coma scale with its own label vocabulary.
    pub relabel_gcs: bool,
    /// Era B records the coma-scale total.
    pub era_b_gcs_total: bool,
}

/// Population model of one continuous channel.
struct Physiology {
    mean: f64,
    sd: f64,
    /// Correlation of the patient level with severity.
    loading: f64,
    lo: f64,
    hi: f64,
    /// Measured at most once per stay.
    fixed: bool,
}

const fn phys(mean: f64, sd: f64, loading: f64, lo: f64, hi: f64) -> Physiology {
    Physiology { mean, sd, loading, lo, hi, fixed: false }
}

fn physiology(var: usize) -> Physiology {
    match VARIABLES[var].name {
        "Diastolic blood pressure" => phys(60.0, 12.0, -0.5, 20.0, 140.0),
        "Fraction inspired oxygen" => phys(0.40, 0.12, 0.6, 0.21, 1.0),
        "Glucose" => phys(130.0, 35.0, 0.4, 40.0, 600.0),
        "Heart Rate" => phys(85.0, 15.0, 0.6, 30.0, 200.0),
        "Height" => Physiology { fixed: true, ..phys(170.0, 10.0, 0.0, 140.0, 210.0) },
        "Mean blood pressure" => phys(78.0, 13.0, -0.6, 30.0, 160.0),
        "Oxygen saturation" => phys(97.0, 2.0, -0.6, 60.0, 100.0),
        "Respiratory rate" => phys(18.0, 5.0, 0.6, 5.0, 50.0),
        "Systolic blood pressure" => phys(120.0, 20.0, -0.5, 50.0, 220.0),
        "Temperature" => phys(37.0, 0.6, 0.3, 33.0, 42.0),
        "Weight" => Physiology { fixed: true, ..phys(80.0, 18.0, 0.0, 35.0, 200.0) },
        "pH" => phys(7.40, 0.05, -0.6, 6.8, 7.8),
        other => unreachable!("{other} has no physiology"),
    }
}

fn missing(variable: &str, era_a: f64, era_b: f64) -> MissingRate {
    MissingRate { variable: variable.into(), era_a, era_b }
}

fn drift(variable: &str, mean_shift: f64, scale: f64, noise: f64) -> ChannelDrift {
    ChannelDrift { variable: variable.into(), mean_shift, scale, noise }
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            n_era_a: 2400,
            n_era_b: 1600,
            prevalence: 0.1323,
            severity_coef: 1.5,
            admission_signal: 0.3,
            era_b_logit_shift: 0.0,
            drift: vec![
                drift("Heart Rate", 0.3, 1.0, 2.0),
                drift("Respiratory rate", 0.3, 1.0, 2.0),
                drift("Glucose", 0.2, 1.2, 2.0),
                drift("Oxygen saturation", 0.2, 1.0, 2.0),
                drift("Fraction inspired oxygen", -0.2, 1.0, 2.0),
                drift("Systolic blood pressure", -0.2, 1.0, 2.0),
            ],
            missing: vec![
                missing("Capillary refill rate", 0.93, 0.97),
                missing("Diastolic blood pressure", 0.10, 0.15),
                missing("Fraction inspired oxygen", 0.80, 0.88),
                missing("Glascow coma scale eye opening", 0.75, 0.80),
                missing("Glucose", 0.85, 0.90),
                missing("Heart Rate", 0.05, 0.08),
                missing("Height", 0.80, 0.90),
                missing("Mean blood pressure", 0.10, 0.15),
                missing("Oxygen saturation", 0.08, 0.12),
                missing("Respiratory rate", 0.08, 0.12),
                missing("Systolic blood pressure", 0.10, 0.15),
                missing("Temperature", 0.75, 0.82),
                missing("Weight", 0.40, 0.55),
                missing("pH", 0.88, 0.93),
            ],
            relabel_gcs: true,
            era_b_gcs_total: false,
        }
    }
}

impl ShiftConfig {
    /// Both eras drawn from the same distribution.
    pub fn without_shift(&self) -> Self {
        Self {
            era_b_logit_shift: 0.0,
            drift: Vec::new(),
            missing: self
                .missing
                .iter()
                .map(|m| MissingRate { era_b: m.era_a, ..m.clone() })
                .collect(),
            relabel_gcs: false,
            era_b_gcs_total: true,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_era_a + self.n_era_b == 0 {
            return Err(Error::Config("cohort must contain at least one episode".into()));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!("prevalence {} outside (0, 1)", self.prevalence)));
        }
        if !self.severity_coef.is_finite() || !self.era_b_logit_shift.is_finite() {
            return Err(Error::Config("label model coefficients must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.admission_signal) {
            return Err(Error::Config(format!("admission signal {} outside [0, 1]", self.admission_signal)));
        }
        for d in &self.drift {
            let var = variable_index(&d.variable)
                .ok_or_else(|| Error::Config(format!("drift names unknown variable {:?}", d.variable)))?;
            if !VARIABLES[var].is_continuous() {
                return Err(Error::Config(format!("drift variable {} is not continuous", d.variable)));
            }
            if !(d.scale > 0.0 && d.scale.is_finite() && d.mean_shift.is_finite() && d.noise >= 0.0 && d.noise.is_finite()) {
                return Err(Error::Config(format!("invalid drift for {}", d.variable)));
            }
        }
        for m in &self.missing {
            if variable_index(&m.variable).is_none() {
                return Err(Error::Config(format!("missingness names unknown variable {:?}", m.variable)));
            }
            if !(0.0..=1.0).contains(&m.era_a) || !(0.0..=1.0).contains(&m.era_b) {
                return Err(Error::Config(format!("missingness rates for {} outside [0, 1]", m.variable)));
            }
        }
        Ok(())
    }

    fn missing_rates(&self, era: Era) -> [f64; N_VARIABLES] {
        let mut rates = [0.5; N_VARIABLES];
        for m in &self.missing {
            if let Some(v) = variable_index(&m.variable) {
                rates[v] = if era == Era::A { m.era_a } else { m.era_b };
            }
        }
        rates
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Intercept `a₀` with `E[σ(a₀ + a₁·s)] = prevalence` for `s ~ N(0, 1)`.
pub fn calibrate_intercept(prevalence: f64, severity_coef: f64) -> Result<f64> {
    let rule = GaussHermite::standard();
    let f = |a0: f64| rule.expect(a0, severity_coef * severity_coef, sigmoid) - prevalence;
    let (mut lo, mut hi) = (-30.0, 30.0);
    if !(f(lo) < 0.0 && f(hi) > 0.0) {
        return Err(Error::Config(format!(
            "cannot bracket an intercept for prevalence {prevalence} with severity coefficient {severity_coef}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform time in `[start, start + width)` at 1e-4 hour resolution.
fn hour_in<R: Rng>(start: f64, width: f64, rng: &mut R) -> f64 {
    start + (rng.random::<f64>() * width * 1e4).floor() / 1e4
}

fn round_to(x: f64, decimals: usize) -> f64 {
    let f = 10f64.powi(decimals as i32);
    (x * f).round() / f
}

struct Context {
    intercept: f64,
    /// Era-B `(mean_shift, scale, noise)` per variable.
    drift: [(f64, f64, f64); N_VARIABLES],
}

/// Draws the cohort: era-A episodes first, then era B. Episode `i` uses its
/// own ChaCha stream so the result does not depend on generation order.
pub fn generate_cohort(config: &ShiftConfig, seed: u64) -> Result<Vec<RawEpisode>> {
    config.validate()?;
    let intercept = calibrate_intercept(config.prevalence, config.severity_coef)?;
    let mut drift = [(0.0, 1.0, 0.0); N_VARIABLES];
    for d in &config.drift {
        drift[variable_index(&d.variable).expect("validated")] = (d.mean_shift, d.scale, d.noise);
    }
    let ctx = Context { intercept, drift };
    let mut out = Vec::with_capacity(config.n_era_a + config.n_era_b);
    let eras = std::iter::repeat_n(Era::A, config.n_era_a).chain(std::iter::repeat_n(Era::B, config.n_era_b));
    let mut counters = [0usize; 2];
    for (stream, era) in eras.enumerate() {
        let k = &mut counters[era as usize];
        *k += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        out.push(patient(config, &ctx, era, format!("{}{:05}", era.as_str(), k), &mut rng));
    }
    Ok(out)
}

/// Hour-by-hour standardized condition: correlation with severity rises from
/// `admission_signal` at the first hour to 1 at the last.
struct Course {
    s: f64,
    admission: f64,
    rho0: f64,
}

impl Course {
    fn at(&self, t: usize) -> f64 {
        let r = self.rho0 + (1.0 - self.rho0) * t as f64 / (STEPS - 1) as f64;
        r * self.s + (1.0 - r * r).sqrt() * self.admission
    }
}

fn patient(config: &ShiftConfig, ctx: &Context, era: Era, id: String, rng: &mut ChaCha8Rng) -> RawEpisode {
    let s = normal(rng);
    let logit = ctx.intercept + config.severity_coef * s + if era == Era::B { config.era_b_logit_shift } else { 0.0 };
    let label = u8::from(rng.random::<f64>() < sigmoid(logit));
    let course = Course { s, admission: normal(rng), rho0: config.admission_signal };
    let rates = config.missing_rates(era);
    let mut measurements = Vec::new();

    for (var, v) in VARIABLES.iter().enumerate() {
        let VariableKind::Continuous { decimals, .. } = v.kind else {
            continue;
        };
        let p = physiology(var);
        let own = (1.0 - p.loading * p.loading).sqrt() * normal(rng);
        let (shift, scale, noise_sd) = if era == Era::B { ctx.drift[var] } else { (0.0, 1.0, 0.0) };
        let offset = shift + noise_sd * normal(rng);
        // Physiology is clamped to its plausible range before era-B recording
        // changes apply.
        let to_value = |u: f64| {
            let z = ((p.mean + p.sd * u).clamp(p.lo, p.hi) - p.mean) / p.sd;
            round_to(p.mean + p.sd * (offset + scale * z), decimals)
        };
        if p.fixed {
            if rng.random::<f64>() >= rates[var] {
                let hour = hour_in(0.0, 6.0, rng);
                measurements.push(Measurement { hour, variable: v.name.into(), value: Value::Number(to_value(own)) });
            }
            continue;
        }
        let mut noise = 0.4 * normal(rng);
        for t in 0..STEPS {
            noise = 0.8 * noise + 0.24 * normal(rng);
            if rng.random::<f64>() < rates[var] {
                continue;
            }
            let hour = hour_in(t as f64, 1.0, rng);
            let value = to_value(p.loading * course.at(t) + own + noise);
            measurements.push(Measurement { hour, variable: v.name.into(), value: Value::Number(value) });
        }
    }

    coma_scale(config, era, &course, &rates, rng, &mut measurements);

    let cap = variable_index("Capillary refill rate").expect("listed");
    for t in 0..STEPS {
        if rng.random::<f64>() < rates[cap] {
            continue;
        }
        let abnormal = rng.random::<f64>() < sigmoid(-2.2 + course.at(t) + 0.3 * normal(rng));
        measurements.push(Measurement {
            hour: hour_in(t as f64, 1.0, rng),
            variable: VARIABLES[cap].name.into(),
            value: Value::Category(if abnormal { "abnormal" } else { "normal" }.into()),
        });
    }

    measurements.sort_by(|a, b| a.hour.total_cmp(&b.hour));
    RawEpisode { id, era, label, measurements }
}

/// Coma-scale assessments: eye (1–4), verbal (1–5) and motor (1–6) scores
/// recorded together, plus their total where the era records it.
fn coma_scale(
    config: &ShiftConfig,
    era: Era,
    course: &Course,
    rates: &[f64; N_VARIABLES],
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Measurement>,
) {
    let eye = variable_index("Glascow coma scale eye opening").expect("listed");
    let motor = variable_index("Glascow coma scale motor response").expect("listed");
    let total = variable_index("Glascow coma scale total").expect("listed");
    let verbal = variable_index("Glascow coma scale verbal response").expect("listed");
    let relabel = era == Era::B && config.relabel_gcs;
    let record_total = era == Era::A || config.era_b_gcs_total;
    let own = 0.66 * normal(rng);
    let intubated = rng.random::<f64>() < sigmoid(-1.5 + 1.2 * course.s);
    for t in 0..STEPS {
        if rng.random::<f64>() < rates[eye] {
            continue;
        }
        let g = 0.75 * course.at(t) + own + 0.2 * normal(rng);
        let deficit = (3.0 * (g - 0.2)).round().clamp(0.0, 12.0) as usize;
        let d_eye = ((deficit * 3) as f64 / 12.0).round() as usize;
        let d_motor = ((deficit * 5) as f64 / 12.0).round() as usize;
        let d_verbal = deficit - d_eye - d_motor;
        let (e, m, v) = (4 - d_eye, 6 - d_motor, 5 - d_verbal);
        let hour = hour_in(t as f64, 1.0, rng);
        let eye_label = VARIABLES[eye].categories()[if relabel { 3 + e } else { e - 1 }];
        let motor_label = VARIABLES[motor].categories()[if relabel { 5 + m } else { m - 1 }];
        let verbal_idx = match (v, intubated, relabel) {
            (1, true, false) => 1,
            (1, false, false) => 0,
            (1, true, true) => 6,
            (1, false, true) => 7,
            (k, _, false) => k,
            (k, _, true) => 6 + k,
        };
        let verbal_label = VARIABLES[verbal].categories()[verbal_idx];
        let mut push = |var: usize, label: &str| {
            out.push(Measurement { hour, variable: VARIABLES[var].name.into(), value: Value::Category(label.into()) })
        };
        push(eye, eye_label);
        push(motor, motor_label);
        push(verbal, verbal_label);
        if record_total {
            push(total, &(e + m + v).to_string());
        }
    }
}
