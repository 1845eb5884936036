use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{
    continuous_slot, mask_column, one_hot_offset, variable_index, Era, ProcessedEpisode, RawEpisode, Value,
    VariableKind, N_CONTINUOUS, N_FEATURES, N_VARIABLES, STEPS, VARIABLES,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound for a channel's standard deviation.
pub const NORM_STD_FLOOR: f64 = 1e-6;

const N_CATEGORICAL: usize = N_VARIABLES - N_CONTINUOUS;

fn categorical_slot(var: usize) -> usize {
    VARIABLES[..var].iter().filter(|v| !v.is_continuous()).count()
}

/// Per-hour values after binning and forward filling. Categorical entries
/// are category indices within their variable.
#[derive(Clone, Debug, PartialEq)]
pub struct HourlyGrid {
    pub continuous: Vec<[f64; N_CONTINUOUS]>,
    pub categories: Vec<[usize; N_CATEGORICAL]>,
    pub mask: Vec<[bool; N_VARIABLES]>,
}

enum Cell {
    Num(f64),
    Cat(usize),
}

fn parse_cell(var: usize, value: &Value, id: &str) -> Result<Cell> {
    let v = &VARIABLES[var];
    match (&v.kind, value) {
        (VariableKind::Continuous { .. }, Value::Number(x)) if x.is_finite() => Ok(Cell::Num(*x)),
        (VariableKind::Categorical { categories, .. }, Value::Category(c)) => categories
            .iter()
            .position(|k| k == c)
            .map(Cell::Cat)
            .ok_or_else(|| Error::Format(format!("episode {id}: unknown category {c:?} for {}", v.name))),
        _ => Err(Error::Format(format!("episode {id}: invalid value {value:?} for {}", v.name))),
    }
}

/// Bins measurements into hours (the later measurement in a bin wins),
/// forward-fills gaps, and fills the hours before a variable's first
/// measurement with its default.
pub fn discretize_impute(raw: &RawEpisode) -> Result<HourlyGrid> {
    if raw.measurements.is_empty() {
        return Err(Error::Format(format!("episode {} has no measurements", raw.id)));
    }
    let mut binned: Vec<[Option<Cell>; N_VARIABLES]> = (0..STEPS).map(|_| std::array::from_fn(|_| None)).collect();
    let mut order: Vec<usize> = (0..raw.measurements.len()).collect();
    order.sort_by(|&a, &b| raw.measurements[a].hour.total_cmp(&raw.measurements[b].hour));
    for i in order {
        let m = &raw.measurements[i];
        let var = variable_index(&m.variable)
            .ok_or_else(|| Error::Format(format!("episode {}: unknown variable {:?}", raw.id, m.variable)))?;
        if !(0.0..STEPS as f64).contains(&m.hour) {
            return Err(Error::Format(format!(
                "episode {}: hour {} outside [0, {STEPS})",
                raw.id, m.hour
            )));
        }
        binned[m.hour.floor() as usize][var] = Some(parse_cell(var, &m.value, &raw.id)?);
    }

    let mut cont = [0.0; N_CONTINUOUS];
    let mut cats = [0usize; N_CATEGORICAL];
    for (var, v) in VARIABLES.iter().enumerate() {
        match v.kind {
            VariableKind::Continuous { default, .. } => cont[continuous_slot(var).expect("continuous")] = default,
            VariableKind::Categorical { categories, default } => {
                cats[categorical_slot(var)] = categories.iter().position(|c| *c == default).expect("default listed");
            }
        }
    }
    let mut grid = HourlyGrid {
        continuous: Vec::with_capacity(STEPS),
        categories: Vec::with_capacity(STEPS),
        mask: Vec::with_capacity(STEPS),
    };
    for hour in binned {
        let mut mask = [false; N_VARIABLES];
        for (var, cell) in hour.into_iter().enumerate() {
            match cell {
                Some(Cell::Num(x)) => cont[continuous_slot(var).expect("continuous")] = x,
                Some(Cell::Cat(k)) => cats[categorical_slot(var)] = k,
                None => continue,
            }
            mask[var] = true;
        }
        grid.continuous.push(cont);
        grid.categories.push(cats);
        grid.mask.push(mask);
    }
    Ok(grid)
}

/// Indicator vector of `category` over the variable's category set.
pub fn one_hot(variable: &str, category: &str) -> Result<Vec<f64>> {
    let var = variable_index(variable).ok_or_else(|| Error::Format(format!("unknown variable {variable:?}")))?;
    let cats = VARIABLES[var].categories();
    if cats.is_empty() {
        return Err(Error::Format(format!("{variable} is not categorical")));
    }
    let k = cats
        .iter()
        .position(|c| *c == category)
        .ok_or_else(|| Error::Format(format!("unknown category {category:?} for {variable}")))?;
    let mut out = vec![0.0; cats.len()];
    out[k] = 1.0;
    Ok(out)
}

/// Lays the grid out as the `[48 × 76]` feature matrix.
pub fn assemble(grid: &HourlyGrid) -> Tensor {
    let mut x = Tensor::zeros(&[STEPS, N_FEATURES]);
    for t in 0..STEPS {
        let row = &mut x.data_mut()[t * N_FEATURES..(t + 1) * N_FEATURES];
        row[..N_CONTINUOUS].copy_from_slice(&grid.continuous[t]);
        for (var, _) in VARIABLES.iter().enumerate().filter(|(_, v)| !v.is_continuous()) {
            let off = one_hot_offset(var).expect("categorical");
            row[off + grid.categories[t][categorical_slot(var)]] = 1.0;
        }
        for var in 0..N_VARIABLES {
            if grid.mask[t][var] {
                row[mask_column(var)] = 1.0;
            }
        }
    }
    x
}

/// Discretize, impute and encode one episode (unnormalized).
pub fn preprocess_episode(raw: &RawEpisode) -> Result<ProcessedEpisode> {
    if raw.label > 1 {
        return Err(Error::Format(format!("episode {}: label {} is not 0/1", raw.id, raw.label)));
    }
    Ok(ProcessedEpisode {
        id: raw.id.clone(),
        era: raw.era,
        label: raw.label,
        x: assemble(&discretize_impute(raw)?),
    })
}

/// Continuous-channel standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Eras present in the episodes the statistics were fitted on.
    pub eras: Vec<Era>,
    /// Channels whose standard deviation was raised to [`NORM_STD_FLOOR`].
    pub floored: Vec<usize>,
}

pub fn fit_norm_stats(train: &[ProcessedEpisode]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::Config("cannot fit normalization on an empty split".into()));
    }
    let n = (train.len() * STEPS) as f64;
    let mut mean = vec![0.0; N_CONTINUOUS];
    for ep in train {
        for t in 0..STEPS {
            for (m, v) in mean.iter_mut().zip(&ep.x.row(t)[..N_CONTINUOUS]) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; N_CONTINUOUS];
    for ep in train {
        for t in 0..STEPS {
            for (c, v) in ep.x.row(t)[..N_CONTINUOUS].iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
    }
    let mut floored = Vec::new();
    let std = var
        .iter()
        .enumerate()
        .map(|(c, v)| {
            let s = (v / n).sqrt();
            if s < NORM_STD_FLOOR {
                floored.push(c);
                NORM_STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    let eras: BTreeSet<Era> = train.iter().map(|e| e.era).collect();
    Ok(NormStats {
        mean,
        std,
        eras: eras.into_iter().collect(),
        floored,
    })
}

impl NormStats {
    /// Rejects statistics fitted on eras that the training split does not
    /// contain, which would leak later-period information into training.
    pub fn check_fitted_on(&self, train: &[ProcessedEpisode]) -> Result<()> {
        let eras: BTreeSet<Era> = train.iter().map(|e| e.era).collect();
        if let Some(e) = self.eras.iter().find(|e| !eras.contains(e)) {
            return Err(Error::Config(format!(
                "normalization fitted on era {} which is absent from the training split",
                e.as_str()
            )));
        }
        Ok(())
    }

    /// Inverse of [`apply_norm`] on the continuous columns.
    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for t in 0..out.rows() {
            for c in 0..N_CONTINUOUS {
                let v = out.get(t, c) * self.std[c] + self.mean[c];
                out.set(t, c, v);
            }
        }
        out
    }
}

/// Standardizes the continuous columns; one-hot and mask columns are untouched.
pub fn apply_norm(ep: &ProcessedEpisode, stats: &NormStats) -> Result<ProcessedEpisode> {
    if ep.x.shape() != [STEPS, N_FEATURES] {
        return Err(Error::Format(format!("episode {} has shape {:?}", ep.id, ep.x.shape())));
    }
    if stats.mean.len() != N_CONTINUOUS || stats.std.len() != N_CONTINUOUS {
        return Err(Error::State("normalization statistics have the wrong width".into()));
    }
    let mut x = ep.x.clone();
    for t in 0..STEPS {
        for c in 0..N_CONTINUOUS {
            let v = (x.get(t, c) - stats.mean[c]) / stats.std[c];
            x.set(t, c, v);
        }
    }
    Ok(ProcessedEpisode { x, ..ep.clone() })
}
