use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_norm, fit_norm_stats, Era, NormStats, ProcessedEpisode};
use crate::error::{Error, Result};

/// Era-A train share in temporal mode; the rest of era A validates.
pub const TEMPORAL_TRAIN_SHARE: f64 = 0.845;
/// Train and validation shares of the pooled internal split.
pub const INTERNAL_SHARES: (f64, f64) = (0.694, 0.153);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Train/validate on era A, test on era B.
    TemporalShift,
    /// Random split of the pooled cohort.
    Internal,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::TemporalShift => "temporal-shift",
            SplitMode::Internal => "internal",
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal-shift" => Ok(SplitMode::TemporalShift),
            "internal" => Ok(SplitMode::Internal),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected temporal-shift or internal)"))),
        }
    }
}

/// Episode indices of each split, in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub mode: SplitMode,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Splits {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }

    /// Indices of a split by name (`train`, `val` or `test`).
    pub fn by_name(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" | "validation" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split {name:?} (expected train, val or test)"))),
        }
    }
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

pub fn split(eras: &[Era], mode: SplitMode, seed: u64) -> Result<Splits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match mode {
        SplitMode::TemporalShift => {
            let mut a: Vec<usize> = (0..eras.len()).filter(|&i| eras[i] == Era::A).collect();
            let b: Vec<usize> = (0..eras.len()).filter(|&i| eras[i] == Era::B).collect();
            if a.is_empty() || b.is_empty() {
                return Err(Error::Config(format!(
                    "temporal split needs both eras, got {} era-A and {} era-B episodes",
                    a.len(),
                    b.len()
                )));
            }
            a.shuffle(&mut rng);
            let n_train = (TEMPORAL_TRAIN_SHARE * a.len() as f64).round() as usize;
            let val = a.split_off(n_train);
            Splits { mode, train: sorted(a), val: sorted(val), test: b }
        }
        SplitMode::Internal => {
            let n = eras.len();
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            let n_train = (INTERNAL_SHARES.0 * n as f64).round() as usize;
            let n_val = (INTERNAL_SHARES.1 * n as f64).round() as usize;
            let mut rest = all.split_off(n_train);
            let test = rest.split_off(n_val.min(rest.len()));
            Splits { mode, train: sorted(all), val: sorted(rest), test: sorted(test) }
        }
    };
    if out.train.is_empty() || out.val.is_empty() || out.test.is_empty() {
        return Err(Error::Config(format!("cohort too small to split: {:?}", out.sizes())));
    }
    Ok(out)
}

/// Normalized train/validation/test episodes with the statistics fitted on
/// the training split.
#[derive(Clone, Debug)]
pub struct PreparedSplits {
    pub splits: Splits,
    pub norm: NormStats,
    pub train: Vec<ProcessedEpisode>,
    pub val: Vec<ProcessedEpisode>,
    pub test: Vec<ProcessedEpisode>,
}

/// Splits a processed cohort and normalizes every split with training-only
/// statistics.
pub fn prepare_splits(cohort: &[ProcessedEpisode], mode: SplitMode, seed: u64) -> Result<PreparedSplits> {
    let eras: Vec<Era> = cohort.iter().map(|e| e.era).collect();
    let splits = split(&eras, mode, seed)?;
    let pick = |idx: &[usize]| -> Vec<ProcessedEpisode> { idx.iter().map(|&i| cohort[i].clone()).collect() };
    let train = pick(&splits.train);
    let norm = fit_norm_stats(&train)?;
    norm.check_fitted_on(&train)?;
    let apply = |eps: Vec<ProcessedEpisode>| -> Result<Vec<ProcessedEpisode>> {
        eps.iter().map(|e| apply_norm(e, &norm)).collect()
    };
    let train = apply(train)?;
    let val = apply(pick(&splits.val))?;
    let test = apply(pick(&splits.test))?;
    Ok(PreparedSplits { splits, norm, train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eras(a: usize, b: usize) -> Vec<Era> {
        std::iter::repeat_n(Era::A, a).chain(std::iter::repeat_n(Era::B, b)).collect()
    }

    fn check_partition(s: &Splits, n: usize) {
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn temporal_preset_sizes() {
        let e = eras(2400, 1600);
        let s = split(&e, SplitMode::TemporalShift, 1).unwrap();
        assert_eq!(s.sizes(), SplitSizes { train: 2028, val: 372, test: 1600 });
        assert!(s.train.iter().chain(&s.val).all(|&i| e[i] == Era::A));
        assert!(s.test.iter().all(|&i| e[i] == Era::B));
        check_partition(&s, 4000);
    }

    #[test]
    fn internal_preset_sizes() {
        let s = split(&eras(1800, 1200), SplitMode::Internal, 1).unwrap();
        assert_eq!(s.sizes(), SplitSizes { train: 2082, val: 459, test: 459 });
        check_partition(&s, 3000);
        assert_eq!(s, split(&eras(1800, 1200), SplitMode::Internal, 1).unwrap());
        assert_ne!(s, split(&eras(1800, 1200), SplitMode::Internal, 2).unwrap());
    }

    #[test]
    fn temporal_needs_both_eras() {
        assert!(matches!(split(&eras(10, 0), SplitMode::TemporalShift, 0), Err(Error::Config(_))));
        assert!("temporal-shift".parse::<SplitMode>().is_ok());
        assert!("both".parse::<SplitMode>().is_err());
    }
}
