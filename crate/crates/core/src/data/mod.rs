//! Episode data: the 17 clinical variables, the frozen 76-column layout,
//! preprocessing, the synthetic shifted-cohort generator, splits and the
//! on-disk formats.

mod generate;
mod io;
mod preprocess;
mod split;

pub use generate::{calibrate_intercept, generate_cohort, ChannelDrift, MissingRate, ShiftConfig};
pub use io::{
    processed_path, read_cohort, read_manifest, read_processed, write_cohort, write_json, write_processed,
    CohortIndexRow, CohortManifest, ProcessedHeader, COHORT_SCHEMA,
    PROCESSED_MAGIC, PROCESSED_SCHEMA,
};
pub use preprocess::{
    apply_norm, assemble, discretize_impute, fit_norm_stats, one_hot, preprocess_episode, HourlyGrid, NormStats,
    NORM_STD_FLOOR,
};
pub use split::{prepare_splits, split, PreparedSplits, SplitMode, SplitSizes, Splits};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Hourly bins per episode.
pub const STEPS: usize = 48;
pub const N_VARIABLES: usize = 17;
pub const N_CONTINUOUS: usize = 12;
pub const N_ONE_HOT: usize = 47;
/// `12 + 47 + 17`.
pub const N_FEATURES: usize = N_CONTINUOUS + N_ONE_HOT + N_VARIABLES;

#[derive(Clone, Copy, Debug)]
pub enum VariableKind {
    Continuous { default: f64, decimals: usize },
    Categorical { categories: &'static [&'static str], default: &'static str },
}

#[derive(Clone, Copy, Debug)]
pub struct Variable {
    pub name: &'static str,
    pub kind: VariableKind,
}

impl Variable {
    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, VariableKind::Continuous { .. })
    }

    pub fn categories(&self) -> &'static [&'static str] {
        match self.kind {
            VariableKind::Categorical { categories, .. } => categories,
            VariableKind::Continuous { .. } => &[],
        }
    }
}

const fn cont(name: &'static str, default: f64, decimals: usize) -> Variable {
    Variable { name, kind: VariableKind::Continuous { default, decimals } }
}

const fn cat(name: &'static str, categories: &'static [&'static str], default: &'static str) -> Variable {
    Variable { name, kind: VariableKind::Categorical { categories, default } }
}

pub const CAPILLARY_REFILL: &[&str] = &["normal", "abnormal"];

/// Numbered labels come from the era-A record system, plain labels from era B.
pub const GCS_EYE: &[&str] = &[
    "1 No Response",
    "2 To pain",
    "3 To speech",
    "4 Spontaneously",
    "None",
    "To Pain",
    "To Speech",
    "Spontaneously",
];

pub const GCS_MOTOR: &[&str] = &[
    "1 No Response",
    "2 Abnorm extensn",
    "3 Abnorm flexion",
    "4 Flex-withdraws",
    "5 Localizes Pain",
    "6 Obeys Commands",
    "No response",
    "Abnormal extension",
    "Abnormal Flexion",
    "Flex-withdraws",
    "Localizes Pain",
    "Obeys Commands",
];

pub const GCS_TOTAL: &[&str] = &["3", "4", "5", "6", "7", "8", "9", "10", "11", "12", "13", "14", "15"];

pub const GCS_VERBAL: &[&str] = &[
    "1 No Response",
    "1.0 ET/Trach",
    "2 Incomp sounds",
    "3 Inapprop words",
    "4 Confused",
    "5 Oriented",
    "No Response-ETT",
    "No Response",
    "Incomprehensible sounds",
    "Inappropriate Words",
    "Confused",
    "Oriented",
];

/// The clinical variables in their canonical order. Continuous defaults fill
/// the hours before a variable's first measurement.
pub const VARIABLES: [Variable; N_VARIABLES] = [
    cat("Capillary refill rate", CAPILLARY_REFILL, "normal"),
    cont("Diastolic blood pressure", 59.0, 1),
    cont("Fraction inspired oxygen", 0.21, 3),
    cat("Glascow coma scale eye opening", GCS_EYE, "4 Spontaneously"),
    cat("Glascow coma scale motor response", GCS_MOTOR, "6 Obeys Commands"),
    cat("Glascow coma scale total", GCS_TOTAL, "15"),
    cat("Glascow coma scale verbal response", GCS_VERBAL, "5 Oriented"),
    cont("Glucose", 128.0, 1),
    cont("Heart Rate", 86.0, 1),
    cont("Height", 170.0, 1),
    cont("Mean blood pressure", 77.0, 1),
    cont("Oxygen saturation", 98.0, 1),
    cont("Respiratory rate", 19.0, 1),
    cont("Systolic blood pressure", 118.0, 1),
    cont("Temperature", 37.0, 2),
    cont("Weight", 81.0, 1),
    cont("pH", 7.4, 3),
];

pub fn variable_index(name: &str) -> Option<usize> {
    VARIABLES.iter().position(|v| v.name == name)
}

/// Index of each variable among the continuous channels.
pub fn continuous_slot(var: usize) -> Option<usize> {
    VARIABLES[var]
        .is_continuous()
        .then(|| VARIABLES[..var].iter().filter(|v| v.is_continuous()).count())
}

/// First one-hot column of a categorical variable.
pub fn one_hot_offset(var: usize) -> Option<usize> {
    (!VARIABLES[var].is_continuous()).then(|| {
        N_CONTINUOUS + VARIABLES[..var].iter().map(|v| v.categories().len()).sum::<usize>()
    })
}

pub fn mask_column(var: usize) -> usize {
    N_CONTINUOUS + N_ONE_HOT + var
}

/// Self-describing column layout written next to every data file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub schema: String,
    pub steps: usize,
    pub continuous: [usize; 2],
    pub one_hot: [usize; 2],
    pub masks: [usize; 2],
    pub columns: Vec<String>,
}

pub const LAYOUT_SCHEMA: &str = "dkl-layout/v1";

impl Layout {
    pub fn current() -> Self {
        let mut columns = Vec::with_capacity(N_FEATURES);
        columns.extend(VARIABLES.iter().filter(|v| v.is_continuous()).map(|v| v.name.to_string()));
        for v in VARIABLES.iter().filter(|v| !v.is_continuous()) {
            columns.extend(v.categories().iter().map(|c| format!("{}->{}", v.name, c)));
        }
        columns.extend(VARIABLES.iter().map(|v| format!("mask->{}", v.name)));
        Self {
            schema: LAYOUT_SCHEMA.to_string(),
            steps: STEPS,
            continuous: [0, N_CONTINUOUS],
            one_hot: [N_CONTINUOUS, N_CONTINUOUS + N_ONE_HOT],
            masks: [N_CONTINUOUS + N_ONE_HOT, N_FEATURES],
            columns,
        }
    }
}

/// Record-system era: A for the earlier period, B for the later one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Era {
    A,
    B,
}

impl Era {
    pub fn as_str(self) -> &'static str {
        match self {
            Era::A => "A",
            Era::B => "B",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" => Some(Era::A),
            "B" => Some(Era::B),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Number(f64),
    Category(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub hour: f64,
    pub variable: String,
    pub value: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawEpisode {
    pub id: String,
    pub era: Era,
    pub label: u8,
    pub measurements: Vec<Measurement>,
}

/// A `[48 × 76]` feature matrix before normalization, or after it once
/// [`apply_norm`] has been applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedEpisode {
    pub id: String,
    pub era: Era,
    pub label: u8,
    pub x: Tensor,
}
