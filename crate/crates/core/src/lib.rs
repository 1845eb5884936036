//! Deep kernel learning for irregular clinical time series.

// `!(x > 0.0)` is used on purpose to reject NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gp;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod quadrature;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
