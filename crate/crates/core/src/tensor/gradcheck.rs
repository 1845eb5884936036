use thiserror::Error;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum FiniteDiffError {
    #[error("step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("function failed at input {input}, coordinate {index}: {source}")]
    AtCoordinate {
        input: usize,
        index: usize,
        source: TensorError,
    },
    #[error("function failed at the base point: {0}")]
    AtBase(TensorError),
}

/// Central-difference gradient check of a scalar function of one tensor.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|)` over coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, FiniteDiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// Like [`finite_diff_check`] but over every coordinate of several inputs.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64, FiniteDiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    if !(step > 0.0) {
        return Err(FiniteDiffError::InvalidStep(step));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&tape, &vars).map_err(FiniteDiffError::AtBase)?;
        let grads = tape.backward(root).map_err(FiniteDiffError::AtBase)?;
        vars.iter().map(|v| grads.wrt(*v)).collect()
    };
    let eval = |point: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = point.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&tape, &vars)?;
        let v = root.value();
        if v.len() != 1 {
            return Err(TensorError::NonScalarRoot(v.shape().to_vec()));
        }
        Ok(v.item())
    };
    let mut point = inputs.to_vec();
    let mut worst = 0.0_f64;
    for input in 0..inputs.len() {
        for index in 0..inputs[input].len() {
            let orig = point[input].data()[index];
            let at = |e| FiniteDiffError::AtCoordinate { input, index, source: e };
            point[input].data_mut()[index] = orig + step;
            let up = eval(&point).map_err(at)?;
            point[input].data_mut()[index] = orig - step;
            let down = eval(&point).map_err(at)?;
            point[input].data_mut()[index] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[input].data()[index];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = finite_diff_check(|_, v| v.square()?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = finite_diff_check(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn failure_reports_coordinate() {
        // log(x) fails once x - step crosses zero at coordinate 1
        let x = Tensor::vector(vec![1.0, 1e-7]);
        let err = finite_diff_check(|_, v| v.log()?.sum(), &x, 1e-5).unwrap_err();
        assert!(matches!(err, FiniteDiffError::AtCoordinate { input: 0, index: 1, .. }));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(
            finite_diff_check(|_, v| v.sum(), &x, 0.0),
            Err(FiniteDiffError::InvalidStep(_))
        ));
    }
}
