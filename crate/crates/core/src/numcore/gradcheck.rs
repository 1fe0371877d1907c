use super::Matrix;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params`.
pub fn central_difference(
    f: impl Fn(&Matrix) -> Result<f64>,
    params: &Matrix,
    eps: f64,
) -> Result<Matrix> {
    let mut probe = params.clone();
    let mut grad = Matrix::zeros(params.rows(), params.cols());
    for i in 0..params.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite function value at perturbed entry {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Compares the analytic gradient returned by `value_and_grad` with central
/// differences of its value. Returns
/// `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(value_and_grad: F, params: &Matrix, eps: f64) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<(f64, Matrix)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Domain(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    let (value, analytic) = value_and_grad(params)?;
    if !value.is_finite() {
        return Err(Error::Evaluation("non-finite function value".into()));
    }
    analytic.expect_same_shape(params, "analytic gradient")?;
    let numeric = central_difference(|p| value_and_grad(p).map(|(v, _)| v), params, eps)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max))
}
