use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `theta`:
/// `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` per coordinate.
///
/// Used as the verification oracle for [`Graph::backward`](super::Graph::backward).
pub fn finite_diff_gradient<F>(mut f: F, theta: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "finite difference step must be > 0, got {h}"
        )));
    }
    let mut probe = theta.clone();
    let mut grad = Vec::with_capacity(theta.numel());
    for i in 0..theta.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("f(θ ± h·e_{i}) = ({plus}, {minus})")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(theta.shape().to_vec(), grad)
}

/// `max_i |a_i − b_i| / max(1, |b_i|)`.
pub fn max_relative_error(actual: &[f64], reference: &[f64]) -> f64 {
    actual
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}
