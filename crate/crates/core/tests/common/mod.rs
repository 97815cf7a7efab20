//! Shared test oracles, independent of the autograd implementation: the
//! finite-difference gradient recomputes the loss from perturbed parameter
//! values through whatever closure the test supplies.

use dtr_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of `loss_fn` with respect to `param`, holding
/// everything else fixed. Restores the original values afterwards.
pub fn finite_difference_gradient(param: &Tensor, mut loss_fn: impl FnMut() -> f64) -> Vec<f64> {
    let base = param.to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut bumped = base.clone();
        bumped[i] = base[i] + FD_STEP;
        param.set_values(&bumped);
        let plus = loss_fn();
        bumped[i] = base[i] - FD_STEP;
        param.set_values(&bumped);
        let minus = loss_fn();
        grad[i] = (plus - minus) / (2.0 * FD_STEP);
    }
    param.set_values(&base);
    grad
}

/// Largest relative disagreement between gradients. The denominator floor
/// keeps finite-difference roundoff on near-zero entries from registering as
/// a large relative error.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}
