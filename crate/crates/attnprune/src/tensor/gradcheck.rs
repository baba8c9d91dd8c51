//! Central finite-difference checking for backward passes.
//!
//! Used by the test suites; independent of the tape's analytic gradients by
//! construction (it only re-runs forward closures).

use super::{Param, Tensor};

/// Central difference gradient of `f` with respect to `param`'s value.
///
/// `f` must rebuild the forward pass from scratch and return the scalar loss.
pub fn finite_difference(param: &mut Param, step: f64, mut f: impl FnMut(&Param) -> f64) -> Tensor {
    let mut grad = Tensor::zeros(&param.value.shape);
    for i in 0..param.value.numel() {
        let orig = param.value.data[i];
        param.value.data[i] = orig + step;
        let plus = f(param);
        param.value.data[i] = orig - step;
        let minus = f(param);
        param.value.data[i] = orig;
        grad.data[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Largest relative error between an analytic gradient and its
/// finite-difference counterpart, with an absolute floor for near-zero
/// entries.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape, numeric.shape);
    analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
