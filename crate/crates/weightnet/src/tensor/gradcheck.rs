//! Central finite-difference gradient checking.
//!
//! The numeric differentiation here never touches the tape machinery: it
//! re-evaluates a caller-supplied loss closure with perturbed parameter
//! buffers, so it stays an independent oracle for the reverse-mode sweep.

use super::{NDTensor, Scalar};

/// Default perturbation for 64-bit checks.
pub const FD_EPSILON: f64 = 1e-4;

/// `|a−b| / max(|a|, |b|, 1e-6)` — the floor keeps near-zero gradients from
/// blowing up the ratio on finite-difference noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Max relative error between `analytic` (the autodiff gradient of `param`)
/// and central finite differences of `loss_fn`. `loss_fn` must re-evaluate
/// the forward pass from the parameters' current buffers.
///
/// The largest elementwise difference is normalized by the largest gradient
/// magnitude of the tensor (floored at 1e-6). Elementwise ratios would rate
/// near-zero entries by the O(ε²) truncation noise of the difference
/// quotient instead of by backward correctness; a real backward bug moves
/// entries at the gradient's own scale and stays visible under this norm.
pub fn finite_diff_check<T: Scalar>(
    param: &NDTensor<T>,
    analytic: &NDTensor<T>,
    eps: f64,
    mut loss_fn: impl FnMut() -> f64,
) -> f64 {
    assert_eq!(param.shape(), analytic.shape(), "gradient shape mismatch");
    let n = param.numel();
    let mut numeric = vec![0.0f64; n];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = param.data()[i];
        param.update_data(|d| d[i] = T::from_f64(orig.to_f64() + eps));
        let f_plus = loss_fn();
        param.update_data(|d| d[i] = T::from_f64(orig.to_f64() - eps));
        let f_minus = loss_fn();
        param.update_data(|d| d[i] = orig);
        *slot = (f_plus - f_minus) / (2.0 * eps);
    }
    let mut max_diff = 0.0f64;
    let mut scale = 1e-6f64;
    for (i, &num) in numeric.iter().enumerate() {
        let ana = analytic.data()[i].to_f64();
        max_diff = max_diff.max((ana - num).abs());
        scale = scale.max(ana.abs()).max(num.abs());
    }
    max_diff / scale
}
