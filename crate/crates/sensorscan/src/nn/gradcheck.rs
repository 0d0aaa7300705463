//! Finite-difference gradient checking used throughout the test suite.

/// Central-difference numeric gradient of a scalar function `f` at `x`.
pub fn numeric_grad(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        grad.push((hi - lo) / (2.0 * eps));
    }
    grad
}

/// Maximum elementwise relative error |a−n| / max(|a|, |n|, 1e-8).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// [`max_rel_err`] with a finite-difference noise floor: coordinate pairs
/// where both sides are below 1e-9 count as exact matches. Central
/// differences cannot certify a structurally zero gradient any tighter than
/// their own roundoff noise (e.g. a key-projection bias in attention, which
/// shifts every score in a row equally and is cancelled by the softmax).
pub fn max_rel_err_fd(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            if a.abs() < 1e-9 && n.abs() < 1e-9 {
                0.0
            } else {
                (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
            }
        })
        .fold(0.0, f64::max)
}
