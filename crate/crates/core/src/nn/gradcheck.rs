//! Central finite-difference verification helpers.
//!
//! These deliberately know nothing about the backward passes they check:
//! callers provide a pure loss closure and the analytic gradient, and the
//! helper compares against `(f(x+h) - f(x-h)) / 2h`.

/// Relative error with a guard for near-zero gradients (a true-zero
/// gradient, e.g. a conv bias absorbed by batch norm, only differs from
/// the central difference by floating-point noise).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if (analytic - numeric).abs() < 1e-8 {
        return 0.0;
    }
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Checks `analytic[i]` against the central difference of `f` for every
/// coordinate, returning the worst relative error.
pub fn max_grad_error(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let num = central_diff(f, x, i, h);
        worst = worst.max(relative_error(analytic[i], num));
    }
    worst
}
