//! Finite-difference helpers used by the gradient test suites.

/// Central difference `(f(x+h) - f(x-h)) / 2h` for a scalar function of one
/// perturbed coordinate. The caller owns the perturbation; this just keeps
/// the step in one place.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Relative error between an analytic and a numeric derivative, guarded for
/// near-zero denominators.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// `|a - n| <= atol + rtol * max(|a|, |n|)`. The absolute floor absorbs the
/// noise finite differences pick up from ReLU/pooling kinks on components
/// whose true gradient is near zero.
pub fn close(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> bool {
    (analytic - numeric).abs() <= atol + rtol * analytic.abs().max(numeric.abs())
}
