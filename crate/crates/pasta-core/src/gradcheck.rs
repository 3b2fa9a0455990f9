//! Finite-difference utilities for validating analytic gradients: central
//! differences, a floored relative-error measure, and deterministic
//! coordinate sampling for sweeping large tensors.

use crate::error::{CoreError, Result};

/// Central finite difference `(f(x0+h) − f(x0−h)) / 2h`.
pub fn central_difference(
    f: &mut dyn FnMut(f64) -> Result<f64>,
    x0: f64,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(CoreError::InvalidArgument(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let hi = f(x0 + step)?;
    let lo = f(x0 - step)?;
    Ok((hi - lo) / (2.0 * step))
}

/// `|a − n|` relative to the larger magnitude, floored at 1e-3 so that
/// near-zero gradient pairs are compared on an absolute scale instead of
/// amplifying finite-difference noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / scale
}

/// Up to `max` strided coordinates of a length-`len` tensor, always
/// including the first and last element. Deterministic, sorted, distinct.
pub fn probe_positions(len: usize, max: usize) -> Vec<usize> {
    if len == 0 || max == 0 {
        return Vec::new();
    }
    if len <= max {
        return (0..len).collect();
    }
    let mut picks: Vec<usize> = (0..max)
        .map(|i| i * (len - 1) / (max - 1).max(1))
        .collect();
    picks.dedup();
    picks
}
