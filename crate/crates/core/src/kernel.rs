//! Radial weight kernels and small filter utilities.
//!
//! The splatting and SPH-density transfers both use the cubic B-spline
//! kernel evaluated on the normalized distance `q = r / h`:
//!
//! ```text
//! W(q) = 2/3 - q^2 + q^3 / 2      for 0 <= q <= 1
//! W(q) = (2 - q)^3 / 6            for 1 <= q <= 2
//! W(q) = 0                        for q > 2
//! ```
//!
//! so the compact support radius is `2h`. No volumetric normalization
//! constant is applied: the normalized splat divides it out, and the SPH
//! density estimate uses the raw form (absolute density scales are then a
//! configuration choice, not a kernel property).

use crate::error::{Error, Result};

fn check_support(h: f64) -> Result<()> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("kernel support h must be finite and > 0, got {h}")));
    }
    Ok(())
}

/// Unchecked cubic B-spline evaluation at `q = r / h`. Callers validate `h`
/// once and keep `q >= 0`.
#[inline]
pub(crate) fn w_cubic(q: f64) -> f64 {
    if q < 1.0 {
        2.0 / 3.0 - q * q + 0.5 * q * q * q
    } else if q < 2.0 {
        let t = 2.0 - q;
        t * t * t / 6.0
    } else {
        0.0
    }
}

/// Unchecked derivative dW/dq; continuous at the branch points q = 1, 2.
#[inline]
pub(crate) fn w_cubic_dq(q: f64) -> f64 {
    if q < 1.0 {
        -2.0 * q + 1.5 * q * q
    } else if q < 2.0 {
        let t = 2.0 - q;
        -0.5 * t * t
    } else {
        0.0
    }
}

/// Cubic B-spline kernel `W(r, h)` with support radius `2h`.
pub fn kernel_cubic(r: f64, h: f64) -> Result<f64> {
    check_support(h)?;
    if !(r.is_finite() && r >= 0.0) {
        return Err(Error::invalid(format!("kernel distance r must be finite and >= 0, got {r}")));
    }
    Ok(w_cubic(r / h))
}

/// Derivative of [`kernel_cubic`] with respect to `r`:
/// `dW/dr = W'(q) / h` with `q = r / h`.
pub fn kernel_cubic_deriv(r: f64, h: f64) -> Result<f64> {
    check_support(h)?;
    if !(r.is_finite() && r >= 0.0) {
        return Err(Error::invalid(format!("kernel distance r must be finite and >= 0, got {r}")));
    }
    Ok(w_cubic_dq(r / h) / h)
}

/// Discrete Gaussian taps `w[t] ∝ exp(-t² / 2σ²)` for `t = -radius..=radius`,
/// normalized to sum to one. The half is mirrored so symmetry is exact.
pub fn gaussian_weights(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let mut weights = vec![0.0; 2 * radius + 1];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for t in 0..=radius {
        let w = (-((t * t) as f64) * inv).exp();
        weights[radius + t] = w;
        weights[radius - t] = w;
    }
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    Ok(weights)
}
