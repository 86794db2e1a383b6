//! Scalar transforms, dense linear algebra, and Gaussian factors.

mod gaussian;
pub mod linalg;

pub use gaussian::{
    mvn_logpdf, mvn_sample, tril_map, tril_unmap, DiagScale, Draw, GaussianSpec, Scale,
    UnconstrainedChol,
};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Default floor hyperparameter of [`diag_transform`].
pub const DEFAULT_GAMMA: f64 = 1.0;

/// Positive map for Cholesky diagonals: `½(x + √(x² + 4γ))`.
///
/// Behaves like `x` for large positive inputs and like `-γ/x` for large
/// negative ones. The negative branch is evaluated in the rationalized form
/// `2γ / (√(x² + 4γ) − x)` to avoid cancellation.
#[inline]
pub fn diag_transform(x: f64, gamma: f64) -> f64 {
    let r = x.hypot(2.0 * gamma.sqrt());
    if x >= 0.0 {
        0.5 * (x + r)
    } else {
        2.0 * gamma / (r - x)
    }
}

/// Derivative of [`diag_transform`], `½(1 + x/√(x² + 4γ))`, always in (0, 1).
#[inline]
pub fn diag_transform_grad(x: f64, gamma: f64) -> f64 {
    let r = x.hypot(2.0 * gamma.sqrt());
    diag_transform(x, gamma) / r
}

/// Inverse of [`diag_transform`] on `y > 0`: `y − γ/y`.
#[inline]
pub fn diag_transform_inv(y: f64, gamma: f64) -> f64 {
    y - gamma / y
}

/// `log σ(s)` without overflow.
#[inline]
pub fn log_sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        -(-s).exp().ln_1p()
    } else {
        s - s.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log((1/n) Σ exp(v))`, stable for arguments spanning hundreds of nats.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

/// Sum whose result does not depend on the order of `terms`.
///
/// Terms are sorted before accumulation, so any permutation of the input
/// yields a bitwise-identical total.
pub fn order_invariant_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}
