//! Standard normal density and distribution, and closed-form Gaussian moments
//! of the soft-threshold operator.

use crate::math::{erfc, exp, sqrt};

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * exp(-0.5 * x * x)
}

/// Density of `N(0, var)` at `x`.
#[inline]
pub fn pdf_var(x: f64, var: f64) -> f64 {
    let s = sqrt(var);
    pdf(x / s) / s
}

/// Standard normal CDF, accurate in both tails.
#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * core::f64::consts::FRAC_1_SQRT_2)
}

/// Moments of `soft(w, lambda)` for `w ~ N(mu, sd^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SoftMoments {
    /// `E[soft(w)]`
    pub mean: f64,
    /// `E[soft(w)^2]`
    pub second: f64,
    /// `P(|w| > lambda)`, i.e. the mean derivative of the operator.
    pub active: f64,
}

// E[(w - l)_+^k] for k = 0, 1, 2.
fn positive_part(mu: f64, sd: f64, lambda: f64) -> (f64, f64, f64) {
    let d = mu - lambda;
    if sd <= 0.0 {
        return if d > 0.0 {
            (1.0, d, d * d)
        } else {
            (0.0, 0.0, 0.0)
        };
    }
    let t = d / sd;
    let big_phi = cdf(t);
    let small_phi = pdf(t);
    (
        big_phi,
        d * big_phi + sd * small_phi,
        (d * d + sd * sd) * big_phi + d * sd * small_phi,
    )
}

/// Closed-form moments of the soft threshold of a Gaussian. An infinite
/// threshold yields all zeros.
pub fn soft_moments(mu: f64, sd: f64, lambda: f64) -> SoftMoments {
    if lambda == f64::INFINITY {
        return SoftMoments::default();
    }
    let (p_hi, m1_hi, m2_hi) = positive_part(mu, sd, lambda);
    let (p_lo, m1_lo, m2_lo) = positive_part(-mu, sd, lambda);
    SoftMoments {
        mean: m1_hi - m1_lo,
        second: m2_hi + m2_lo,
        active: p_hi + p_lo,
    }
}
