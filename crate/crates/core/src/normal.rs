//! Standard normal distribution helpers.

use libm::erfc;
use statrs::function::erf::erfc_inv;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// `Phi(x)`.
#[inline]
pub fn cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * erfc(-x / SQRT_2)
    }
}

/// `Phi^{-1}(p)` for `p` in `(0, 1)`.
#[inline]
pub fn quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        // One Newton step polishes the rational approximation.
        let x = -SQRT_2 * erfc_inv(2.0 * p);
        let dens = pdf(x);
        if dens > 0.0 {
            x - (cdf(x) - p) / dens
        } else {
            x
        }
    }
}

#[inline]
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Phi(b) - Phi(a)` for `a <= b`, evaluated on the side of zero that keeps
/// precision in the tails.
pub fn interval_prob(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        cdf(-a) - cdf(-b)
    } else {
        cdf(b) - cdf(a)
    }
}
