//! Standard normal distribution helpers.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Standard normal CDF, `0.5 * erfc(-x / sqrt(2))`.
///
/// `libm::erfc` is a port of the FreeBSD implementation and is accurate to
/// within an ulp or two over the whole real line, including the tails.
pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}
