//! Weighted quantile estimator and its estimating equation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantileError {
    #[error("all weights are zero")]
    AllZeroWeights,
    #[error("NaN in {0}")]
    NaN(&'static str),
    #[error("negative or infinite weight {0}")]
    InvalidWeight(f64),
    #[error("{values} values but {weights} weights")]
    LengthMismatch { values: usize, weights: usize },
    #[error("tau must lie in (0, 1), got {0}")]
    TauOutOfRange(f64),
    #[error("no values")]
    Empty,
}

/// Quantile level `τ ∈ (0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileSpec {
    tau: f64,
}

impl QuantileSpec {
    pub fn new(tau: f64) -> Result<Self, QuantileError> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self { tau })
        } else {
            Err(QuantileError::TauOutOfRange(tau))
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// True when a death fraction this large can pull the quantile onto the
    /// sentinel.
    pub fn death_warning(&self, death_fraction: f64) -> bool {
        death_fraction >= self.tau
    }
}

/// Relative slack on the cumulative-weight comparison, so that rescaling the
/// weights cannot move the root across an exact tie with `τ`.
const TIE_SLACK: f64 = 1e-12;

fn check_inputs(values: &[f64], weights: &[f64], tau: f64) -> Result<f64, QuantileError> {
    QuantileSpec::new(tau)?;
    if values.len() != weights.len() {
        return Err(QuantileError::LengthMismatch {
            values: values.len(),
            weights: weights.len(),
        });
    }
    if values.is_empty() {
        return Err(QuantileError::Empty);
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(QuantileError::NaN("values"));
    }
    let mut total = 0.0;
    for &w in weights {
        if w.is_nan() {
            return Err(QuantileError::NaN("weights"));
        }
        if !(w >= 0.0 && w.is_finite()) {
            return Err(QuantileError::InvalidWeight(w));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(QuantileError::AllZeroWeights);
    }
    Ok(total)
}

/// Smallest value `v` with `Σ_{Ỹ_i ≤ v} w_i / Σ w ≥ τ`.
///
/// This is the leftmost root of the estimating equation and a minimizer of
/// the weighted check loss.
pub fn weighted_quantile(values: &[f64], weights: &[f64], tau: f64) -> Result<f64, QuantileError> {
    let total = check_inputs(values, weights, tau)?;
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .copied()
        .zip(weights.iter().copied())
        .collect();
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let target = tau * total * (1.0 - TIE_SLACK);
    let mut cum = 0.0;
    let mut j = 0;
    while j < pairs.len() {
        let v = pairs[j].0;
        while j < pairs.len() && pairs[j].0 == v {
            cum += pairs[j].1;
            j += 1;
        }
        if cum >= target {
            return Ok(v);
        }
    }
    Ok(pairs[pairs.len() - 1].0)
}

/// `Ψ_N(q) = N⁻¹ Σ w_i (1{Ỹ_i ≤ q} − τ)`.
pub fn estimating_equation(
    values: &[f64],
    weights: &[f64],
    tau: f64,
    q: f64,
) -> Result<f64, QuantileError> {
    check_inputs(values, weights, tau)?;
    let s: f64 = values
        .iter()
        .zip(weights)
        .map(|(&v, &w)| w * (f64::from(u8::from(v <= q)) - tau))
        .sum();
    Ok(s / values.len() as f64)
}

/// Weighted check loss `Σ w_i ρ_τ(Ỹ_i − q)` with `ρ_τ(u) = u (τ − 1{u < 0})`.
pub fn check_loss(values: &[f64], weights: &[f64], tau: f64, q: f64) -> f64 {
    values
        .iter()
        .zip(weights)
        .map(|(&v, &w)| {
            let u = v - q;
            w * u * (tau - f64::from(u8::from(u < 0.0)))
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unweighted_median() {
        assert_eq!(
            weighted_quantile(&[1.0, 2.0, 3.0], &[1.0; 3], 0.5).unwrap(),
            2.0
        );
    }

    #[test]
    fn weight_mass_forces_top_value() {
        assert_eq!(
            weighted_quantile(&[1.0, 2.0, 3.0], &[1.0, 1.0, 8.0], 0.5).unwrap(),
            3.0
        );
    }

    #[test]
    fn leftmost_root_on_exact_tie() {
        // Cumulative share hits exactly 0.5 at 2.
        assert_eq!(
            weighted_quantile(&[4.0, 1.0, 2.0, 3.0], &[1.0; 4], 0.5).unwrap(),
            2.0
        );
    }

    #[test]
    fn estimating_equation_limits() {
        let v = [1.0, 2.0, 3.0];
        let w = [1.0; 3];
        assert_eq!(estimating_equation(&v, &w, 0.3, 0.0).unwrap(), -0.3);
        assert!((estimating_equation(&v, &w, 0.3, 10.0).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn root_jump_bounded_by_one_over_n() {
        let v: Vec<f64> = (0..101).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let w = vec![1.0; 101];
        let q = weighted_quantile(&v, &w, 0.5).unwrap();
        assert!(estimating_equation(&v, &w, 0.5, q).unwrap().abs() <= 1.0 / 101.0);
    }

    #[test]
    fn errors() {
        assert_eq!(
            weighted_quantile(&[1.0], &[0.0], 0.5),
            Err(QuantileError::AllZeroWeights)
        );
        assert_eq!(
            weighted_quantile(&[f64::NAN], &[1.0], 0.5),
            Err(QuantileError::NaN("values"))
        );
        assert_eq!(
            weighted_quantile(&[1.0], &[f64::NAN], 0.5),
            Err(QuantileError::NaN("weights"))
        );
        assert_eq!(
            weighted_quantile(&[1.0], &[1.0], 1.0),
            Err(QuantileError::TauOutOfRange(1.0))
        );
        assert!(matches!(
            weighted_quantile(&[1.0, 2.0], &[1.0], 0.5),
            Err(QuantileError::LengthMismatch { .. })
        ));
        assert_eq!(
            weighted_quantile(&[1.0], &[-1.0], 0.5),
            Err(QuantileError::InvalidWeight(-1.0))
        );
    }

    #[test]
    fn sentinel_choice_does_not_move_quantile() {
        let ys = [0.3, -0.2, 1.7, 2.2, 0.9, 1.1, 3.0, -0.5];
        let dead = [false, true, false, false, true, false, false, false];
        let w = [1.2, 0.7, 2.0, 0.4, 1.1, 0.9, 1.5, 0.8];
        let composite = |s: f64| -> Vec<f64> {
            ys.iter()
                .zip(&dead)
                .map(|(&y, &d)| if d { s } else { y })
                .collect()
        };
        let a = weighted_quantile(&composite(-10.0), &w, 0.5).unwrap();
        let b = weighted_quantile(&composite(-1000.0), &w, 0.5).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    fn sample() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (1usize..200).prop_flat_map(|n| {
            (
                // Coarse grid to exercise ties.
                prop::collection::vec((-50i32..50).prop_map(|k| k as f64 * 0.25), n),
                prop::collection::vec(prop_oneof![Just(0.0), 0.01f64..10.0], n),
                0.01f64..0.99,
            )
                .prop_filter("positive mass", |(_, w, _)| w.iter().sum::<f64>() > 0.0)
        })
    }

    proptest! {
        #[test]
        fn root_brackets_sign_change((v, w, tau) in sample()) {
            let q = weighted_quantile(&v, &w, tau).unwrap();
            let total: f64 = w.iter().sum();
            let n = v.len() as f64;
            let at = estimating_equation(&v, &w, tau, q).unwrap();
            prop_assert!(at >= -1e-12 * total / n);
            let below = v.iter().copied().filter(|&x| x < q).fold(f64::NEG_INFINITY, f64::max);
            if below.is_finite() {
                prop_assert!(estimating_equation(&v, &w, tau, below).unwrap() < 0.0);
            }
        }

        #[test]
        fn psi_is_monotone((v, w, tau) in sample(), a in -15.0f64..15.0, b in -15.0f64..15.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(
                estimating_equation(&v, &w, tau, lo).unwrap() <= estimating_equation(&v, &w, tau, hi).unwrap()
            );
        }

        #[test]
        fn scale_equivariance((v, w, tau) in sample(), c in prop_oneof![Just(0.5), Just(2.0), Just(4.0)], d in -8i32..8) {
            let d = d as f64;
            let shifted: Vec<f64> = v.iter().map(|x| c * x + d).collect();
            let q = weighted_quantile(&v, &w, tau).unwrap();
            prop_assert_eq!(weighted_quantile(&shifted, &w, tau).unwrap(), c * q + d);
        }

        #[test]
        fn weight_scale_invariance((v, w, tau) in sample(), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            let q = weighted_quantile(&v, &w, tau).unwrap();
            prop_assert_eq!(weighted_quantile(&v, &scaled, tau).unwrap().to_bits(), q.to_bits());
        }

        #[test]
        fn minimizes_check_loss_over_sample((v, w, tau) in sample()) {
            let q = weighted_quantile(&v, &w, tau).unwrap();
            let best = check_loss(&v, &w, tau, q);
            let total: f64 = w.iter().sum();
            for &x in &v {
                prop_assert!(best <= check_loss(&v, &w, tau, x) + 1e-9 * (1.0 + total));
            }
        }
    }
}
