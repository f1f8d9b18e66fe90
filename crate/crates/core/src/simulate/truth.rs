//! Quantiles of a death atom plus a finite normal mixture.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normal;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TruthError {
    #[error("death mass {death_mass} is at least tau = {tau}; the quantile is the sentinel")]
    DeathMassExceedsTau { death_mass: f64, tau: f64 },
    #[error("could not bracket the quantile")]
    BracketFailure,
    #[error("invalid mixture: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalComponent {
    pub mass: f64,
    pub mean: f64,
    pub sd: f64,
}

/// `F(y) = death_mass + Σ mass_j Φ((y − mean_j) / sd_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureTruthSpec {
    pub death_mass: f64,
    pub components: Vec<NormalComponent>,
}

impl MixtureTruthSpec {
    pub fn cdf(&self, y: f64) -> f64 {
        self.death_mass
            + self
                .components
                .iter()
                .map(|c| c.mass * normal::cdf((y - c.mean) / c.sd))
                .sum::<f64>()
    }

    /// Outcome distribution conditional on survival.
    pub fn survivors(&self) -> Self {
        let alive = 1.0 - self.death_mass;
        Self {
            death_mass: 0.0,
            components: self
                .components
                .iter()
                .map(|c| NormalComponent {
                    mass: c.mass / alive,
                    ..*c
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), TruthError> {
        if self.components.is_empty() {
            return Err(TruthError::InvalidSpec("no components".into()));
        }
        let mut total = self.death_mass;
        for c in &self.components {
            if !(c.mass >= 0.0 && c.sd > 0.0 && c.mean.is_finite() && c.sd.is_finite()) {
                return Err(TruthError::InvalidSpec(format!("bad component {c:?}")));
            }
            total += c.mass;
        }
        if self.death_mass.is_nan() || self.death_mass < 0.0 || (total - 1.0).abs() > 1e-12 {
            return Err(TruthError::InvalidSpec(format!("masses sum to {total}")));
        }
        Ok(())
    }
}

/// Solves `F(y) = τ` by bisection.
pub fn analytic_truth(spec: &MixtureTruthSpec, tau: f64) -> Result<f64, TruthError> {
    spec.validate()?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(TruthError::InvalidSpec(format!("tau = {tau}")));
    }
    if spec.death_mass >= tau {
        return Err(TruthError::DeathMassExceedsTau {
            death_mass: spec.death_mass,
            tau,
        });
    }
    let mut lo = spec
        .components
        .iter()
        .map(|c| c.mean - c.sd)
        .fold(f64::INFINITY, f64::min);
    let mut hi = spec
        .components
        .iter()
        .map(|c| c.mean + c.sd)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut width = (hi - lo).max(1.0);
    let mut expansions = 0;
    while spec.cdf(lo) >= tau || spec.cdf(hi) < tau {
        if expansions == 64 {
            return Err(TruthError::BracketFailure);
        }
        if spec.cdf(lo) >= tau {
            lo -= width;
        }
        if spec.cdf(hi) < tau {
            hi += width;
        }
        width *= 2.0;
        expansions += 1;
    }
    while hi - lo > 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if spec.cdf(mid) >= tau {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(death: f64, comps: &[(f64, f64, f64)]) -> MixtureTruthSpec {
        MixtureTruthSpec {
            death_mass: death,
            components: comps
                .iter()
                .map(|&(mass, mean, sd)| NormalComponent { mass, mean, sd })
                .collect(),
        }
    }

    #[test]
    fn single_normal_median_is_mean() {
        let q = analytic_truth(&spec(0.0, &[(1.0, 2.5, 3.0)]), 0.5).unwrap();
        assert!((q - 2.5).abs() < 1e-10);
        let q = analytic_truth(&spec(0.0, &[(1.0, 0.0, 1.0)]), 0.975).unwrap();
        assert!((q - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn death_mass_at_tau_is_rejected() {
        let s = spec(0.5, &[(0.5, 0.0, 1.0)]);
        assert!(matches!(
            analytic_truth(&s, 0.5),
            Err(TruthError::DeathMassExceedsTau { .. })
        ));
    }

    #[test]
    fn masses_must_sum_to_one() {
        let s = spec(0.1, &[(0.5, 0.0, 1.0)]);
        assert!(matches!(
            analytic_truth(&s, 0.5),
            Err(TruthError::InvalidSpec(_))
        ));
    }

    #[test]
    fn far_components_are_bracketed() {
        let s = spec(0.2, &[(0.4, -1e6, 1.0), (0.4, 1e6, 1.0)]);
        let q = analytic_truth(&s, 0.7).unwrap();
        assert!((s.cdf(q) - 0.7).abs() < 1e-6);
    }
}
