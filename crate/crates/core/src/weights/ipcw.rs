//! Censoring weights for regimen deviation, missed outcome assessments and
//! invalid outcome results, fit within the baseline arm `a_0`.

use std::sync::Arc;

use super::models::{FeatureMap, FittedPropensity, TreatmentModel};
use super::{arm_prob, PositivityTracker, Regimen, WeightOptions, WeightVector, WeightsError};
use crate::cohort::{Censoring, LongitudinalCohort};
use crate::propensity::{fit_logistic, Design, FitOptions, PropensityModel};

/// Logistic model for `P(C_missing = 1 | history at visit)`.
#[derive(Clone)]
pub struct CensoringModel {
    pub model: PropensityModel,
    pub features: Arc<dyn FeatureMap>,
    /// Visit whose history is passed to `features`.
    pub visit: usize,
}

impl std::fmt::Debug for CensoringModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CensoringModel")
            .field("model", &self.model)
            .field("visit", &self.visit)
            .finish_non_exhaustive()
    }
}

impl CensoringModel {
    /// `P(C_missing = 0 | ·)` for one subject.
    pub fn prob_observed(
        &self,
        cohort: &LongitudinalCohort,
        subject: usize,
        row: &mut Vec<f64>,
    ) -> f64 {
        self.features.write_row(cohort, subject, self.visit, row);
        1.0 - self.model.prob_treated(row)
    }
}

/// Fitted censoring components.
#[derive(Debug, Clone)]
pub struct IpcwFit {
    /// Models for `P(A_k = 1 | ·)`, `k = 1..=K`, fit among those still on
    /// the regimen; the baseline slot is empty.
    pub deviation: FittedPropensity,
    pub missing: CensoringModel,
    /// Empirical `P(C_invalid = 1 | assessed)`.
    pub invalid_fraction: f64,
}

fn on_regimen_through(
    cohort: &LongitudinalCohort,
    i: usize,
    last: usize,
    regimen: &Regimen,
) -> bool {
    (0..last).all(|k| cohort.treatment(i, k) == Some(regimen.arm(k)))
}

/// Fits deviation, missingness and invalid-result components within the
/// baseline arm `a_0` of `regimen`.
pub fn fit_ipcw_models(
    cohort: &LongitudinalCohort,
    regimen: &Regimen,
    features: Arc<dyn FeatureMap>,
    opts: &FitOptions,
) -> Result<IpcwFit, WeightsError> {
    let kd = cohort.n_decisions();
    if regimen.len() != kd {
        return Err(WeightsError::RegimenLength {
            regimen: regimen.len(),
            cohort: kd,
        });
    }
    let mut row = Vec::new();
    let mut models = vec![None];
    for k in 1..kd {
        let mut design = Design::new(features.names(cohort, k));
        let mut response = Vec::new();
        for i in 0..cohort.n_subjects() {
            if cohort.dead(i, k)
                || cohort.treatment(i, k).is_none()
                || !on_regimen_through(cohort, i, k, regimen)
            {
                continue;
            }
            features.write_row(cohort, i, k, &mut row);
            design.push_row(&row);
            response.push(cohort.treatment(i, k) == Some(true));
        }
        if response.is_empty() {
            return Err(WeightsError::EmptyStratum {
                what: format!("deviation model for visit {k}"),
            });
        }
        let model = fit_logistic(&design, &response, None, opts)
            .map_err(|source| WeightsError::Fit { visit: k, source })?;
        models.push(Some(model));
    }

    // Survivors on the regimen throughout: who attended, and of those, whose
    // result was usable.
    let last = kd - 1;
    let mut design = Design::new(features.names(cohort, last));
    let mut missing = Vec::new();
    let (mut assessed, mut invalid) = (0usize, 0usize);
    for i in 0..cohort.n_subjects() {
        if !cohort.survived(i) || !on_regimen_through(cohort, i, kd, regimen) {
            continue;
        }
        features.write_row(cohort, i, last, &mut row);
        design.push_row(&row);
        let c = cohort.censoring(i);
        missing.push(c == Censoring::MissingOutcome);
        if c != Censoring::MissingOutcome {
            assessed += 1;
            invalid += usize::from(c == Censoring::InvalidOutcome);
        }
    }
    if !missing.iter().any(|&m| m) {
        return Err(WeightsError::EmptyStratum {
            what: "missing-outcome model has no missing outcomes".into(),
        });
    }
    if assessed == 0 {
        return Err(WeightsError::EmptyStratum {
            what: "no assessed outcomes for the invalid-result fraction".into(),
        });
    }
    let missing_model =
        fit_logistic(&design, &missing, None, opts).map_err(|source| WeightsError::Fit {
            visit: last,
            source,
        })?;
    Ok(IpcwFit {
        deviation: FittedPropensity {
            models,
            features: features.clone(),
        },
        missing: CensoringModel {
            model: missing_model,
            features,
            visit: last,
        },
        invalid_fraction: invalid as f64 / assessed as f64,
    })
}

/// Censoring weights for subjects in baseline arm `a_0`.
///
/// * survivor with a valid outcome:
///   `1 / (∏_{k=1}^{K} P(A_k = a_k | ·) · P(C_missing = 0 | ·) · (1 − invalid_fraction))`;
/// * decedent between visits `M − 1` and `M`: `1 / ∏_{k=1}^{M−1} P(A_k = a_k | ·)`
///   (1 when `M = 1`);
/// * deviators, missing and invalid outcomes, and the other baseline arm: 0.
pub fn ipcw(
    cohort: &LongitudinalCohort,
    regimen: &Regimen,
    deviation: &dyn TreatmentModel,
    missing: &CensoringModel,
    invalid_fraction: f64,
    opts: &WeightOptions,
) -> Result<WeightVector, WeightsError> {
    let kd = cohort.n_decisions();
    if regimen.len() != kd {
        return Err(WeightsError::RegimenLength {
            regimen: regimen.len(),
            cohort: kd,
        });
    }
    if !(0.0..1.0).contains(&invalid_fraction) {
        return Err(WeightsError::InvalidProbability(invalid_fraction));
    }
    let probs = (1..kd)
        .map(|k| deviation.treated_probabilities(cohort, k))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tracker = PositivityTracker::new(opts);
    let mut row = Vec::new();
    let mut w = vec![0.0; cohort.n_subjects()];
    for (i, wi) in w.iter_mut().enumerate() {
        let made = cohort.decisions_made(i);
        if made == 0 || !on_regimen_through(cohort, i, made, regimen) {
            continue;
        }
        let mut denom = 1.0;
        for k in 1..made {
            let p = arm_prob(probs[k - 1][i], regimen.arm(k));
            tracker.check(cohort, i, k, p)?;
            denom *= p;
        }
        if cohort.survived(i) {
            if cohort.censoring(i) != Censoring::Observed {
                continue;
            }
            let p_obs = missing.prob_observed(cohort, i, &mut row);
            tracker.check(cohort, i, missing.visit, p_obs)?;
            denom *= p_obs * (1.0 - invalid_fraction);
        }
        *wi = 1.0 / denom;
    }
    Ok(WeightVector::from_parts(
        w,
        regimen.clone(),
        tracker.min_ps,
        tracker.n_below,
    ))
}
