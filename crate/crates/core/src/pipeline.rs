//! End-to-end estimation: composite outcome, propensity models, weights and
//! the weighted quantile.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cohort::{build_composite_with, CompositeOutcome, Direction, LongitudinalCohort};
use crate::inference::{avar_estimated_ps, avar_known_ps, FittedScore, VarianceEstimate};
use crate::propensity::{fit_logistic, Design, FitOptions};
use crate::quantile::{weighted_quantile, QuantileSpec};
use crate::weights::{
    combine, fit_ipcw_models, fit_visit_models, ipcw, iptw_time_varying, visit_design,
    CovariateScope, FeatureMap, FittedPropensity, HistoryFeatures, IpcwFit, Regimen, Stratum,
    TreatmentModel, WeightOptions, WeightVector,
};
use crate::Error;

/// How subjects are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    /// IPTW with per-visit logistic models fit on the data.
    #[default]
    Estimated,
    /// IPTW with a supplied treatment model.
    Known,
    /// Baseline IPTW times censoring weights for deviation, missed and
    /// invalid outcomes.
    EstimatedWithCensoring,
    /// Unit weights on subjects whose full treatment history equals the
    /// regimen; zero otherwise.
    Unweighted,
    /// Unit weight for every subject.
    Uniform,
}

/// Estimation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    pub tau: f64,
    pub regimen: Regimen,
    /// Decedent value on the ranking scale; `None` picks one below the data.
    pub sentinel: Option<f64>,
    pub direction: Direction,
    pub mode: WeightingMode,
    pub weights: WeightOptions,
    pub covariates: CovariateScope,
    pub treatment_history: bool,
    pub stratum: Stratum,
    #[serde(skip)]
    pub fit: FitOptions,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            regimen: Regimen::point(true),
            sentinel: None,
            direction: Direction::HigherIsBetter,
            mode: WeightingMode::Estimated,
            weights: WeightOptions::default(),
            covariates: CovariateScope::Cumulative,
            treatment_history: false,
            stratum: Stratum::OnRegimen,
            fit: FitOptions::default(),
        }
    }
}

impl EstimationConfig {
    pub fn new(tau: f64, regimen: Regimen, mode: WeightingMode) -> Self {
        Self {
            tau,
            regimen,
            mode,
            ..Default::default()
        }
    }

    fn features(&self) -> Arc<dyn FeatureMap> {
        Arc::new(HistoryFeatures {
            covariates: self.covariates,
            treatment_history: self.treatment_history,
        })
    }
}

/// Result of one estimation run.
#[derive(Debug, Clone)]
pub struct Estimate {
    /// Quantile on the clinical outcome scale.
    pub q: f64,
    /// Quantile on the ranking scale.
    pub q_ranked: f64,
    pub composite: CompositeOutcome,
    /// Ranking-scale values with zero-weight censored entries set to the sentinel.
    pub values: Vec<f64>,
    pub weights: WeightVector,
    pub propensity: Option<FittedPropensity>,
    pub censoring: Option<IpcwFit>,
    /// `Σ w·1{dead} / Σ w`.
    pub weighted_death_fraction: f64,
    /// Quantile landed on the sentinel.
    pub at_sentinel: bool,
    pub warnings: Vec<String>,
}

fn on_regimen_weights(cohort: &LongitudinalCohort, regimen: &Regimen, all: bool) -> WeightVector {
    let w = (0..cohort.n_subjects())
        .map(|i| {
            let follows =
                (0..cohort.n_decisions()).all(|k| cohort.treatment(i, k) == Some(regimen.arm(k)));
            f64::from(u8::from(all || follows))
        })
        .collect();
    WeightVector::from_raw(w, regimen.clone())
}

/// Runs the estimator on `cohort`. `known` supplies the treatment model in
/// [`WeightingMode::Known`].
pub fn estimate(
    cohort: &LongitudinalCohort,
    config: &EstimationConfig,
    known: Option<&dyn TreatmentModel>,
) -> Result<Estimate, Error> {
    estimate_with_features(cohort, config, known, config.features())
}

/// [`estimate`] with a custom feature map for the fitted models.
pub fn estimate_with_features(
    cohort: &LongitudinalCohort,
    config: &EstimationConfig,
    known: Option<&dyn TreatmentModel>,
    features: Arc<dyn FeatureMap>,
) -> Result<Estimate, Error> {
    let spec = QuantileSpec::new(config.tau)?;
    let composite = build_composite_with(cohort, config.sentinel, config.direction)?;
    let regimen = &config.regimen;
    if regimen.len() != cohort.n_decisions() && config.mode != WeightingMode::Uniform {
        return Err(crate::weights::WeightsError::RegimenLength {
            regimen: regimen.len(),
            cohort: cohort.n_decisions(),
        }
        .into());
    }
    let mut propensity = None;
    let mut censoring = None;
    let weights = match config.mode {
        WeightingMode::Estimated => {
            let fitted = fit_visit_models(
                cohort,
                regimen,
                features.clone(),
                config.stratum,
                &config.fit,
            )?;
            let w = iptw_time_varying(cohort, regimen, &fitted, &config.weights)?;
            propensity = Some(fitted);
            w
        }
        WeightingMode::Known => {
            let model = known
                .ok_or_else(|| Error::Config("known weighting needs a treatment model".into()))?;
            iptw_time_varying(cohort, regimen, model, &config.weights)?
        }
        WeightingMode::EstimatedWithCensoring => {
            let (design, response) =
                visit_design(cohort, 0, regimen, features.as_ref(), config.stratum)?;
            let model = fit_logistic(&design, &response, None, &config.fit)
                .map_err(|source| crate::weights::WeightsError::Fit { visit: 0, source })?;
            let fitted = FittedPropensity {
                models: vec![Some(model)],
                features: features.clone(),
            };
            let base =
                crate::weights::iptw_point(cohort, regimen.arm(0), &fitted, &config.weights)?;
            let fit = fit_ipcw_models(cohort, regimen, features.clone(), &config.fit)?;
            let c = ipcw(
                cohort,
                regimen,
                &fit.deviation,
                &fit.missing,
                fit.invalid_fraction,
                &config.weights,
            )?;
            propensity = Some(fitted);
            censoring = Some(fit);
            combine(&base, &c)?
        }
        WeightingMode::Unweighted => on_regimen_weights(cohort, regimen, false),
        WeightingMode::Uniform => on_regimen_weights(cohort, regimen, true),
    };
    let mut values = composite.values().to_vec();
    for (v, &w) in values.iter_mut().zip(&weights.w) {
        if v.is_nan() && w == 0.0 {
            *v = composite.sentinel();
        }
    }
    let q_ranked = weighted_quantile(&values, &weights.w, spec.tau())?;
    let total: f64 = weights.w.iter().sum();
    let dead_mass: f64 = weights
        .w
        .iter()
        .zip(composite.dead_mask())
        .filter(|(_, &d)| d)
        .map(|(w, _)| w)
        .sum();
    let weighted_death_fraction = dead_mass / total;
    let mut warnings = Vec::new();
    if spec.death_warning(weighted_death_fraction) {
        warnings.push(format!(
            "estimated death probability {weighted_death_fraction:.3} is at least tau = {}; the quantile may equal the sentinel",
            spec.tau()
        ));
    }
    if weights.n_below_eps > 0 {
        warnings.push(format!(
            "{} contributing probabilities below the positivity floor {}",
            weights.n_below_eps, config.weights.eps_floor
        ));
    }
    Ok(Estimate {
        q: composite.to_outcome_scale(q_ranked),
        q_ranked,
        at_sentinel: q_ranked == composite.sentinel(),
        composite,
        values,
        weights,
        propensity,
        censoring,
        weighted_death_fraction,
        warnings,
    })
}

/// Quantile only; used inside bootstrap and Monte Carlo loops.
pub fn estimate_q(
    cohort: &LongitudinalCohort,
    config: &EstimationConfig,
    known: Option<&dyn TreatmentModel>,
) -> Result<f64, Error> {
    estimate(cohort, config, known).map(|e| e.q)
}

/// Plug-in variances for a point-treatment estimate.
///
/// Always returns the known-score branch; the estimated-score branch is added
/// when the estimate carries a fitted baseline model.
pub fn point_variance(
    cohort: &LongitudinalCohort,
    config: &EstimationConfig,
    est: &Estimate,
    bandwidth: Option<f64>,
) -> Result<VarianceEstimate, Error> {
    if cohort.n_decisions() != 1 {
        return Err(Error::Config(
            "plug-in variance is available for point treatment only; use the bootstrap".into(),
        ));
    }
    let excluded = est.composite.dead_mask();
    let tau = config.tau;
    let fitted = est
        .propensity
        .as_ref()
        .and_then(|p| p.model(0).map(|m| (p, m)));
    let Some((fitted, model)) = fitted else {
        return Ok(avar_known_ps(
            &est.values,
            &est.weights.w,
            Some(excluded),
            tau,
            est.q_ranked,
            bandwidth,
        )?);
    };
    let mut design = Design::with_capacity(fitted.features.names(cohort, 0), cohort.n_subjects());
    let mut row = Vec::new();
    let mut treated = Vec::with_capacity(cohort.n_subjects());
    for i in 0..cohort.n_subjects() {
        fitted.features.write_row(cohort, i, 0, &mut row);
        design.push_row(&row);
        treated.push(cohort.treatment(i, 0) == Some(true));
    }
    let score = FittedScore {
        design: &design,
        treatment: &treated,
        arm: config.regimen.arm(0),
        model,
    };
    Ok(avar_estimated_ps(
        &est.values,
        &est.weights.w,
        Some(excluded),
        &score,
        tau,
        est.q_ranked,
        bandwidth,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Censoring, CohortBuilder};

    fn toy() -> LongitudinalCohort {
        let mut b = CohortBuilder::new(1, 1);
        let rows = [
            (0.0, true, Some(1.0)),
            (1.0, true, Some(4.0)),
            (0.0, false, Some(2.0)),
            (1.0, false, None),
            (1.0, true, Some(3.0)),
            (0.0, false, Some(0.5)),
        ];
        for (l, a, y) in rows {
            b.push(
                &[l],
                &[Some(a)],
                &[false, y.is_none()],
                y,
                Censoring::Observed,
            );
        }
        b.finish()
    }

    #[test]
    fn uniform_weights_give_plain_median() {
        let c = toy();
        let cfg = EstimationConfig {
            sentinel: Some(-100.0),
            ..EstimationConfig::new(0.5, Regimen::point(true), WeightingMode::Uniform)
        };
        let e = estimate(&c, &cfg, None).unwrap();
        // Composite: 1, 4, 2, -100, 3, 0.5 → leftmost median 1.
        assert_eq!(e.q, 1.0);
        assert!(e.warnings.is_empty());
    }

    #[test]
    fn unweighted_keeps_regimen_followers() {
        let c = toy();
        let e = estimate(
            &c,
            &EstimationConfig::new(0.5, Regimen::point(false), WeightingMode::Unweighted),
            None,
        )
        .unwrap();
        assert_eq!(e.weights.w, vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        assert_eq!(e.q, 0.5);
    }

    #[test]
    fn heavy_death_triggers_warning() {
        let mut b = CohortBuilder::new(1, 0);
        for i in 0..10 {
            let dead = i < 6;
            b.push(
                &[],
                &[Some(true)],
                &[false, dead],
                (!dead).then_some(i as f64),
                Censoring::Observed,
            );
        }
        let e = estimate(
            &b.finish(),
            &EstimationConfig::new(0.5, Regimen::point(true), WeightingMode::Uniform),
            None,
        )
        .unwrap();
        assert!(e.at_sentinel);
        assert_eq!(e.warnings.len(), 1);
    }

    #[test]
    fn known_mode_requires_model() {
        let err = estimate(
            &toy(),
            &EstimationConfig::new(0.5, Regimen::point(true), WeightingMode::Known),
            None,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn lower_is_better_reports_on_outcome_scale() {
        let c = toy();
        let cfg = EstimationConfig {
            direction: Direction::LowerIsBetter,
            ..EstimationConfig::new(0.5, Regimen::point(true), WeightingMode::Uniform)
        };
        let e = estimate(&c, &cfg, None).unwrap();
        // Ranked: -1, -4, -2, s, -3, -0.5 → leftmost median -3 → outcome 3.
        assert_eq!(e.q, 3.0);
    }
}
