//! Per-visit treatment models and the feature maps they are fit on.

use std::sync::Arc;

use super::{Regimen, WeightsError};
use crate::cohort::LongitudinalCohort;
use crate::propensity::{fit_logistic, Design, FitOptions, PropensityModel};

/// Maps a subject's history up to a visit onto a design row.
///
/// Rows include the intercept. Implementations must read only fields at or
/// before `visit`.
pub trait FeatureMap: Send + Sync {
    fn names(&self, cohort: &LongitudinalCohort, visit: usize) -> Vec<String>;
    fn write_row(
        &self,
        cohort: &LongitudinalCohort,
        subject: usize,
        visit: usize,
        out: &mut Vec<f64>,
    );
}

/// Which covariate visits enter the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateScope {
    /// `L_0` only.
    Baseline,
    /// `L_k` only.
    Current,
    /// `L_0, ..., L_k`.
    #[default]
    Cumulative,
}

/// Intercept, covariate history and optionally the prior treatments
/// `A_0..A_{k-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HistoryFeatures {
    pub covariates: CovariateScope,
    pub treatment_history: bool,
}

impl HistoryFeatures {
    fn visits(&self, visit: usize) -> std::ops::Range<usize> {
        match self.covariates {
            CovariateScope::Baseline => 0..1,
            CovariateScope::Current => visit..visit + 1,
            CovariateScope::Cumulative => 0..visit + 1,
        }
    }
}

impl FeatureMap for HistoryFeatures {
    fn names(&self, cohort: &LongitudinalCohort, visit: usize) -> Vec<String> {
        let mut names = vec!["(intercept)".to_string()];
        for k in self.visits(visit) {
            names.extend((1..=cohort.n_covariates()).map(|j| format!("L{k}_{j}")));
        }
        if self.treatment_history {
            names.extend((0..visit).map(|k| format!("A{k}")));
        }
        names
    }

    fn write_row(
        &self,
        cohort: &LongitudinalCohort,
        subject: usize,
        visit: usize,
        out: &mut Vec<f64>,
    ) {
        out.clear();
        out.push(1.0);
        for k in self.visits(visit) {
            out.extend_from_slice(cohort.covariates(subject, k));
        }
        if self.treatment_history {
            out.extend((0..visit).map(|k| match cohort.treatment(subject, k) {
                Some(true) => 1.0,
                Some(false) => 0.0,
                None => f64::NAN,
            }));
        }
    }
}

/// Subjects used to fit the model for decision `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    /// Alive at `k` and on the regimen through `k − 1`.
    #[default]
    OnRegimen,
    /// Alive at `k`.
    AtRisk,
}

fn in_stratum(
    cohort: &LongitudinalCohort,
    i: usize,
    k: usize,
    regimen: &Regimen,
    stratum: Stratum,
) -> bool {
    if cohort.dead(i, k) || cohort.treatment(i, k).is_none() {
        return false;
    }
    match stratum {
        Stratum::AtRisk => true,
        Stratum::OnRegimen => (0..k).all(|j| cohort.treatment(i, j) == Some(regimen.arm(j))),
    }
}

/// Source of `P(A_k = 1 | history)`.
pub trait TreatmentModel: Send + Sync {
    /// `P(A_k = 1 | history)` for every subject alive at `visit`; NaN for
    /// everyone else.
    fn treated_probabilities(
        &self,
        cohort: &LongitudinalCohort,
        visit: usize,
    ) -> Result<Vec<f64>, WeightsError>;
}

/// One fitted logistic model per decision visit.
#[derive(Clone)]
pub struct FittedPropensity {
    /// `None` for visits without a model (e.g. baseline in IPCW deviation models).
    pub models: Vec<Option<PropensityModel>>,
    pub features: Arc<dyn FeatureMap>,
}

impl std::fmt::Debug for FittedPropensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FittedPropensity")
            .field("models", &self.models)
            .finish_non_exhaustive()
    }
}

impl FittedPropensity {
    pub fn model(&self, visit: usize) -> Option<&PropensityModel> {
        self.models.get(visit).and_then(Option::as_ref)
    }
}

impl TreatmentModel for FittedPropensity {
    fn treated_probabilities(
        &self,
        cohort: &LongitudinalCohort,
        visit: usize,
    ) -> Result<Vec<f64>, WeightsError> {
        let model = self.model(visit).ok_or(WeightsError::HistoryMismatch {
            visit,
            detail: "no model for this visit".into(),
        })?;
        let mut row = Vec::with_capacity(model.dim());
        let mut out = vec![f64::NAN; cohort.n_subjects()];
        for (i, slot) in out.iter_mut().enumerate() {
            if cohort.dead(i, visit) {
                continue;
            }
            self.features.write_row(cohort, i, visit, &mut row);
            if row.len() != model.dim() {
                return Err(WeightsError::HistoryMismatch {
                    visit,
                    detail: format!(
                        "model expects {} features, history gives {}",
                        model.dim(),
                        row.len()
                    ),
                });
            }
            *slot = model.prob_treated(&row);
        }
        Ok(out)
    }
}

/// Design and response of the decision-`visit` treatment model.
pub fn visit_design(
    cohort: &LongitudinalCohort,
    visit: usize,
    regimen: &Regimen,
    features: &dyn FeatureMap,
    stratum: Stratum,
) -> Result<(Design, Vec<bool>), WeightsError> {
    let mut design = Design::with_capacity(features.names(cohort, visit), cohort.n_subjects());
    let mut response = Vec::with_capacity(cohort.n_subjects());
    let mut row = Vec::with_capacity(design.n_cols());
    for i in 0..cohort.n_subjects() {
        if !in_stratum(cohort, i, visit, regimen, stratum) {
            continue;
        }
        features.write_row(cohort, i, visit, &mut row);
        if row.iter().any(|x| x.is_nan()) {
            return Err(WeightsError::HistoryMismatch {
                visit,
                detail: format!("subject {} has undefined history", cohort.id(i)),
            });
        }
        design.push_row(&row);
        response.push(cohort.treatment(i, visit) == Some(true));
    }
    if response.is_empty() {
        return Err(WeightsError::EmptyStratum {
            what: format!("treatment model for visit {visit}"),
        });
    }
    Ok((design, response))
}

/// Fits `P(A_k = 1 | history)` for every decision visit.
pub fn fit_visit_models(
    cohort: &LongitudinalCohort,
    regimen: &Regimen,
    features: Arc<dyn FeatureMap>,
    stratum: Stratum,
    opts: &FitOptions,
) -> Result<FittedPropensity, WeightsError> {
    let mut models = Vec::with_capacity(cohort.n_decisions());
    for k in 0..cohort.n_decisions() {
        let (design, response) = visit_design(cohort, k, regimen, features.as_ref(), stratum)?;
        let model = fit_logistic(&design, &response, None, opts)
            .map_err(|source| WeightsError::Fit { visit: k, source })?;
        models.push(Some(model));
    }
    Ok(FittedPropensity { models, features })
}
