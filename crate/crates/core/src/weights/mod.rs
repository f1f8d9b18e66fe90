//! Inverse-probability weights for point and time-varying treatment
//! regimens, inverse-probability-of-censoring weights, and positivity
//! diagnostics.

mod ipcw;
mod models;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::LongitudinalCohort;
use crate::propensity::PropensityError;

pub use ipcw::{fit_ipcw_models, ipcw, CensoringModel, IpcwFit};
pub use models::{
    fit_visit_models, visit_design, CovariateScope, FeatureMap, FittedPropensity, HistoryFeatures,
    Stratum, TreatmentModel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightsError {
    #[error("positivity violation: subject {subject}, visit {visit}: probability {probability:.3e} below {eps_floor}")]
    PositivityViolation {
        subject: String,
        visit: usize,
        probability: f64,
        eps_floor: f64,
    },
    #[error("history unavailable at visit {visit}: {detail}")]
    HistoryMismatch { visit: usize, detail: String },
    #[error("empty fitting stratum: {what}")]
    EmptyStratum { what: String },
    #[error("regimen has {regimen} decisions but the cohort has {cohort}")]
    RegimenLength { regimen: usize, cohort: usize },
    #[error("weight vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("model for visit {visit}: {source}")]
    Fit {
        visit: usize,
        #[source]
        source: PropensityError,
    },
    #[error("probability must lie in [0, 1], got {0}")]
    InvalidProbability(f64),
}

/// Treatment regimen `ā = (a_0, ..., a_K)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Regimen(Vec<bool>);

impl Regimen {
    pub fn new(arms: Vec<bool>) -> Self {
        Self(arms)
    }

    /// Point-treatment regimen `a`.
    pub fn point(arm: bool) -> Self {
        Self(vec![arm])
    }

    pub fn constant(arm: bool, decisions: usize) -> Self {
        Self(vec![arm; decisions])
    }

    pub fn arm(&self, k: usize) -> bool {
        self.0[k]
    }

    pub fn arms(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Regimen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.0.iter().map(|&a| if a { "1" } else { "0" }).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl FromStr for Regimen {
    type Err = String;

    /// Accepts `1`, `1,1`, `(0,0)` or `01`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().trim_start_matches('(').trim_end_matches(')');
        let arms: Result<Vec<bool>, String> = if t.contains(',') {
            t.split(',').map(|p| parse_arm(p.trim(), s)).collect()
        } else {
            t.chars().map(|c| parse_arm(&c.to_string(), s)).collect()
        };
        let arms = arms?;
        if arms.is_empty() {
            return Err(format!("empty regimen '{s}'"));
        }
        Ok(Self(arms))
    }
}

fn parse_arm(p: &str, whole: &str) -> Result<bool, String> {
    match p {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("invalid regimen '{whole}': arms must be 0 or 1")),
    }
}

/// Nonnegative per-subject weights with positivity bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub regimen: Regimen,
    /// Smallest probability among subjects with nonzero weight.
    pub min_ps: f64,
    pub n_zero: usize,
    /// Contributing probabilities below the positivity floor.
    pub n_below_eps: usize,
}

impl WeightVector {
    fn from_parts(w: Vec<f64>, regimen: Regimen, min_ps: f64, n_below_eps: usize) -> Self {
        let n_zero = w.iter().filter(|&&x| x == 0.0).count();
        Self {
            w,
            regimen,
            min_ps,
            n_zero,
            n_below_eps,
        }
    }

    /// Weights equal to one for every subject.
    pub fn ones(n: usize, regimen: Regimen) -> Self {
        Self::from_parts(vec![1.0; n], regimen, 1.0, 0)
    }

    /// Wraps externally computed weights.
    pub fn from_raw(w: Vec<f64>, regimen: Regimen) -> Self {
        Self::from_parts(w, regimen, f64::NAN, 0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.w.len() as f64
    }

    /// Writes `subject_id,weight` rows.
    pub fn write_csv<W: Write>(
        &self,
        cohort: &LongitudinalCohort,
        mut out: W,
    ) -> std::io::Result<()> {
        writeln!(out, "subject_id,weight")?;
        for (i, w) in self.w.iter().enumerate() {
            writeln!(out, "{},{}", cohort.id(i), w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightOptions {
    /// Positivity floor `ε` on contributing probabilities.
    pub eps_floor: f64,
    /// Fail on positivity violations instead of counting them.
    pub strict: bool,
    /// Multiply by the marginal probability of following the regimen.
    pub stabilize: bool,
}

impl Default for WeightOptions {
    fn default() -> Self {
        Self {
            eps_floor: 0.01,
            strict: false,
            stabilize: false,
        }
    }
}

struct PositivityTracker<'a> {
    opts: &'a WeightOptions,
    min_ps: f64,
    n_below: usize,
}

impl<'a> PositivityTracker<'a> {
    fn new(opts: &'a WeightOptions) -> Self {
        Self {
            opts,
            min_ps: f64::INFINITY,
            n_below: 0,
        }
    }

    fn check(
        &mut self,
        cohort: &LongitudinalCohort,
        subject: usize,
        visit: usize,
        p: f64,
    ) -> Result<(), WeightsError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(WeightsError::InvalidProbability(p));
        }
        self.min_ps = self.min_ps.min(p);
        if p < self.opts.eps_floor {
            if self.opts.strict || p == 0.0 {
                return Err(WeightsError::PositivityViolation {
                    subject: cohort.id(subject).into_owned(),
                    visit,
                    probability: p,
                    eps_floor: self.opts.eps_floor,
                });
            }
            self.n_below += 1;
        }
        Ok(())
    }
}

#[inline]
fn arm_prob(p_treated: f64, arm: bool) -> f64 {
    if arm {
        p_treated
    } else {
        1.0 - p_treated
    }
}

/// Fraction following `a_k` among those alive and on the regimen before `k`.
fn marginal_regimen_probs(cohort: &LongitudinalCohort, regimen: &Regimen) -> Vec<f64> {
    (0..cohort.n_decisions())
        .map(|k| {
            let (mut hit, mut tot) = (0usize, 0usize);
            for i in 0..cohort.n_subjects() {
                if cohort.dead(i, k)
                    || (0..k).any(|j| cohort.treatment(i, j) != Some(regimen.arm(j)))
                {
                    continue;
                }
                tot += 1;
                hit += usize::from(cohort.treatment(i, k) == Some(regimen.arm(k)));
            }
            if tot == 0 {
                1.0
            } else {
                hit as f64 / tot as f64
            }
        })
        .collect()
}

/// Point-treatment IPTW: `w_i = 1{A_i = a} / P̂(A_i = a | L_i)`.
pub fn iptw_point(
    cohort: &LongitudinalCohort,
    arm: bool,
    model: &dyn TreatmentModel,
    opts: &WeightOptions,
) -> Result<WeightVector, WeightsError> {
    let regimen = Regimen::point(arm);
    let probs = model.treated_probabilities(cohort, 0)?;
    let numerator = if opts.stabilize {
        marginal_regimen_probs(cohort, &Regimen::constant(arm, cohort.n_decisions()))[0]
    } else {
        1.0
    };
    let mut tracker = PositivityTracker::new(opts);
    let mut w = vec![0.0; cohort.n_subjects()];
    for (i, wi) in w.iter_mut().enumerate() {
        if cohort.treatment(i, 0) != Some(arm) {
            continue;
        }
        let p = arm_prob(probs[i], arm);
        tracker.check(cohort, i, 0, p)?;
        *wi = numerator / p;
    }
    Ok(WeightVector::from_parts(
        w,
        regimen,
        tracker.min_ps,
        tracker.n_below,
    ))
}

/// Time-varying IPTW with death-truncated histories.
///
/// Survivors: `1{Ā_K = ā_K} / ∏_{k=0}^{K} P̂(A_k = a_k | ·)`. A subject dying
/// between visits `M − 1` and `M` uses decisions `0..M−1` only.
pub fn iptw_time_varying(
    cohort: &LongitudinalCohort,
    regimen: &Regimen,
    model: &dyn TreatmentModel,
    opts: &WeightOptions,
) -> Result<WeightVector, WeightsError> {
    let kd = cohort.n_decisions();
    if regimen.len() != kd {
        return Err(WeightsError::RegimenLength {
            regimen: regimen.len(),
            cohort: kd,
        });
    }
    let probs = (0..kd)
        .map(|k| model.treated_probabilities(cohort, k))
        .collect::<Result<Vec<_>, _>>()?;
    let marginals = opts
        .stabilize
        .then(|| marginal_regimen_probs(cohort, regimen));
    let mut tracker = PositivityTracker::new(opts);
    let mut w = vec![0.0; cohort.n_subjects()];
    for (i, wi) in w.iter_mut().enumerate() {
        let made = cohort.decisions_made(i);
        if (0..made).any(|k| cohort.treatment(i, k) != Some(regimen.arm(k))) {
            continue;
        }
        let mut denom = 1.0;
        let mut numer = 1.0;
        for k in 0..made {
            let p = arm_prob(probs[k][i], regimen.arm(k));
            tracker.check(cohort, i, k, p)?;
            denom *= p;
            if let Some(m) = &marginals {
                numer *= m[k];
            }
        }
        *wi = numer / denom;
    }
    Ok(WeightVector::from_parts(
        w,
        regimen.clone(),
        tracker.min_ps,
        tracker.n_below,
    ))
}

/// Elementwise product of treatment and censoring weights.
pub fn combine(
    treatment: &WeightVector,
    censoring: &WeightVector,
) -> Result<WeightVector, WeightsError> {
    if treatment.len() != censoring.len() {
        return Err(WeightsError::LengthMismatch(
            treatment.len(),
            censoring.len(),
        ));
    }
    let w = treatment
        .w
        .iter()
        .zip(&censoring.w)
        .map(|(a, c)| a * c)
        .collect();
    let min_ps = match (treatment.min_ps.is_nan(), censoring.min_ps.is_nan()) {
        (false, false) => treatment.min_ps.min(censoring.min_ps),
        (true, _) => censoring.min_ps,
        (_, true) => treatment.min_ps,
    };
    Ok(WeightVector::from_parts(
        w,
        treatment.regimen.clone(),
        min_ps,
        treatment.n_below_eps + censoring.n_below_eps,
    ))
}

/// Summary of how close propensities come to zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    pub n: usize,
    pub min: f64,
    pub eps: f64,
    pub n_below_eps: usize,
    pub fraction_below_eps: f64,
    /// Upper edges of the histogram bins; the last bin is closed at 1.
    pub bin_edges: Vec<f64>,
    pub bin_counts: Vec<usize>,
}

/// Advisory positivity summary; never fails.
pub fn positivity_report(probabilities: &[f64], eps: f64) -> PositivityReport {
    let bin_edges = vec![0.01, 0.05, 0.1, 0.2, 0.5, 1.0];
    let mut bin_counts = vec![0; bin_edges.len()];
    let mut min = f64::INFINITY;
    let mut n_below = 0;
    for &p in probabilities {
        min = min.min(p);
        if p < eps {
            n_below += 1;
        }
        let bin = bin_edges
            .iter()
            .position(|&e| p < e)
            .unwrap_or(bin_edges.len() - 1);
        bin_counts[bin] += 1;
    }
    let n = probabilities.len();
    PositivityReport {
        n,
        min,
        eps,
        n_below_eps: n_below,
        fraction_below_eps: if n == 0 {
            0.0
        } else {
            n_below as f64 / n as f64
        },
        bin_edges,
        bin_counts,
    }
}
