//! Longitudinal cohort data model and the ranked composite outcome.
//!
//! A study has decision visits `k = 0..=K` at which covariates `L_k` and a
//! binary treatment `A_k` are recorded for living subjects, and a final
//! visit `K + 1` at which only death status and, for survivors, the outcome
//! `Y` are observed. Subjects who die have every later field undefined.
//!
//! The cohort stores the raw records even when they violate these rules, so
//! [`validate_cohort`] can report every problem at once.

mod csv_io;

use std::borrow::Cow;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use csv_io::{read_cohort_csv, write_cohort_csv, CsvError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("cohort has no subjects")]
    Empty,
    #[error("subject {subject}: expected {expected} visits, found {found}")]
    RaggedVisitGrid {
        subject: String,
        expected: usize,
        found: usize,
    },
    #[error("subject {subject} visit {visit}: expected {expected} covariates, found {found}")]
    CovariateDimension {
        subject: String,
        visit: usize,
        expected: usize,
        found: usize,
    },
    #[error("subject {subject}: visit indices must run 0..={last} in order")]
    VisitOrder { subject: String, last: usize },
    #[error("a study needs at least one decision visit")]
    NoDecisionVisits,
    #[error("sentinel {sentinel} is not below the smallest survivor outcome {min_outcome}")]
    SentinelAboveMinimum { sentinel: f64, min_outcome: f64 },
    #[error("invalid cohort: {0}")]
    InvalidCohort(String),
}

/// Why a surviving subject has no usable outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Censoring {
    #[default]
    Observed,
    /// Absent for the outcome assessment.
    MissingOutcome,
    /// Assessed, but the result is unusable.
    InvalidOutcome,
}

/// One visit of one subject, used to assemble a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitRecord {
    pub k: usize,
    /// `L_k`; empty when undefined (after death, and always at visit `K + 1`).
    pub covariates: Vec<f64>,
    pub treatment: Option<bool>,
    pub dead: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// Visits `0..=K+1` in order.
    pub visits: Vec<VisitRecord>,
    pub outcome: Option<f64>,
    pub censoring: Censoring,
}

/// Column-oriented storage of a cohort on a shared visit grid.
///
/// Covariates of undefined visits are stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalCohort {
    ids: Option<Vec<String>>,
    n_subjects: usize,
    n_decisions: usize,
    n_covariates: usize,
    covariates: Vec<f64>,
    treatment: Vec<Option<bool>>,
    dead: Vec<bool>,
    outcome: Vec<Option<f64>>,
    censoring: Vec<Censoring>,
}

impl LongitudinalCohort {
    /// Assembles a cohort from per-subject records.
    ///
    /// Structural problems (ragged grids, inconsistent covariate dimension)
    /// are errors; semantic problems are left for [`validate_cohort`].
    pub fn from_subjects(subjects: Vec<SubjectRecord>) -> Result<Self, CohortError> {
        let n_covariates = subjects
            .iter()
            .flat_map(|s| s.visits.iter().map(|v| v.covariates.len()))
            .max()
            .unwrap_or(0);
        Self::from_subjects_with_dim(subjects, n_covariates)
    }

    /// As [`from_subjects`](Self::from_subjects) with a declared covariate dimension.
    pub fn from_subjects_with_dim(
        subjects: Vec<SubjectRecord>,
        n_covariates: usize,
    ) -> Result<Self, CohortError> {
        let first = subjects.first().ok_or(CohortError::Empty)?;
        let n_visits = first.visits.len();
        if n_visits < 2 {
            return Err(CohortError::NoDecisionVisits);
        }
        let n_decisions = n_visits - 1;
        let mut builder = CohortBuilder::new(n_decisions, n_covariates);
        let mut ids = Vec::with_capacity(subjects.len());
        let mut covs = vec![f64::NAN; n_decisions * n_covariates];
        let mut treat = vec![None; n_decisions];
        let mut dead = vec![false; n_visits];
        for s in subjects {
            if s.visits.len() != n_visits {
                return Err(CohortError::RaggedVisitGrid {
                    subject: s.id,
                    expected: n_visits,
                    found: s.visits.len(),
                });
            }
            covs.fill(f64::NAN);
            for (k, v) in s.visits.iter().enumerate() {
                if v.k != k {
                    return Err(CohortError::VisitOrder {
                        subject: s.id.clone(),
                        last: n_visits - 1,
                    });
                }
                dead[k] = v.dead;
                if k < n_decisions {
                    treat[k] = v.treatment;
                    if !v.covariates.is_empty() {
                        if v.covariates.len() != n_covariates {
                            return Err(CohortError::CovariateDimension {
                                subject: s.id.clone(),
                                visit: k,
                                expected: n_covariates,
                                found: v.covariates.len(),
                            });
                        }
                        covs[k * n_covariates..(k + 1) * n_covariates]
                            .copy_from_slice(&v.covariates);
                    }
                } else if v.treatment.is_some() || !v.covariates.is_empty() {
                    return Err(CohortError::InvalidCohort(format!(
                        "subject {}: treatment or covariates recorded at the final visit",
                        s.id
                    )));
                }
            }
            builder.push(&covs, &treat, &dead, s.outcome, s.censoring);
            ids.push(s.id);
        }
        let mut cohort = builder.finish();
        cohort.ids = Some(ids);
        Ok(cohort)
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    /// Number of treatment decision points, `K + 1`.
    pub fn n_decisions(&self) -> usize {
        self.n_decisions
    }

    /// Number of visits on the grid, `K + 2`.
    pub fn n_visits(&self) -> usize {
        self.n_decisions + 1
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn id(&self, subject: usize) -> Cow<'_, str> {
        match &self.ids {
            Some(ids) => Cow::Borrowed(ids[subject].as_str()),
            None => Cow::Owned((subject + 1).to_string()),
        }
    }

    /// `L_k` for a decision visit; NaN entries mark undefined values.
    pub fn covariates(&self, subject: usize, visit: usize) -> &[f64] {
        debug_assert!(visit < self.n_decisions);
        let start = (subject * self.n_decisions + visit) * self.n_covariates;
        &self.covariates[start..start + self.n_covariates]
    }

    pub fn treatment(&self, subject: usize, visit: usize) -> Option<bool> {
        self.treatment[subject * self.n_decisions + visit]
    }

    /// `D_k` for `k` in `0..=K+1`.
    pub fn dead(&self, subject: usize, visit: usize) -> bool {
        self.dead[subject * self.n_visits() + visit]
    }

    pub fn outcome(&self, subject: usize) -> Option<f64> {
        self.outcome[subject]
    }

    pub fn censoring(&self, subject: usize) -> Censoring {
        self.censoring[subject]
    }

    /// Alive at the final visit.
    pub fn survived(&self, subject: usize) -> bool {
        !self.dead(subject, self.n_decisions)
    }

    /// First visit index `M` with `D_M = 1`, if the subject died.
    pub fn death_visit(&self, subject: usize) -> Option<usize> {
        (0..self.n_visits()).find(|&k| self.dead(subject, k))
    }

    /// Number of treatment decisions the subject lived to make: `K + 1` for
    /// survivors, `M` for a death between visits `M - 1` and `M`.
    pub fn decisions_made(&self, subject: usize) -> usize {
        self.death_visit(subject).unwrap_or(self.n_decisions)
    }

    /// Visit record view, mainly for diagnostics and export.
    pub fn visit(&self, subject: usize, visit: usize) -> VisitRecord {
        let (covariates, treatment) = if visit < self.n_decisions {
            let c = self.covariates(subject, visit);
            let covariates = if c.iter().all(|x| x.is_nan()) {
                Vec::new()
            } else {
                c.to_vec()
            };
            (covariates, self.treatment(subject, visit))
        } else {
            (Vec::new(), None)
        };
        VisitRecord {
            k: visit,
            covariates,
            treatment,
            dead: self.dead(subject, visit),
        }
    }

    /// Cohort made of the given subjects, in the given order, repeats allowed.
    pub fn select(&self, subjects: &[usize]) -> Self {
        let p = self.n_covariates;
        let kd = self.n_decisions;
        let kv = self.n_visits();
        let mut out = CohortBuilder::with_capacity(kd, p, subjects.len());
        for &i in subjects {
            out.covariates
                .extend_from_slice(&self.covariates[i * kd * p..(i + 1) * kd * p]);
            out.treatment
                .extend_from_slice(&self.treatment[i * kd..(i + 1) * kd]);
            out.dead.extend_from_slice(&self.dead[i * kv..(i + 1) * kv]);
            out.outcome.push(self.outcome[i]);
            out.censoring.push(self.censoring[i]);
            out.n_subjects += 1;
        }
        let mut cohort = out.finish();
        cohort.ids = self
            .ids
            .as_ref()
            .map(|ids| subjects.iter().map(|&i| ids[i].clone()).collect());
        cohort
    }

    /// Mutable access used by tests that perturb undefined fields.
    #[doc(hidden)]
    pub fn set_covariate(&mut self, subject: usize, visit: usize, j: usize, value: f64) {
        let idx = (subject * self.n_decisions + visit) * self.n_covariates + j;
        self.covariates[idx] = value;
    }

    #[doc(hidden)]
    pub fn set_treatment(&mut self, subject: usize, visit: usize, value: Option<bool>) {
        self.treatment[subject * self.n_decisions + visit] = value;
    }
}

/// Appends subjects directly into column storage.
#[derive(Debug, Clone)]
pub struct CohortBuilder {
    n_subjects: usize,
    n_decisions: usize,
    n_covariates: usize,
    covariates: Vec<f64>,
    treatment: Vec<Option<bool>>,
    dead: Vec<bool>,
    outcome: Vec<Option<f64>>,
    censoring: Vec<Censoring>,
}

impl CohortBuilder {
    pub fn new(n_decisions: usize, n_covariates: usize) -> Self {
        Self::with_capacity(n_decisions, n_covariates, 0)
    }

    pub fn with_capacity(n_decisions: usize, n_covariates: usize, n: usize) -> Self {
        assert!(n_decisions >= 1, "at least one decision visit");
        Self {
            n_subjects: 0,
            n_decisions,
            n_covariates,
            covariates: Vec::with_capacity(n * n_decisions * n_covariates),
            treatment: Vec::with_capacity(n * n_decisions),
            dead: Vec::with_capacity(n * (n_decisions + 1)),
            outcome: Vec::with_capacity(n),
            censoring: Vec::with_capacity(n),
        }
    }

    /// Appends one subject.
    ///
    /// `covariates` is visit-major with `n_decisions * n_covariates` entries,
    /// `treatment` has `n_decisions` entries and `dead` has `n_decisions + 1`.
    pub fn push(
        &mut self,
        covariates: &[f64],
        treatment: &[Option<bool>],
        dead: &[bool],
        outcome: Option<f64>,
        censoring: Censoring,
    ) {
        assert_eq!(covariates.len(), self.n_decisions * self.n_covariates);
        assert_eq!(treatment.len(), self.n_decisions);
        assert_eq!(dead.len(), self.n_decisions + 1);
        self.covariates.extend_from_slice(covariates);
        self.treatment.extend_from_slice(treatment);
        self.dead.extend_from_slice(dead);
        self.outcome.push(outcome);
        self.censoring.push(censoring);
        self.n_subjects += 1;
    }

    pub fn finish(self) -> LongitudinalCohort {
        LongitudinalCohort {
            ids: None,
            n_subjects: self.n_subjects,
            n_decisions: self.n_decisions,
            n_covariates: self.n_covariates,
            covariates: self.covariates,
            treatment: self.treatment,
            dead: self.dead,
            outcome: self.outcome,
            censoring: self.censoring,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DeadAtBaseline { subject: String },
    NonMonotoneDeath { subject: String, visit: usize },
    DataAfterDeath { subject: String, visit: usize },
    MissingTreatment { subject: String, visit: usize },
    MissingCovariate { subject: String, visit: usize },
    MissingOutcome { subject: String },
    OutcomeForDecedent { subject: String },
    NonFiniteOutcome { subject: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DeadAtBaseline { subject } => {
                write!(f, "subject {subject}: dead at baseline")
            }
            Violation::NonMonotoneDeath { subject, visit } => {
                write!(
                    f,
                    "subject {subject}: alive at visit {visit} after a recorded death"
                )
            }
            Violation::DataAfterDeath { subject, visit } => {
                write!(
                    f,
                    "subject {subject}: data recorded at visit {visit} after death"
                )
            }
            Violation::MissingTreatment { subject, visit } => {
                write!(f, "subject {subject}: treatment missing at visit {visit}")
            }
            Violation::MissingCovariate { subject, visit } => {
                write!(f, "subject {subject}: covariate missing at visit {visit}")
            }
            Violation::MissingOutcome { subject } => {
                write!(f, "subject {subject}: survivor without outcome")
            }
            Violation::OutcomeForDecedent { subject } => {
                write!(f, "subject {subject}: outcome recorded for a decedent")
            }
            Violation::NonFiniteOutcome { subject } => {
                write!(f, "subject {subject}: outcome is not finite")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every rule the cohort breaks. Never fails.
pub fn validate_cohort(cohort: &LongitudinalCohort) -> ValidationReport {
    let mut violations = Vec::new();
    let kd = cohort.n_decisions();
    for i in 0..cohort.n_subjects() {
        let id = || cohort.id(i).into_owned();
        if cohort.dead(i, 0) {
            violations.push(Violation::DeadAtBaseline { subject: id() });
        }
        let mut died = false;
        for k in 0..cohort.n_visits() {
            let d = cohort.dead(i, k);
            if died && !d {
                violations.push(Violation::NonMonotoneDeath {
                    subject: id(),
                    visit: k,
                });
            }
            died |= d;
            if k < kd {
                let covs = cohort.covariates(i, k);
                let treat = cohort.treatment(i, k);
                if d {
                    if treat.is_some() || covs.iter().any(|x| !x.is_nan()) {
                        violations.push(Violation::DataAfterDeath {
                            subject: id(),
                            visit: k,
                        });
                    }
                } else {
                    if treat.is_none() {
                        violations.push(Violation::MissingTreatment {
                            subject: id(),
                            visit: k,
                        });
                    }
                    if covs.iter().any(|x| x.is_nan()) {
                        violations.push(Violation::MissingCovariate {
                            subject: id(),
                            visit: k,
                        });
                    }
                }
            }
        }
        match (cohort.survived(i), cohort.outcome(i)) {
            (true, None) if cohort.censoring(i) == Censoring::Observed => {
                violations.push(Violation::MissingOutcome { subject: id() })
            }
            (true, Some(y)) if !y.is_finite() => {
                violations.push(Violation::NonFiniteOutcome { subject: id() })
            }
            (false, Some(_)) => violations.push(Violation::OutcomeForDecedent { subject: id() }),
            _ => {}
        }
    }
    ValidationReport { violations }
}

/// Orientation of the clinical outcome scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Larger outcomes are better; death ranks below every outcome.
    #[default]
    HigherIsBetter,
    /// Smaller outcomes are better; outcomes are negated before ranking.
    LowerIsBetter,
}

/// Ranked composite outcome: `Y` for survivors, a sentinel for decedents.
///
/// Survivors whose outcome is censored carry NaN; they must receive zero
/// weight downstream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompositeOutcome {
    values: Vec<f64>,
    dead: Vec<bool>,
    sentinel: f64,
    death_fraction: f64,
    direction: Direction,
}

impl CompositeOutcome {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_dead(&self, subject: usize) -> bool {
        self.dead[subject]
    }

    pub fn dead_mask(&self) -> &[bool] {
        &self.dead
    }

    pub fn sentinel(&self) -> f64 {
        self.sentinel
    }

    /// Unweighted fraction of decedents in the cohort.
    pub fn death_fraction(&self) -> f64 {
        self.death_fraction
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Maps a composite-scale value back to the clinical scale.
    pub fn to_outcome_scale(&self, value: f64) -> f64 {
        match self.direction {
            Direction::HigherIsBetter => value,
            Direction::LowerIsBetter => -value,
        }
    }
}

fn ranked(y: f64, direction: Direction) -> f64 {
    match direction {
        Direction::HigherIsBetter => y,
        Direction::LowerIsBetter => -y,
    }
}

/// Sentinel guaranteed below the observed range: `min − 1000·(1 + |min|)`
/// on the ranking scale.
pub fn default_sentinel(cohort: &LongitudinalCohort, direction: Direction) -> f64 {
    let min = (0..cohort.n_subjects())
        .filter(|&i| cohort.survived(i))
        .filter_map(|i| cohort.outcome(i))
        .map(|y| ranked(y, direction))
        .fold(f64::INFINITY, f64::min);
    if min.is_finite() {
        min - 1000.0 * (1.0 + min.abs())
    } else {
        -1000.0
    }
}

/// Builds `Ỹ` with higher-is-better ranking.
pub fn build_composite(
    cohort: &LongitudinalCohort,
    sentinel: f64,
) -> Result<CompositeOutcome, CohortError> {
    build_composite_with(cohort, Some(sentinel), Direction::HigherIsBetter)
}

/// Builds `Ỹ`; `None` selects [`default_sentinel`].
pub fn build_composite_with(
    cohort: &LongitudinalCohort,
    sentinel: Option<f64>,
    direction: Direction,
) -> Result<CompositeOutcome, CohortError> {
    let n = cohort.n_subjects();
    if n == 0 {
        return Err(CohortError::Empty);
    }
    let sentinel = sentinel.unwrap_or_else(|| default_sentinel(cohort, direction));
    let mut values = Vec::with_capacity(n);
    let mut dead = Vec::with_capacity(n);
    let mut min_outcome = f64::INFINITY;
    let mut n_dead = 0usize;
    for i in 0..n {
        let mut died = false;
        for k in 0..cohort.n_visits() {
            let d = cohort.dead(i, k);
            if died && !d {
                return Err(CohortError::InvalidCohort(format!(
                    "subject {}: death indicator is not monotone",
                    cohort.id(i)
                )));
            }
            died |= d;
        }
        if died {
            n_dead += 1;
            dead.push(true);
            values.push(sentinel);
        } else {
            dead.push(false);
            match cohort.outcome(i) {
                Some(y) => {
                    let v = ranked(y, direction);
                    min_outcome = min_outcome.min(v);
                    values.push(v);
                }
                None if cohort.censoring(i) != Censoring::Observed => values.push(f64::NAN),
                None => {
                    return Err(CohortError::InvalidCohort(format!(
                        "subject {}: survivor without outcome",
                        cohort.id(i)
                    )))
                }
            }
        }
    }
    if sentinel >= min_outcome {
        return Err(CohortError::SentinelAboveMinimum {
            sentinel,
            min_outcome,
        });
    }
    Ok(CompositeOutcome {
        values,
        dead,
        sentinel,
        death_fraction: n_dead as f64 / n as f64,
        direction,
    })
}
