//! Data-generating processes for point and two-decision treatment settings,
//! their analytic truths, and Monte Carlo drivers.

mod monte_carlo;
mod truth;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{Censoring, CohortBuilder, LongitudinalCohort};
use crate::propensity::logistic;
use crate::rng::stream_rng;
use crate::weights::{Regimen, TreatmentModel, WeightsError};

pub use monte_carlo::{
    coverage_study, monte_carlo, table1_config, table2_config, table_b1_configs, CellSummary,
    CoverageConfig, CoverageSummary, EstimatorKind, EstimatorSummary, MonteCarloConfig,
    MonteCarloSummary,
};
pub use truth::{analytic_truth, MixtureTruthSpec, NormalComponent, TruthError};

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn bit(x: bool) -> f64 {
    f64::from(u8::from(x))
}

/// Point treatment with one binary confounder `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointDgp {
    pub p_l1: f64,
    /// `P(A = 1 | L = l)` for `l = 0, 1`.
    pub p_treat_given_l: [f64; 2],
    /// `P(D = 1 | L = l, A = a)` indexed `[l][a]`.
    pub p_death: [[f64; 2]; 2],
    pub beta_treat: f64,
    pub beta_l: f64,
    pub noise_sd: f64,
}

impl Default for PointDgp {
    fn default() -> Self {
        Self {
            p_l1: 0.6,
            p_treat_given_l: [0.3, 0.7],
            p_death: [[0.10, 0.05], [0.16, 0.08]],
            beta_treat: -0.9,
            beta_l: 3.0,
            noise_sd: 1.0,
        }
    }
}

impl PointDgp {
    /// Draws `n` subjects; `forced` overrides the treatment assignment.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        n: usize,
        forced: Option<bool>,
        rng: &mut R,
    ) -> LongitudinalCohort {
        let mut b = CohortBuilder::with_capacity(1, 1, n);
        for _ in 0..n {
            let l = bernoulli(rng, self.p_l1);
            let a = forced.unwrap_or_else(|| bernoulli(rng, self.p_treat_given_l[usize::from(l)]));
            let dead = bernoulli(rng, self.p_death[usize::from(l)][usize::from(a)]);
            let y = if dead {
                None
            } else {
                let e: f64 = StandardNormal.sample(rng);
                Some(self.beta_treat * bit(a) + self.beta_l * bit(l) + self.noise_sd * e)
            };
            b.push(
                &[bit(l)],
                &[Some(a)],
                &[false, dead],
                y,
                Censoring::Observed,
            );
        }
        b.finish()
    }

    pub fn treatment_model(&self) -> PointTreatment {
        PointTreatment {
            p_treat_given_l: self.p_treat_given_l,
        }
    }

    /// Distribution of the composite outcome under treatment `arm`.
    pub fn truth_spec(&self, arm: bool) -> MixtureTruthSpec {
        let mut spec = MixtureTruthSpec {
            death_mass: 0.0,
            components: Vec::new(),
        };
        for l in [false, true] {
            let pl = if l { self.p_l1 } else { 1.0 - self.p_l1 };
            let pd = self.p_death[usize::from(l)][usize::from(arm)];
            spec.death_mass += pl * pd;
            spec.components.push(NormalComponent {
                mass: pl * (1.0 - pd),
                mean: self.beta_treat * bit(arm) + self.beta_l * bit(l),
                sd: self.noise_sd,
            });
        }
        spec
    }
}

/// Draws the point-treatment cohort with seed `seed`.
pub fn gen_point(n: usize, dgp: &PointDgp, seed: u64) -> LongitudinalCohort {
    dgp.generate(n, None, &mut stream_rng(seed, &[]))
}

/// True `P(A = 1 | L)` of [`PointDgp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointTreatment {
    pub p_treat_given_l: [f64; 2],
}

impl TreatmentModel for PointTreatment {
    fn treated_probabilities(
        &self,
        cohort: &LongitudinalCohort,
        visit: usize,
    ) -> Result<Vec<f64>, WeightsError> {
        if visit != 0 || cohort.n_covariates() != 1 {
            return Err(WeightsError::HistoryMismatch {
                visit,
                detail: "point model covers visit 0 with one covariate".into(),
            });
        }
        Ok((0..cohort.n_subjects())
            .map(|i| self.p_treat_given_l[usize::from(cohort.covariates(i, 0)[0] != 0.0)])
            .collect())
    }
}

/// Two decisions with binary covariates `L_0`, `L_1` and deaths before each
/// follow-up.
///
/// Coefficient vectors are ordered intercept first, then the history terms
/// named on each field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeVaryingDgp {
    pub p_l0: f64,
    /// `P(A_0 = 1 | L_0 = l)` for `l = 0, 1`.
    pub p_treat0_given_l0: [f64; 2],
    /// Logit of `D_1` on `(1, L_0, A_0)`.
    pub death1: [f64; 3],
    /// Logit of `L_1` on `(1, L_0, A_0)`.
    pub covariate1: [f64; 3],
    /// Logit of `A_1` on `(1, L_0, A_0, L_1)`.
    pub treat1: [f64; 4],
    /// Logit of `D_2` on `(1, L_0, A_0, L_1, A_1)`.
    pub death2: [f64; 5],
    /// Mean of `Y` on `(1, L_0, A_0, L_1, A_1)`.
    pub outcome: [f64; 5],
    pub noise_sd: f64,
}

impl Default for TimeVaryingDgp {
    fn default() -> Self {
        Self {
            p_l0: 0.6,
            p_treat0_given_l0: [0.3, 0.7],
            death1: [-2.5, 0.5, -0.6],
            covariate1: [-1.0, 2.0, -1.0],
            treat1: [-2.5, 0.8, 3.0, 1.0],
            death2: [-3.0, 0.3, -0.4, 0.5, -0.4],
            outcome: [0.0, 2.0, -0.4, 2.2, -0.4],
            noise_sd: 1.0,
        }
    }
}

fn lin(coef: &[f64], x: &[f64]) -> f64 {
    coef[0] + coef[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
}

impl TimeVaryingDgp {
    pub fn p_death1(&self, l0: bool, a0: bool) -> f64 {
        logistic(lin(&self.death1, &[bit(l0), bit(a0)]))
    }

    pub fn p_covariate1(&self, l0: bool, a0: bool) -> f64 {
        logistic(lin(&self.covariate1, &[bit(l0), bit(a0)]))
    }

    pub fn p_treat1(&self, l0: bool, a0: bool, l1: bool) -> f64 {
        logistic(lin(&self.treat1, &[bit(l0), bit(a0), bit(l1)]))
    }

    pub fn p_death2(&self, l0: bool, a0: bool, l1: bool, a1: bool) -> f64 {
        logistic(lin(&self.death2, &[bit(l0), bit(a0), bit(l1), bit(a1)]))
    }

    pub fn outcome_mean(&self, l0: bool, a0: bool, l1: bool, a1: bool) -> f64 {
        lin(&self.outcome, &[bit(l0), bit(a0), bit(l1), bit(a1)])
    }

    /// Draws `n` subjects; `forced` overrides both treatment decisions.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        n: usize,
        forced: Option<&Regimen>,
        rng: &mut R,
    ) -> LongitudinalCohort {
        let mut b = CohortBuilder::with_capacity(2, 1, n);
        for _ in 0..n {
            let l0 = bernoulli(rng, self.p_l0);
            let a0 = forced.map_or_else(
                || bernoulli(rng, self.p_treat0_given_l0[usize::from(l0)]),
                |r| r.arm(0),
            );
            if bernoulli(rng, self.p_death1(l0, a0)) {
                b.push(
                    &[bit(l0), f64::NAN],
                    &[Some(a0), None],
                    &[false, true, true],
                    None,
                    Censoring::Observed,
                );
                continue;
            }
            let l1 = bernoulli(rng, self.p_covariate1(l0, a0));
            let a1 = forced.map_or_else(|| bernoulli(rng, self.p_treat1(l0, a0, l1)), |r| r.arm(1));
            let dead = bernoulli(rng, self.p_death2(l0, a0, l1, a1));
            let y = if dead {
                None
            } else {
                let e: f64 = StandardNormal.sample(rng);
                Some(self.outcome_mean(l0, a0, l1, a1) + self.noise_sd * e)
            };
            b.push(
                &[bit(l0), bit(l1)],
                &[Some(a0), Some(a1)],
                &[false, false, dead],
                y,
                Censoring::Observed,
            );
        }
        b.finish()
    }

    pub fn treatment_model(&self) -> TimeVaryingTreatment {
        TimeVaryingTreatment { dgp: self.clone() }
    }

    /// Distribution of the composite outcome under `regimen`, by enumeration
    /// over `(L_0, L_1)`.
    pub fn truth_spec(&self, regimen: &Regimen) -> MixtureTruthSpec {
        assert_eq!(regimen.len(), 2, "two-decision regimen");
        let (a0, a1) = (regimen.arm(0), regimen.arm(1));
        let mut spec = MixtureTruthSpec {
            death_mass: 0.0,
            components: Vec::with_capacity(4),
        };
        for l0 in [false, true] {
            let p0 = if l0 { self.p_l0 } else { 1.0 - self.p_l0 };
            let d1 = self.p_death1(l0, a0);
            spec.death_mass += p0 * d1;
            for l1 in [false, true] {
                let pc = self.p_covariate1(l0, a0);
                let p1 = if l1 { pc } else { 1.0 - pc };
                let d2 = self.p_death2(l0, a0, l1, a1);
                let alive = p0 * (1.0 - d1) * p1;
                spec.death_mass += alive * d2;
                spec.components.push(NormalComponent {
                    mass: alive * (1.0 - d2),
                    mean: self.outcome_mean(l0, a0, l1, a1),
                    sd: self.noise_sd,
                });
            }
        }
        spec
    }
}

/// Draws the two-decision cohort with seed `seed`.
pub fn gen_time_varying(n: usize, dgp: &TimeVaryingDgp, seed: u64) -> LongitudinalCohort {
    dgp.generate(n, None, &mut stream_rng(seed, &[]))
}

/// True treatment probabilities of [`TimeVaryingDgp`].
#[derive(Debug, Clone, PartialEq)]
pub struct TimeVaryingTreatment {
    pub dgp: TimeVaryingDgp,
}

impl TreatmentModel for TimeVaryingTreatment {
    fn treated_probabilities(
        &self,
        cohort: &LongitudinalCohort,
        visit: usize,
    ) -> Result<Vec<f64>, WeightsError> {
        if visit > 1 || cohort.n_covariates() != 1 {
            return Err(WeightsError::HistoryMismatch {
                visit,
                detail: "two-decision model with one covariate per visit".into(),
            });
        }
        Ok((0..cohort.n_subjects())
            .map(|i| {
                if cohort.dead(i, visit) {
                    return f64::NAN;
                }
                let l0 = cohort.covariates(i, 0)[0] != 0.0;
                if visit == 0 {
                    return self.dgp.p_treat0_given_l0[usize::from(l0)];
                }
                let l1 = cohort.covariates(i, 1)[0] != 0.0;
                match cohort.treatment(i, 0) {
                    Some(a0) => self.dgp.p_treat1(l0, a0, l1),
                    None => f64::NAN,
                }
            })
            .collect())
    }
}

/// Either simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Setting {
    Point(PointDgp),
    TimeVarying(TimeVaryingDgp),
}

impl Setting {
    pub fn n_decisions(&self) -> usize {
        match self {
            Setting::Point(_) => 1,
            Setting::TimeVarying(_) => 2,
        }
    }

    pub fn generate<R: Rng + ?Sized>(
        &self,
        n: usize,
        forced: Option<&Regimen>,
        rng: &mut R,
    ) -> LongitudinalCohort {
        match self {
            Setting::Point(d) => d.generate(n, forced.map(|r| r.arm(0)), rng),
            Setting::TimeVarying(d) => d.generate(n, forced, rng),
        }
    }

    pub fn treatment_model(&self) -> Arc<dyn TreatmentModel> {
        match self {
            Setting::Point(d) => Arc::new(d.treatment_model()),
            Setting::TimeVarying(d) => Arc::new(d.treatment_model()),
        }
    }

    pub fn truth_spec(&self, regimen: &Regimen) -> MixtureTruthSpec {
        match self {
            Setting::Point(d) => d.truth_spec(regimen.arm(0)),
            Setting::TimeVarying(d) => d.truth_spec(regimen),
        }
    }

    /// Survival-incorporated `τ`-quantile under `regimen`.
    pub fn truth(&self, regimen: &Regimen, tau: f64) -> Result<f64, TruthError> {
        analytic_truth(&self.truth_spec(regimen), tau)
    }

    /// `τ`-quantile of the outcome among survivors under `regimen`.
    pub fn survivor_truth(&self, regimen: &Regimen, tau: f64) -> Result<f64, TruthError> {
        analytic_truth(&self.truth_spec(regimen).survivors(), tau)
    }
}

/// Survival-incorporated quantile of the two-decision design.
pub fn truth_time_varying(
    dgp: &TimeVaryingDgp,
    regimen: &Regimen,
    tau: f64,
) -> Result<f64, TruthError> {
    analytic_truth(&dgp.truth_spec(regimen), tau)
}

/// Survivor quantile of the two-decision design.
pub fn survivor_truth_time_varying(
    dgp: &TimeVaryingDgp,
    regimen: &Regimen,
    tau: f64,
) -> Result<f64, TruthError> {
    analytic_truth(&dgp.truth_spec(regimen).survivors(), tau)
}
