//! Exact enumeration on small discrete designs: the weighted estimating
//! equation of the observed-data law against the counterfactual quantile
//! computed by forcing the regimen.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Censoring, CohortBuilder, LongitudinalCohort};
use crate::weights::{FeatureMap, Regimen};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid tables: {0}")]
    InvalidTables(String),
}

/// Finite outcome distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Second decision of a two-decision instance.
///
/// Tables are indexed by flattened histories: `h0 = 2·l0 + a0`,
/// `h1 = s1·h0 + l1`, `h2 = 2·h1 + a1`, where `l0`, `l1` index supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondVisit {
    pub l1_support: Vec<f64>,
    /// `P(L_1 = l1 | h0, alive)`, one row per `h0`.
    pub l1_probs: Vec<Vec<f64>>,
    /// `P(A_1 = 1 | h1)`.
    pub treat1: Vec<f64>,
    /// `P(D_2 = 1 | h2)`.
    pub death2: Vec<f64>,
}

/// Fully enumerable design with one or two treatment decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    pub l0_support: Vec<f64>,
    pub l0_probs: Vec<f64>,
    /// `P(A_0 = 1 | l0)`.
    pub treat0: Vec<f64>,
    /// `P(D_1 = 1 | h0)`.
    pub death1: Vec<f64>,
    pub second: Option<SecondVisit>,
    /// Outcome law per terminal history (`h0` with one decision, `h2` with two).
    pub outcomes: Vec<OutcomeTable>,
    /// Composite value of decedents; below every outcome.
    pub sentinel: f64,
}

/// Compensated (Neumaier) summation.
#[derive(Debug, Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    c: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.c
    }
}

fn check_dist(name: &str, p: &[f64]) -> Result<(), OracleError> {
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(OracleError::InvalidTables(format!(
            "{name} is not a distribution: {p:?}"
        )));
    }
    Ok(())
}

fn check_prob(name: &str, p: &[f64], len: usize, open: bool) -> Result<(), OracleError> {
    if p.len() != len {
        return Err(OracleError::InvalidTables(format!(
            "{name} has {} entries, expected {len}",
            p.len()
        )));
    }
    let ok = |x: f64| {
        if open {
            x > 0.0 && x < 1.0
        } else {
            (0.0..=1.0).contains(&x)
        }
    };
    if let Some(x) = p.iter().find(|&&x| !ok(x)) {
        return Err(OracleError::InvalidTables(format!(
            "{name} has probability {x}"
        )));
    }
    Ok(())
}

/// One observable trajectory with its probability.
struct Path {
    prob: f64,
    /// Treatments taken, one per decision made.
    treatments: Vec<bool>,
    /// `P(A_k = a_k | history)` for each decision made.
    arm_probs: Vec<f64>,
    value: f64,
}

impl DiscreteInstance {
    pub fn n_decisions(&self) -> usize {
        1 + usize::from(self.second.is_some())
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let s0 = self.l0_support.len();
        if s0 == 0 || self.l0_probs.len() != s0 {
            return Err(OracleError::InvalidTables(
                "L_0 support and probabilities differ".into(),
            ));
        }
        check_dist("P(L_0)", &self.l0_probs)?;
        check_prob("P(A_0 = 1 | L_0)", &self.treat0, s0, true)?;
        check_prob("P(D_1 = 1 | ·)", &self.death1, 2 * s0, false)?;
        let terminal = match &self.second {
            None => 2 * s0,
            Some(v) => {
                let s1 = v.l1_support.len();
                if s1 == 0 || v.l1_probs.len() != 2 * s0 {
                    return Err(OracleError::InvalidTables("L_1 table shape".into()));
                }
                for row in &v.l1_probs {
                    if row.len() != s1 {
                        return Err(OracleError::InvalidTables("L_1 table shape".into()));
                    }
                    check_dist("P(L_1 | ·)", row)?;
                }
                check_prob("P(A_1 = 1 | ·)", &v.treat1, 2 * s0 * s1, true)?;
                check_prob("P(D_2 = 1 | ·)", &v.death2, 4 * s0 * s1, false)?;
                4 * s0 * s1
            }
        };
        if self.outcomes.len() != terminal {
            return Err(OracleError::InvalidTables(format!(
                "{} outcome tables, expected {terminal}",
                self.outcomes.len()
            )));
        }
        for t in &self.outcomes {
            if t.values.is_empty() || t.values.len() != t.probs.len() {
                return Err(OracleError::InvalidTables("outcome table shape".into()));
            }
            check_dist("outcome law", &t.probs)?;
            if t.values.iter().any(|&v| v.is_nan() || v <= self.sentinel) {
                return Err(OracleError::InvalidTables(
                    "outcome at or below the sentinel".into(),
                ));
            }
        }
        Ok(())
    }

    /// Every trajectory with positive probability. With `forced`, treatments
    /// follow the regimen with probability one.
    fn paths(&self, forced: Option<&Regimen>) -> Vec<Path> {
        let arm_p = |p_treated: f64, a: bool| if a { p_treated } else { 1.0 - p_treated };
        let choices = |k: usize| -> Vec<bool> {
            match forced {
                Some(r) => vec![r.arm(k)],
                None => vec![false, true],
            }
        };
        let mut out = Vec::new();
        for (l0, &pl0) in self.l0_probs.iter().enumerate() {
            for a0 in choices(0) {
                let pa0 = arm_p(self.treat0[l0], a0);
                let take0 = if forced.is_some() { 1.0 } else { pa0 };
                let h0 = 2 * l0 + usize::from(a0);
                let base = pl0 * take0;
                let d1 = self.death1[h0];
                out.push(Path {
                    prob: base * d1,
                    treatments: vec![a0],
                    arm_probs: vec![pa0],
                    value: self.sentinel,
                });
                let alive = base * (1.0 - d1);
                match &self.second {
                    None => {
                        let t = &self.outcomes[h0];
                        for (&v, &pv) in t.values.iter().zip(&t.probs) {
                            out.push(Path {
                                prob: alive * pv,
                                treatments: vec![a0],
                                arm_probs: vec![pa0],
                                value: v,
                            });
                        }
                    }
                    Some(sv) => {
                        let s1 = sv.l1_support.len();
                        for (l1, &pl1) in sv.l1_probs[h0].iter().enumerate() {
                            let h1 = s1 * h0 + l1;
                            for a1 in choices(1) {
                                let pa1 = arm_p(sv.treat1[h1], a1);
                                let take1 = if forced.is_some() { 1.0 } else { pa1 };
                                let h2 = 2 * h1 + usize::from(a1);
                                let reach = alive * pl1 * take1;
                                let d2 = sv.death2[h2];
                                out.push(Path {
                                    prob: reach * d2,
                                    treatments: vec![a0, a1],
                                    arm_probs: vec![pa0, pa1],
                                    value: self.sentinel,
                                });
                                let t = &self.outcomes[h2];
                                for (&v, &pv) in t.values.iter().zip(&t.probs) {
                                    out.push(Path {
                                        prob: reach * (1.0 - d2) * pv,
                                        treatments: vec![a0, a1],
                                        arm_probs: vec![pa0, pa1],
                                        value: v,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out.retain(|p| p.prob > 0.0);
        out
    }

    /// Atoms of the counterfactual composite law under `regimen`, ascending.
    pub fn counterfactual_law(&self, regimen: &Regimen) -> Result<Vec<(f64, f64)>, OracleError> {
        self.check_regimen(regimen)?;
        let mut atoms: Vec<(f64, f64)> = self
            .paths(Some(regimen))
            .iter()
            .map(|p| (p.value, p.prob))
            .collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, Neumaier)> = Vec::new();
        for (v, p) in atoms {
            match merged.last_mut() {
                Some((lv, acc)) if *lv == v => acc.add(p),
                _ => {
                    let mut acc = Neumaier::default();
                    acc.add(p);
                    merged.push((v, acc));
                }
            }
        }
        Ok(merged
            .into_iter()
            .map(|(v, acc)| (v, acc.value()))
            .collect())
    }

    fn check_regimen(&self, regimen: &Regimen) -> Result<(), OracleError> {
        self.validate()?;
        if regimen.len() != self.n_decisions() {
            return Err(OracleError::InvalidTables(format!(
                "regimen {regimen} for {} decisions",
                self.n_decisions()
            )));
        }
        Ok(())
    }

    /// Every value the composite outcome can take, ascending.
    pub fn support(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .outcomes
            .iter()
            .flat_map(|t| t.values.iter().copied())
            .collect();
        v.push(self.sentinel);
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

/// `E[ 1{Ā_M = ā_M} / ∏_{k<M} P(A_k = a_k | ·) · (1{Ỹ ≤ q} − τ) ]` over the
/// observed-data law, where `M` counts the decisions made before death.
pub fn lhs_weighted_expectation(
    instance: &DiscreteInstance,
    regimen: &Regimen,
    tau: f64,
    q: f64,
) -> Result<f64, OracleError> {
    instance.check_regimen(regimen)?;
    let mut acc = Neumaier::default();
    for p in instance.paths(None) {
        if p.treatments
            .iter()
            .enumerate()
            .any(|(k, &a)| a != regimen.arm(k))
        {
            continue;
        }
        let w: f64 = p.arm_probs.iter().map(|x| 1.0 / x).product();
        let ind = if p.value <= q { 1.0 } else { 0.0 };
        acc.add(p.prob * w * (ind - tau));
    }
    Ok(acc.value())
}

/// Counterfactual `τ`-quantile from the forced-regimen law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualQuantile {
    pub value: f64,
    pub death_mass: f64,
    /// Death mass reaches `τ`, so the quantile is the sentinel.
    pub at_sentinel: bool,
}

/// `inf{y : F(y) ≥ τ}` of the counterfactual composite outcome.
pub fn counterfactual_quantile(
    instance: &DiscreteInstance,
    regimen: &Regimen,
    tau: f64,
) -> Result<CounterfactualQuantile, OracleError> {
    let law = instance.counterfactual_law(regimen)?;
    let death_mass = law
        .iter()
        .find(|a| a.0 == instance.sentinel)
        .map_or(0.0, |a| a.1);
    let mut cdf = Neumaier::default();
    for &(v, p) in &law {
        cdf.add(p);
        if cdf.value() >= tau {
            return Ok(CounterfactualQuantile {
                value: v,
                death_mass,
                at_sentinel: v == instance.sentinel,
            });
        }
    }
    let last = law.last().map_or(instance.sentinel, |a| a.0);
    Ok(CounterfactualQuantile {
        value: last,
        death_mass,
        at_sentinel: last == instance.sentinel,
    })
}

/// Smallest support point where the weighted expectation is nonnegative.
pub fn psi_crossing(
    instance: &DiscreteInstance,
    regimen: &Regimen,
    tau: f64,
) -> Result<f64, OracleError> {
    let support = instance.support();
    for &q in &support {
        if lhs_weighted_expectation(instance, regimen, tau, q)? >= 0.0 {
            return Ok(q);
        }
    }
    Ok(*support.last().expect("support includes the sentinel"))
}

/// Largest `|Ψ(q) − (F(q) − τ)|` over the support.
pub fn identity_gap(
    instance: &DiscreteInstance,
    regimen: &Regimen,
    tau: f64,
) -> Result<f64, OracleError> {
    let law = instance.counterfactual_law(regimen)?;
    let mut cdf = Neumaier::default();
    let mut gap = 0.0f64;
    for &(v, p) in &law {
        cdf.add(p);
        let psi = lhs_weighted_expectation(instance, regimen, tau, v)?;
        gap = gap.max((psi - (cdf.value() - tau)).abs());
    }
    Ok(gap)
}

/// Worst discrepancies of one instance over every regimen and level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    /// Largest `|Ψ-crossing − counterfactual quantile|`.
    pub crossing_error: f64,
    /// Largest [`identity_gap`].
    pub identity_gap: f64,
}

impl InstanceCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.crossing_error <= tol && self.identity_gap <= tol
    }
}

/// Compares the weighted estimating equation with enumeration for every
/// regimen of the instance at each level in `taus`.
pub fn check_instance(
    instance: &DiscreteInstance,
    taus: &[f64],
) -> Result<InstanceCheck, OracleError> {
    let kd = instance.n_decisions();
    let mut out = InstanceCheck {
        crossing_error: 0.0,
        identity_gap: 0.0,
    };
    for bits in 0..1usize << kd {
        let regimen = Regimen::new((0..kd).map(|k| bits >> k & 1 == 1).collect());
        for &tau in taus {
            let crossing = psi_crossing(instance, &regimen, tau)?;
            let truth = counterfactual_quantile(instance, &regimen, tau)?.value;
            out.crossing_error = out.crossing_error.max((crossing - truth).abs());
            out.identity_gap = out.identity_gap.max(identity_gap(instance, &regimen, tau)?);
        }
    }
    Ok(out)
}

fn random_dist<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / s).collect();
    let head: f64 = p[..k - 1].iter().sum();
    p[k - 1] = 1.0 - head;
    p
}

fn random_table<R: Rng + ?Sized>(rng: &mut R) -> OutcomeTable {
    let k = rng.random_range(1..=4);
    let mut values: Vec<f64> = Vec::with_capacity(k);
    while values.len() < k {
        // Quarter grid so values tie across strata.
        let v = f64::from(rng.random_range(-12i32..=12)) * 0.25;
        if !values.contains(&v) {
            values.push(v);
        }
    }
    OutcomeTable {
        values,
        probs: random_dist(rng, k),
    }
}

/// Random valid instance with `n_decisions ∈ {1, 2}` and supports of at most
/// four points.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, n_decisions: usize) -> DiscreteInstance {
    assert!((1..=2).contains(&n_decisions));
    let s0 = rng.random_range(1..=4);
    let l0_support: Vec<f64> = (0..s0).map(|j| j as f64).collect();
    let treat0 = (0..s0).map(|_| rng.random_range(0.05..0.95)).collect();
    let death1 = (0..2 * s0).map(|_| rng.random_range(0.0..0.3)).collect();
    let second = (n_decisions == 2).then(|| {
        let s1 = rng.random_range(1..=4);
        SecondVisit {
            l1_support: (0..s1).map(|j| j as f64).collect(),
            l1_probs: (0..2 * s0).map(|_| random_dist(rng, s1)).collect(),
            treat1: (0..2 * s0 * s1)
                .map(|_| rng.random_range(0.05..0.95))
                .collect(),
            death2: (0..4 * s0 * s1)
                .map(|_| rng.random_range(0.0..0.3))
                .collect(),
        }
    });
    let terminal = match &second {
        None => 2 * s0,
        Some(v) => 4 * s0 * v.l1_support.len(),
    };
    DiscreteInstance {
        l0_probs: random_dist(rng, s0),
        l0_support,
        treat0,
        death1,
        outcomes: (0..terminal).map(|_| random_table(rng)).collect(),
        second,
        sentinel: -100.0,
    }
}

fn draw_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return j;
        }
    }
    probs.len() - 1
}

/// Draws `n` observational subjects; outcomes get `N(0, jitter²)` noise.
pub fn sample_instance<R: Rng + ?Sized>(
    instance: &DiscreteInstance,
    n: usize,
    jitter: f64,
    rng: &mut R,
) -> LongitudinalCohort {
    let kd = instance.n_decisions();
    let noise = Normal::new(0.0, jitter).expect("finite jitter");
    let mut b = CohortBuilder::with_capacity(kd, 1, n);
    for _ in 0..n {
        let l0 = draw_index(rng, &instance.l0_probs);
        let a0 = rng.random::<f64>() < instance.treat0[l0];
        let h0 = 2 * l0 + usize::from(a0);
        let dead1 = rng.random::<f64>() < instance.death1[h0];
        let (covs, treat, dead, table) = match &instance.second {
            None => (
                vec![instance.l0_support[l0]],
                vec![Some(a0)],
                vec![false, dead1],
                h0,
            ),
            Some(_) if dead1 => (
                vec![instance.l0_support[l0], f64::NAN],
                vec![Some(a0), None],
                vec![false, true, true],
                0,
            ),
            Some(sv) => {
                let l1 = draw_index(rng, &sv.l1_probs[h0]);
                let h1 = sv.l1_support.len() * h0 + l1;
                let a1 = rng.random::<f64>() < sv.treat1[h1];
                let h2 = 2 * h1 + usize::from(a1);
                let dead2 = rng.random::<f64>() < sv.death2[h2];
                (
                    vec![instance.l0_support[l0], sv.l1_support[l1]],
                    vec![Some(a0), Some(a1)],
                    vec![false, false, dead2],
                    h2,
                )
            }
        };
        let y = if dead[kd] {
            None
        } else {
            let t = &instance.outcomes[table];
            Some(t.values[draw_index(rng, &t.probs)] + noise.sample(rng))
        };
        b.push(&covs, &treat, &dead, y, Censoring::Observed);
    }
    b.finish()
}

/// Intercept plus an indicator for every joint covariate pattern up to the
/// visit except the first, making each visit model saturated.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturatedFeatures {
    pub supports: Vec<Vec<f64>>,
}

impl SaturatedFeatures {
    pub fn for_instance(instance: &DiscreteInstance) -> Self {
        let mut supports = vec![instance.l0_support.clone()];
        if let Some(sv) = &instance.second {
            supports.push(sv.l1_support.clone());
        }
        Self { supports }
    }

    fn n_patterns(&self, visit: usize) -> usize {
        self.supports[..=visit].iter().map(Vec::len).product()
    }
}

impl FeatureMap for SaturatedFeatures {
    fn names(&self, _: &LongitudinalCohort, visit: usize) -> Vec<String> {
        let mut names = vec!["(intercept)".to_string()];
        names.extend((1..self.n_patterns(visit)).map(|j| format!("pattern{visit}_{j}")));
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
        let mut pattern = 0;
        for k in 0..=visit {
            let v = cohort.covariates(subject, k)[0];
            let Some(j) = self.supports[k].iter().position(|&s| s == v) else {
                out.resize(self.n_patterns(visit), f64::NAN);
                return;
            };
            pattern = pattern * self.supports[k].len() + j;
        }
        out.extend((1..self.n_patterns(visit)).map(|j| f64::from(u8::from(j == pattern))));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn trivial() -> DiscreteInstance {
        DiscreteInstance {
            l0_support: vec![0.0],
            l0_probs: vec![1.0],
            treat0: vec![0.5],
            death1: vec![0.0, 0.0],
            second: None,
            outcomes: vec![
                OutcomeTable {
                    values: vec![1.0, 2.0, 3.0],
                    probs: vec![0.2, 0.5, 0.3],
                },
                OutcomeTable {
                    values: vec![5.0],
                    probs: vec![1.0],
                },
            ],
            sentinel: -10.0,
        }
    }

    #[test]
    fn no_confounding_no_death_gives_table_quantile() {
        let inst = trivial();
        let q = counterfactual_quantile(&inst, &Regimen::point(false), 0.5).unwrap();
        assert_eq!(q.value, 2.0);
        assert!(!q.at_sentinel);
        assert_eq!(
            counterfactual_quantile(&inst, &Regimen::point(true), 0.5)
                .unwrap()
                .value,
            5.0
        );
    }

    #[test]
    fn psi_limits() {
        let inst = trivial();
        let r = Regimen::point(false);
        assert!((lhs_weighted_expectation(&inst, &r, 0.3, -50.0).unwrap() + 0.3).abs() < 1e-15);
        assert!((lhs_weighted_expectation(&inst, &r, 0.3, 50.0).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn death_mass_at_tau_returns_sentinel() {
        let mut inst = trivial();
        inst.death1 = vec![0.5, 0.5];
        let q = counterfactual_quantile(&inst, &Regimen::point(false), 0.5).unwrap();
        assert!(q.at_sentinel);
        assert_eq!(q.value, -10.0);
    }

    #[test]
    fn invalid_tables_are_rejected() {
        let mut inst = trivial();
        inst.treat0 = vec![1.0];
        assert!(counterfactual_quantile(&inst, &Regimen::point(true), 0.5).is_err());
        let mut inst = trivial();
        inst.outcomes[0].probs = vec![0.2, 0.2, 0.2];
        assert!(inst.validate().is_err());
    }

    #[test]
    fn random_instances_satisfy_identity() {
        let mut rng = stream_rng(21, &[]);
        for i in 0..40 {
            let inst = random_instance(&mut rng, 1 + i % 2);
            inst.validate().unwrap();
            let r = Regimen::constant(i % 3 == 0, inst.n_decisions());
            let tau = rng.random_range(0.1..0.9);
            let q = counterfactual_quantile(&inst, &r, tau).unwrap();
            assert_eq!(psi_crossing(&inst, &r, tau).unwrap(), q.value);
            assert!(identity_gap(&inst, &r, tau).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn instances_round_trip_through_json() {
        let inst = random_instance(&mut stream_rng(2, &[]), 2);
        let s = serde_json::to_string(&inst).unwrap();
        assert_eq!(serde_json::from_str::<DiscreteInstance>(&s).unwrap(), inst);
    }

    #[test]
    fn saturated_rows_are_one_hot() {
        let inst = random_instance(&mut stream_rng(4, &[]), 2);
        let c = sample_instance(&inst, 50, 0.01, &mut stream_rng(5, &[]));
        let f = SaturatedFeatures::for_instance(&inst);
        let mut row = Vec::new();
        for i in 0..c.n_subjects() {
            f.write_row(&c, i, 0, &mut row);
            assert_eq!(row.len(), f.names(&c, 0).len());
            assert!(row[1..].iter().sum::<f64>() <= 1.0);
        }
    }
}
