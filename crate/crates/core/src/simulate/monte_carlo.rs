//! Repeated-sampling studies: bias and rMSE tables and bootstrap coverage.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PointDgp, Setting, TimeVaryingDgp};
use crate::inference::bootstrap_ci;
use crate::pipeline::{estimate, estimate_q, point_variance, EstimationConfig, WeightingMode};
use crate::rng::{derive_seed, stream_rng};
use crate::weights::{Regimen, TreatmentModel};
use crate::Error;

/// Estimators compared in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    IptwTruePs,
    IptwEstPs,
    Unweighted,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [Self::IptwTruePs, Self::IptwEstPs, Self::Unweighted];

    pub fn label(self) -> &'static str {
        match self {
            Self::IptwTruePs => "iptw_true_ps",
            Self::IptwEstPs => "iptw_est_ps",
            Self::Unweighted => "unweighted",
        }
    }

    fn mode(self) -> WeightingMode {
        match self {
            Self::IptwTruePs => WeightingMode::Known,
            Self::IptwEstPs => WeightingMode::Estimated,
            Self::Unweighted => WeightingMode::Unweighted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub setting: Setting,
    pub regimens: Vec<Regimen>,
    pub ns: Vec<usize>,
    pub reps: usize,
    pub tau: f64,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    /// Also compute plug-in variances (point treatment only).
    pub variance: bool,
}

/// Point-treatment study over arms 0 and 1.
pub fn table1_config(reps: usize, seed: u64, ns: Vec<usize>) -> MonteCarloConfig {
    MonteCarloConfig {
        setting: Setting::Point(PointDgp::default()),
        regimens: vec![Regimen::point(false), Regimen::point(true)],
        ns,
        reps,
        tau: 0.5,
        seed,
        estimators: EstimatorKind::ALL.to_vec(),
        variance: true,
    }
}

/// Two-decision study over regimens (0,0) and (1,1).
pub fn table2_config(reps: usize, seed: u64, ns: Vec<usize>) -> MonteCarloConfig {
    MonteCarloConfig {
        setting: Setting::TimeVarying(TimeVaryingDgp::default()),
        regimens: vec![Regimen::constant(false, 2), Regimen::constant(true, 2)],
        ns,
        reps,
        tau: 0.5,
        seed,
        estimators: EstimatorKind::ALL.to_vec(),
        variance: false,
    }
}

/// Summary of one estimator in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    pub sd: f64,
    /// Monte Carlo standard error of the mean estimate.
    pub mc_se: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub first_error: Option<String>,
    /// `sqrt(mean avar / N)` over replicates with a plug-in variance.
    pub predicted_sd: Option<f64>,
    pub n_variance_failed: usize,
    /// Replicates where `V̂ > Ṽ̂ + 1e-10`.
    pub n_order_violations: usize,
    /// Replicates where `V̂` was negative and clamped.
    pub n_clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub regimen: Regimen,
    pub n: usize,
    pub truth: f64,
    pub death_probability: f64,
    pub estimators: Vec<EstimatorSummary>,
}

impl CellSummary {
    pub fn get(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub tau: f64,
    pub reps: usize,
    pub seed: u64,
    pub cells: Vec<CellSummary>,
}

impl MonteCarloSummary {
    pub fn cell(&self, regimen: &Regimen, n: usize) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| &c.regimen == regimen && c.n == n)
    }

    /// One row per cell and estimator.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "regimen",
            "N",
            "death_probability",
            "truth",
            "estimator",
            "rmse",
            "bias",
            "sd",
            "mc_se",
            "n_ok",
            "n_failed",
            "predicted_sd",
        ])?;
        for c in &self.cells {
            for e in &c.estimators {
                w.write_record([
                    c.regimen.to_string(),
                    c.n.to_string(),
                    format!("{:.3}", c.death_probability),
                    format!("{:.3}", c.truth),
                    e.estimator.label().to_string(),
                    format!("{:.3}", e.rmse),
                    format!("{:.3}", e.bias),
                    format!("{:.4}", e.sd),
                    format!("{:.4}", e.mc_se),
                    e.n_ok.to_string(),
                    e.n_failed.to_string(),
                    e.predicted_sd
                        .map(|s| format!("{s:.4}"))
                        .unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Replicate {
    q: Result<f64, String>,
    avar: Option<Result<(f64, bool, bool), String>>,
}

fn run_one(
    cohort: &crate::cohort::LongitudinalCohort,
    cfg: &EstimationConfig,
    known: &dyn TreatmentModel,
    variance: bool,
) -> Replicate {
    let est = match estimate(cohort, cfg, Some(known)) {
        Ok(e) => e,
        Err(e) => {
            return Replicate {
                q: Err(e.to_string()),
                avar: None,
            }
        }
    };
    let avar = (variance && cfg.mode != WeightingMode::Unweighted).then(|| {
        point_variance(cohort, cfg, &est, None)
            .map(|v| {
                let violation = v.v_hat.is_some_and(|vh| vh > v.v_tilde + 1e-10);
                (v.avar_est.unwrap_or(v.avar_known), violation, v.clamped)
            })
            .map_err(|e| e.to_string())
    });
    Replicate { q: Ok(est.q), avar }
}

fn summarize(kind: EstimatorKind, n: usize, truth: f64, reps: &[&Replicate]) -> EstimatorSummary {
    let ok: Vec<f64> = reps
        .iter()
        .filter_map(|r| r.q.as_ref().ok().copied())
        .collect();
    let first_error = reps.iter().find_map(|r| r.q.as_ref().err().cloned());
    let m = ok.len() as f64;
    let mean = ok.iter().sum::<f64>() / m;
    let mse = ok.iter().map(|q| (q - truth).powi(2)).sum::<f64>() / m;
    let var = if ok.len() > 1 {
        ok.iter().map(|q| (q - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let mut avars = Vec::new();
    let (mut n_var_failed, mut n_viol, mut n_clamped) = (0, 0, 0);
    for r in reps {
        match &r.avar {
            Some(Ok((a, viol, clamped))) => {
                avars.push(*a);
                n_viol += usize::from(*viol);
                n_clamped += usize::from(*clamped);
            }
            Some(Err(_)) => n_var_failed += 1,
            None => {}
        }
    }
    let predicted_sd = (!avars.is_empty())
        .then(|| (avars.iter().sum::<f64>() / avars.len() as f64 / n as f64).sqrt());
    EstimatorSummary {
        estimator: kind,
        mean,
        bias: mean - truth,
        rmse: mse.sqrt(),
        sd: var.sqrt(),
        mc_se: (var / m).sqrt(),
        n_ok: ok.len(),
        n_failed: reps.len() - ok.len(),
        first_error,
        predicted_sd,
        n_variance_failed: n_var_failed,
        n_order_violations: n_viol,
        n_clamped,
    }
}

/// Runs every estimator on shared simulated datasets and tabulates bias and
/// rMSE against the analytic truth.
///
/// Dataset `rep` of size `n` is drawn from stream `(seed, n, rep)`, so all
/// estimators and regimens see the same data and results do not depend on the
/// number of worker threads.
pub fn monte_carlo(config: &MonteCarloConfig) -> Result<MonteCarloSummary, Error> {
    let known = config.setting.treatment_model();
    let truths = config
        .regimens
        .iter()
        .map(|r| config.setting.truth(r, config.tau))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(e.to_string()))?;
    let variance = config.variance && config.setting.n_decisions() == 1;
    let mut cells = Vec::new();
    for &n in &config.ns {
        let per_rep: Vec<Vec<Replicate>> = (0..config.reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = stream_rng(config.seed, &[n as u64, rep as u64]);
                let cohort = config.setting.generate(n, None, &mut rng);
                let mut out = Vec::with_capacity(config.regimens.len() * config.estimators.len());
                for regimen in &config.regimens {
                    for &kind in &config.estimators {
                        let cfg = EstimationConfig::new(config.tau, regimen.clone(), kind.mode());
                        out.push(run_one(&cohort, &cfg, known.as_ref(), variance));
                    }
                }
                out
            })
            .collect();
        for (ri, regimen) in config.regimens.iter().enumerate() {
            let spec = config.setting.truth_spec(regimen);
            let estimators = config
                .estimators
                .iter()
                .enumerate()
                .map(|(ei, &kind)| {
                    let slot = ri * config.estimators.len() + ei;
                    let reps: Vec<&Replicate> = per_rep.iter().map(|r| &r[slot]).collect();
                    summarize(kind, n, truths[ri], &reps)
                })
                .collect();
            cells.push(CellSummary {
                regimen: regimen.clone(),
                n,
                truth: truths[ri],
                death_probability: spec.death_mass,
                estimators,
            });
        }
    }
    Ok(MonteCarloSummary {
        tau: config.tau,
        reps: config.reps,
        seed: config.seed,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub setting: Setting,
    pub regimen: Regimen,
    pub n: usize,
    pub sims: usize,
    pub replicates: usize,
    pub level: f64,
    pub tau: f64,
    pub seed: u64,
    pub estimator: EstimatorKind,
}

/// Point arm 1 and regimen (1,1) under both propensity modes.
pub fn table_b1_configs(
    n: usize,
    sims: usize,
    replicates: usize,
    seed: u64,
) -> Vec<CoverageConfig> {
    let settings = [
        (Setting::Point(PointDgp::default()), Regimen::point(true)),
        (
            Setting::TimeVarying(TimeVaryingDgp::default()),
            Regimen::constant(true, 2),
        ),
    ];
    let mut out = Vec::new();
    for (setting, regimen) in settings {
        for estimator in [EstimatorKind::IptwEstPs, EstimatorKind::IptwTruePs] {
            out.push(CoverageConfig {
                setting: setting.clone(),
                regimen: regimen.clone(),
                n,
                sims,
                replicates,
                level: 0.95,
                tau: 0.5,
                seed,
                estimator,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub regimen: Regimen,
    pub n: usize,
    pub truth: f64,
    pub estimator: EstimatorKind,
    pub sims: usize,
    pub covered: usize,
    pub n_failed: usize,
    /// Fraction of successful simulations whose interval contains the truth.
    pub coverage: f64,
    pub mean_width: f64,
}

/// Fraction of simulated datasets whose percentile bootstrap interval
/// contains the truth.
pub fn coverage_study(config: &CoverageConfig) -> Result<CoverageSummary, Error> {
    let known = config.setting.treatment_model();
    let truth = config
        .setting
        .truth(&config.regimen, config.tau)
        .map_err(|e| Error::Config(e.to_string()))?;
    let cfg = EstimationConfig::new(config.tau, config.regimen.clone(), config.estimator.mode());
    let results: Vec<Option<(bool, f64)>> = (0..config.sims)
        .into_par_iter()
        .map(|sim| {
            let mut rng = stream_rng(config.seed, &[config.n as u64, sim as u64]);
            let cohort = config.setting.generate(config.n, None, &mut rng);
            let boot_seed = derive_seed(config.seed, &[config.n as u64, sim as u64, u64::MAX]);
            let ci = bootstrap_ci(
                cohort.n_subjects(),
                |idx| estimate_q(&cohort.select(idx), &cfg, Some(known.as_ref())),
                config.replicates,
                config.level,
                boot_seed,
                false,
            )
            .ok()?;
            Some((ci.contains(truth), ci.upper - ci.lower))
        })
        .collect();
    let done: Vec<(bool, f64)> = results.iter().flatten().copied().collect();
    let covered = done.iter().filter(|d| d.0).count();
    Ok(CoverageSummary {
        regimen: config.regimen.clone(),
        n: config.n,
        truth,
        estimator: config.estimator,
        sims: config.sims,
        covered,
        n_failed: config.sims - done.len(),
        coverage: covered as f64 / done.len().max(1) as f64,
        mean_width: done.iter().map(|d| d.1).sum::<f64>() / done.len().max(1) as f64,
    })
}
