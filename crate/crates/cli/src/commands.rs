//! Command implementations.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use survquant::cohort::{
    read_cohort_csv, validate_cohort, Censoring, Direction, LongitudinalCohort,
};
use survquant::inference::{bootstrap_ci, InferenceReport};
use survquant::oracle::{check_instance, random_instance, DiscreteInstance, InstanceCheck};
use survquant::pipeline::{estimate, estimate_q, point_variance, EstimationConfig, WeightingMode};
use survquant::rng::stream_rng;
use survquant::simulate::{
    coverage_study, monte_carlo, table1_config, table2_config, table_b1_configs, CoverageSummary,
    PointDgp, Setting, TimeVaryingDgp,
};
use survquant::weights::Regimen;

use crate::config::RunConfig;
use crate::{CliError, Preset};

pub const DEFAULT_BOOTSTRAP: usize = 2000;
pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_REPS: usize = 2000;
pub const DEFAULT_SIMS: usize = 1000;
pub const DEFAULT_INSTANCES: usize = 200;
pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Debug, Serialize)]
struct Diagnostics {
    n_subjects: usize,
    n_decisions: usize,
    regimen: String,
    tau: f64,
    mode: WeightingMode,
    level: f64,
    /// Quantile on the ranking scale.
    q_ranked: f64,
    sentinel: f64,
    at_sentinel: bool,
    death_fraction: f64,
    weighted_death_fraction: f64,
    mean_weight: f64,
    n_zero_weight: usize,
    min_ps: Option<f64>,
    n_below_eps: usize,
    se: Option<f64>,
    density: Option<f64>,
    bandwidth: Option<f64>,
    variance_clamped: bool,
    bootstrap_failed: usize,
}

#[derive(Debug, Serialize)]
struct Report {
    #[serde(flatten)]
    inference: InferenceReport,
    diagnostics: Diagnostics,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn read_cohort(path: &Path) -> Result<LongitudinalCohort, CliError> {
    let file = File::open(path).map_err(|e| CliError {
        kind: "io",
        message: format!("{}: {e}", path.display()),
        code: 2,
    })?;
    let cohort = read_cohort_csv(BufReader::new(file)).map_err(survquant::Error::from)?;
    let report = validate_cohort(&cohort);
    if !report.is_valid() {
        let shown: Vec<String> = report
            .violations
            .iter()
            .take(10)
            .map(ToString::to_string)
            .collect();
        return Err(CliError {
            kind: "validation",
            message: format!(
                "{} validation error(s): {}",
                report.violations.len(),
                shown.join("; ")
            ),
            code: 2,
        });
    }
    Ok(cohort)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::numeric(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io)
}

pub fn estimate_config(
    cfg: &RunConfig,
    cohort: &LongitudinalCohort,
) -> Result<EstimationConfig, CliError> {
    let kd = cohort.n_decisions();
    let regimen = match &cfg.regimen {
        Some(s) => s.parse::<Regimen>().map_err(CliError::usage)?,
        None => Regimen::constant(true, kd),
    };
    if regimen.len() != kd {
        return Err(CliError::usage(format!(
            "regimen {regimen} has {} arm(s) but the data have {kd} decision(s)",
            regimen.len()
        )));
    }
    let censored = (0..cohort.n_subjects()).any(|i| cohort.censoring(i) != Censoring::Observed);
    let mode = cfg.mode.unwrap_or(if censored {
        WeightingMode::EstimatedWithCensoring
    } else {
        WeightingMode::Estimated
    });
    let mut out = EstimationConfig::new(cfg.tau.unwrap_or(0.5), regimen, mode);
    out.sentinel = cfg.sentinel;
    if cfg.lower_is_better == Some(true) {
        out.direction = Direction::LowerIsBetter;
    }
    if let Some(eps) = cfg.eps_floor {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(CliError::usage(format!(
                "eps_floor must lie in (0, 0.5), got {eps}"
            )));
        }
        out.weights.eps_floor = eps;
    }
    out.weights.strict = cfg.strict_positivity.unwrap_or(false);
    if !(out.tau > 0.0 && out.tau < 1.0) {
        return Err(CliError::usage(format!(
            "tau must lie in (0, 1), got {}",
            out.tau
        )));
    }
    Ok(out)
}

pub fn estimate_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::usage("no input CSV given"))?;
    let cohort = read_cohort(path)?;
    let est_cfg = estimate_config(cfg, &cohort)?;
    let level = cfg.level.unwrap_or(0.95);
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::usage(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    let replicates = cfg.bootstrap.unwrap_or(DEFAULT_BOOTSTRAP);
    let seed = cfg.seed.unwrap_or(DEFAULT_SEED);

    let est = estimate(&cohort, &est_cfg, None)?;
    let mut warnings = est.warnings.clone();
    let n = cohort.n_subjects();

    let variance = if cohort.n_decisions() == 1 {
        match point_variance(&cohort, &est_cfg, &est, None) {
            Ok(v) => Some(v),
            Err(e) => {
                warnings.push(format!("plug-in variance unavailable: {e}"));
                None
            }
        }
    } else {
        None
    };
    if variance.as_ref().is_some_and(|v| v.clamped) {
        warnings.push("estimated-score variance was negative and is clamped at zero".into());
    }

    let (ci, bootstrap_failed) = if replicates > 0 {
        let boot = bootstrap_ci(
            n,
            |idx| estimate_q(&cohort.select(idx), &est_cfg, None),
            replicates,
            level,
            seed,
            false,
        )
        .map_err(|e| CliError::numeric(e.to_string()))?;
        if boot.n_failed > 0 {
            warnings.push(format!(
                "{} of {replicates} bootstrap replicates failed",
                boot.n_failed
            ));
        }
        (Some([boot.lower, boot.upper]), boot.n_failed)
    } else {
        (None, 0)
    };

    let composite = &est.composite;
    let report = Report {
        inference: InferenceReport {
            estimate: est.q,
            avar_known: variance.as_ref().map(|v| v.avar_known),
            avar_est: variance.as_ref().and_then(|v| v.avar_est),
            ci,
            b: replicates,
            seed,
            warnings,
        },
        diagnostics: Diagnostics {
            n_subjects: n,
            n_decisions: cohort.n_decisions(),
            regimen: est_cfg.regimen.to_string(),
            tau: est_cfg.tau,
            mode: est_cfg.mode,
            level,
            q_ranked: est.q_ranked,
            sentinel: composite.sentinel(),
            at_sentinel: est.at_sentinel,
            death_fraction: composite.death_fraction(),
            weighted_death_fraction: est.weighted_death_fraction,
            mean_weight: est.weights.mean(),
            n_zero_weight: est.weights.n_zero,
            min_ps: finite(est.weights.min_ps),
            n_below_eps: est.weights.n_below_eps,
            se: variance.as_ref().map(|v| v.se(n)),
            density: variance.as_ref().map(|v| v.f_hat),
            bandwidth: variance.as_ref().map(|v| v.bandwidth),
            variance_clamped: variance.as_ref().is_some_and(|v| v.clamped),
            bootstrap_failed,
        },
    };

    if let Some(dir) = &cfg.out {
        create_dir(dir)?;
        write_json(&dir.join("report.json"), &report)?;
        let file = File::create(dir.join("weights.csv")).map_err(CliError::io)?;
        let mut w = BufWriter::new(file);
        est.weights
            .write_csv(&cohort, &mut w)
            .map_err(CliError::io)?;
        w.flush().map_err(CliError::io)?;
    }
    let text =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::numeric(e.to_string()))?;
    println!("{text}");
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct TruthRow {
    pub setting: &'static str,
    pub regimen: String,
    pub death_probability: f64,
    pub truth: f64,
    pub survivor_quantile: f64,
}

pub fn truth_rows(tau: f64) -> Result<Vec<TruthRow>, CliError> {
    let cells = [
        (
            "point",
            Setting::Point(PointDgp::default()),
            Regimen::point(false),
        ),
        (
            "point",
            Setting::Point(PointDgp::default()),
            Regimen::point(true),
        ),
        (
            "time_varying",
            Setting::TimeVarying(TimeVaryingDgp::default()),
            Regimen::constant(false, 2),
        ),
        (
            "time_varying",
            Setting::TimeVarying(TimeVaryingDgp::default()),
            Regimen::constant(true, 2),
        ),
    ];
    cells
        .into_iter()
        .map(|(name, setting, regimen)| {
            let numeric = |e: survquant::simulate::TruthError| CliError::numeric(e.to_string());
            Ok(TruthRow {
                setting: name,
                death_probability: setting.truth_spec(&regimen).death_mass,
                truth: setting.truth(&regimen, tau).map_err(numeric)?,
                survivor_quantile: setting.survivor_truth(&regimen, tau).map_err(numeric)?,
                regimen: regimen.to_string(),
            })
        })
        .collect()
}

fn truth_csv(rows: &[TruthRow]) -> String {
    let mut s = String::from("setting,regimen,death_probability,truth,survivor_quantile\n");
    for r in rows {
        s.push_str(&format!(
            "{},\"{}\",{:.3},{:.3},{:.3}\n",
            r.setting, r.regimen, r.death_probability, r.truth, r.survivor_quantile
        ));
    }
    s
}

pub fn truth(cfg: &RunConfig, json: bool) -> Result<(), CliError> {
    let rows = truth_rows(cfg.tau.unwrap_or(0.5))?;
    if json {
        let text =
            serde_json::to_string_pretty(&rows).map_err(|e| CliError::numeric(e.to_string()))?;
        println!("{text}");
    } else {
        println!(
            "{:<13} {:<8} {:>6} {:>8} {:>9}",
            "setting", "regimen", "death", "truth", "survivor"
        );
        for r in &rows {
            println!(
                "{:<13} {:<8} {:>6.3} {:>8.3} {:>9.3}",
                r.setting, r.regimen, r.death_probability, r.truth, r.survivor_quantile
            );
        }
    }
    Ok(())
}

fn coverage_csv(rows: &[CoverageSummary]) -> String {
    let mut s =
        String::from("regimen,N,truth,estimator,sims,covered,n_failed,coverage,mean_width\n");
    for r in rows {
        s.push_str(&format!(
            "\"{}\",{},{:.3},{},{},{},{},{:.3},{:.4}\n",
            r.regimen,
            r.n,
            r.truth,
            r.estimator.label(),
            r.sims,
            r.covered,
            r.n_failed,
            r.coverage,
            r.mean_width
        ));
    }
    s
}

fn emit(cfg: &RunConfig, csv: &str, json: &impl Serialize) -> Result<(), CliError> {
    match &cfg.out {
        Some(dir) => {
            create_dir(dir)?;
            fs::write(dir.join("table.csv"), csv).map_err(CliError::io)?;
            write_json(&dir.join("table.json"), json)?;
            eprintln!("wrote {}", dir.join("table.csv").display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn simulate(preset: Preset, cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed.unwrap_or(DEFAULT_SEED);
    let tau = cfg.tau.unwrap_or(0.5);
    match preset {
        Preset::Truths => {
            let rows = truth_rows(tau)?;
            emit(cfg, &truth_csv(&rows), &rows)
        }
        Preset::Table1 | Preset::Table2 => {
            let reps = cfg.reps.unwrap_or(DEFAULT_REPS);
            let ns = cfg.n.clone().unwrap_or_else(|| vec![500, 1500, 5000]);
            let mut mc = if preset == Preset::Table1 {
                table1_config(reps, seed, ns)
            } else {
                table2_config(reps, seed, ns)
            };
            mc.tau = tau;
            eprintln!(
                "running {} cell(s) x {reps} replicate(s) on {} thread(s)",
                mc.regimens.len() * mc.ns.len(),
                rayon::current_num_threads()
            );
            let summary = monte_carlo(&mc)?;
            let mut buf = Vec::new();
            summary
                .write_csv(&mut buf)
                .map_err(|e| CliError::numeric(e.to_string()))?;
            emit(cfg, &String::from_utf8_lossy(&buf), &summary)
        }
        Preset::TableB1 => {
            let sims = cfg.sims.unwrap_or(DEFAULT_SIMS);
            let replicates = cfg.bootstrap.unwrap_or(DEFAULT_BOOTSTRAP);
            let ns = cfg.n.clone().unwrap_or_else(|| vec![1500, 5000]);
            let mut rows = Vec::new();
            for n in ns {
                for mut c in table_b1_configs(n, sims, replicates, seed) {
                    c.tau = tau;
                    eprintln!("coverage: {} N={n} {}", c.regimen, c.estimator.label());
                    rows.push(coverage_study(&c)?);
                }
            }
            emit(cfg, &coverage_csv(&rows), &rows)
        }
    }
}

#[derive(Debug, Serialize)]
struct OracleFailure {
    index: usize,
    check: Option<InstanceCheck>,
    error: Option<String>,
    instance: DiscreteInstance,
}

#[derive(Debug, Serialize)]
struct OracleSummary {
    instances: usize,
    seed: u64,
    tolerance: f64,
    passed: usize,
    worst_crossing_error: f64,
    worst_identity_gap: f64,
}

pub const ORACLE_TAUS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

pub fn oracle_check(cfg: &RunConfig) -> Result<(), CliError> {
    let count = cfg.instances.unwrap_or(DEFAULT_INSTANCES);
    let seed = cfg.seed.unwrap_or(DEFAULT_SEED);
    let results: Vec<(DiscreteInstance, Result<InstanceCheck, String>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, &[i as u64]);
            let inst = random_instance(&mut rng, 1 + i % 2);
            let check = check_instance(&inst, &ORACLE_TAUS).map_err(|e| e.to_string());
            (inst, check)
        })
        .collect();
    let mut failures = Vec::new();
    let (mut worst_c, mut worst_g) = (0.0f64, 0.0f64);
    for (index, (instance, check)) in results.into_iter().enumerate() {
        match check {
            Ok(c) => {
                worst_c = worst_c.max(c.crossing_error);
                worst_g = worst_g.max(c.identity_gap);
                if !c.passes(ORACLE_TOL) {
                    failures.push(OracleFailure {
                        index,
                        check: Some(c),
                        error: None,
                        instance,
                    });
                }
            }
            Err(e) => failures.push(OracleFailure {
                index,
                check: None,
                error: Some(e),
                instance,
            }),
        }
    }
    let summary = OracleSummary {
        instances: count,
        seed,
        tolerance: ORACLE_TOL,
        passed: count - failures.len(),
        worst_crossing_error: worst_c,
        worst_identity_gap: worst_g,
    };
    if let Some(dir) = &cfg.out {
        create_dir(dir)?;
        write_json(&dir.join("oracle.json"), &summary)?;
        if !failures.is_empty() {
            write_json(&dir.join("oracle_failures.json"), &failures)?;
        }
    }
    let text =
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::numeric(e.to_string()))?;
    println!("{text}");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "{} of {count} oracle instances exceed tolerance {ORACLE_TOL:e}",
            failures.len()
        )))
    }
}
