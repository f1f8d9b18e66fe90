//! Acceptance suite. Prints one PASS/FAIL line per criterion followed by
//! its individual checks, and exits non-zero when any criterion fails.
//!
//! Run a subset with `cargo test -p survquant-validation --test acceptance -- C1 C6`.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use survquant::oracle::{check_instance, random_instance};
use survquant::pipeline::{estimate, EstimationConfig, WeightingMode};
use survquant::propensity::{fit_logistic, logistic, Design, FitOptions};
use survquant::quantile::{estimating_equation, weighted_quantile};
use survquant::rng::stream_rng;
use survquant::simulate::{
    coverage_study, gen_point, gen_time_varying, monte_carlo, table1_config, table2_config,
    table_b1_configs, EstimatorKind, MonteCarloSummary, PointDgp, Setting, TimeVaryingDgp,
};
use survquant::weights::{iptw_point, iptw_time_varying, Regimen, WeightOptions};
use survquant_validation::reference::{CellRef, TABLE1, TABLE2, TRUTHS};
use survquant_validation::tolerances::*;
use survquant_validation::{Check, CriterionResult};

type Outcome = Result<Vec<Check>, String>;

struct Timed<T> {
    value: Result<T, String>,
    elapsed: Duration,
}

fn timed<T>(f: impl FnOnce() -> Result<T, String>) -> Timed<T> {
    let start = Instant::now();
    let value = f();
    Timed {
        value,
        elapsed: start.elapsed(),
    }
}

fn table1() -> &'static Timed<MonteCarloSummary> {
    static CELL: OnceLock<Timed<MonteCarloSummary>> = OnceLock::new();
    CELL.get_or_init(|| {
        timed(|| {
            monte_carlo(&table1_config(MC_REPS, MC_SEED, MC_GRID.to_vec()))
                .map_err(|e| e.to_string())
        })
    })
}

fn table2() -> &'static Timed<MonteCarloSummary> {
    static CELL: OnceLock<Timed<MonteCarloSummary>> = OnceLock::new();
    CELL.get_or_init(|| {
        timed(|| {
            monte_carlo(&table2_config(MC_REPS, MC_SEED, MC_GRID.to_vec()))
                .map_err(|e| e.to_string())
        })
    })
}

fn setting(time_varying: bool) -> Setting {
    if time_varying {
        Setting::TimeVarying(TimeVaryingDgp::default())
    } else {
        Setting::Point(PointDgp::default())
    }
}

fn c1_truths() -> Outcome {
    let start = Instant::now();
    let mut checks = Vec::new();
    for r in TRUTHS {
        let s = setting(r.time_varying);
        let regimen = Regimen::constant(r.arm, s.n_decisions());
        let q = s.truth(&regimen, 0.5).map_err(|e| e.to_string())?;
        let sq = s.survivor_truth(&regimen, 0.5).map_err(|e| e.to_string())?;
        checks.push(Check::abs(
            format!("{} median", r.label),
            q,
            r.median,
            TRUTH_ABS,
        ));
        checks.push(Check::abs(
            format!("{} survivor median", r.label),
            sq,
            r.survivor_median,
            TRUTH_ABS,
        ));
    }
    checks.push(Check::runtime("runtime", start.elapsed(), TRUTH_RUNTIME));
    Ok(checks)
}

fn table_checks(run: &Timed<MonteCarloSummary>, refs: &[CellRef], decisions: usize) -> Outcome {
    let summary = run.value.as_ref().map_err(Clone::clone)?;
    let mut checks = Vec::new();
    for r in refs {
        let regimen = Regimen::constant(r.arm, decisions);
        let cell = summary
            .cell(&regimen, MC_N)
            .ok_or_else(|| format!("missing cell {regimen} N={MC_N}"))?;
        let get = |k: EstimatorKind| {
            cell.get(k)
                .ok_or_else(|| format!("missing {} in {regimen}", k.label()))
        };
        for (kind, target) in [
            (EstimatorKind::IptwTruePs, r.rmse_true_ps),
            (EstimatorKind::IptwEstPs, r.rmse_est_ps),
        ] {
            let e = get(kind)?;
            checks.push(Check::new(
                format!("{regimen} {} all replicates succeed", kind.label()),
                e.n_failed == 0,
                format!("{} ok, {} failed", e.n_ok, e.n_failed),
            ));
            checks.push(Check::at_most(
                format!("{regimen} {} |bias|", kind.label()),
                e.bias.abs(),
                IPTW_BIAS_ABS,
            ));
            checks.push(Check::rel(
                format!("{regimen} {} rMSE", kind.label()),
                e.rmse,
                target,
                RMSE_REL,
            ));
        }
        let u = get(EstimatorKind::Unweighted)?;
        checks.push(Check::abs(
            format!("{regimen} unweighted bias"),
            u.bias,
            r.unweighted_bias,
            UNWEIGHTED_BIAS_ABS,
        ));
    }
    checks.push(Check::runtime("runtime", run.elapsed, MC_RUNTIME));
    Ok(checks)
}

fn c2_table2() -> Outcome {
    table_checks(table2(), &TABLE2, 2)
}

fn c3_table1() -> Outcome {
    table_checks(table1(), &TABLE1, 1)
}

fn c4_efficiency() -> Outcome {
    let mut checks = Vec::new();
    for run in [table1(), table2()] {
        let summary = run.value.as_ref().map_err(Clone::clone)?;
        for cell in &summary.cells {
            let t = cell
                .get(EstimatorKind::IptwTruePs)
                .ok_or("missing true-PS summary")?;
            let e = cell
                .get(EstimatorKind::IptwEstPs)
                .ok_or("missing est-PS summary")?;
            checks.push(Check::new(
                format!("{} N={} rMSE est < true", cell.regimen, cell.n),
                e.rmse < t.rmse,
                format!("est {:.4}, true {:.4}", e.rmse, t.rmse),
            ));
        }
    }
    let summary = table1().value.as_ref().map_err(Clone::clone)?;
    let (mut fitted, mut violations, mut failed) = (0, 0, 0);
    for cell in &summary.cells {
        let e = cell
            .get(EstimatorKind::IptwEstPs)
            .ok_or("missing est-PS summary")?;
        fitted += e.n_ok - e.n_variance_failed;
        violations += e.n_order_violations;
        failed += e.n_variance_failed;
    }
    checks.push(Check::new(
        "plug-in V̂ ≤ Ṽ̂ on every fitted dataset",
        violations == 0 && failed == 0 && fitted > 0,
        format!("{fitted} datasets, {violations} violations (slack {ORDERING_SLACK:e}), {failed} variance failures"),
    ));
    Ok(checks)
}

fn c5_coverage() -> Outcome {
    let start = Instant::now();
    let mut checks = Vec::new();
    for cfg in table_b1_configs(
        COVERAGE_N,
        COVERAGE_SIMS,
        COVERAGE_REPLICATES,
        COVERAGE_SEED,
    ) {
        let s = coverage_study(&cfg).map_err(|e| e.to_string())?;
        checks.push(Check::within(
            format!(
                "{} {} N={} coverage ({} sims, {} failed)",
                s.regimen,
                s.estimator.label(),
                s.n,
                s.sims,
                s.n_failed
            ),
            s.coverage,
            COVERAGE_LO,
            COVERAGE_HI,
        ));
    }
    checks.push(Check::runtime("runtime", start.elapsed(), COVERAGE_RUNTIME));
    Ok(checks)
}

fn c6_oracle() -> Outcome {
    let (mut worst_crossing, mut worst_gap, mut checked) = (0.0f64, 0.0f64, 0usize);
    let mut by_depth = [0usize; 2];
    for i in 0..ORACLE_INSTANCES {
        let kd = 1 + i % 2;
        let inst = random_instance(&mut stream_rng(MC_SEED, &[0x0AC1E, i as u64]), kd);
        let c = check_instance(&inst, &ORACLE_TAUS).map_err(|e| format!("instance {i}: {e}"))?;
        worst_crossing = worst_crossing.max(c.crossing_error);
        worst_gap = worst_gap.max(c.identity_gap);
        checked += 1;
        by_depth[kd - 1] += 1;
    }
    Ok(vec![
        Check::new(
            "instance count",
            checked >= ORACLE_MIN_INSTANCES,
            format!(
                "{checked} instances ({} one-decision, {} two-decision)",
                by_depth[0], by_depth[1]
            ),
        ),
        Check::at_most(
            "Ψ-crossing vs enumerated quantile",
            worst_crossing,
            ORACLE_ABS,
        ),
        Check::at_most("Ψ(q) vs F(q) − τ over the support", worst_gap, ORACLE_ABS),
    ])
}

fn sentinel_invariance() -> Result<Check, String> {
    let cases = [
        (
            gen_point(4000, &PointDgp::default(), 21),
            Regimen::point(false),
        ),
        (
            gen_time_varying(4000, &TimeVaryingDgp::default(), 22),
            Regimen::constant(true, 2),
        ),
    ];
    let mut worst = 0.0f64;
    for (cohort, regimen) in cases {
        for tau in [0.3, 0.5, 0.8] {
            let mut qs = Vec::new();
            for sentinel in [-50.0, -1.0e4, -1.0e9] {
                let mut cfg = EstimationConfig::new(tau, regimen.clone(), WeightingMode::Estimated);
                cfg.sentinel = Some(sentinel);
                let est = estimate(&cohort, &cfg, None).map_err(|e| e.to_string())?;
                if est.at_sentinel {
                    return Err(format!("{regimen} τ={tau}: quantile fell on the sentinel"));
                }
                qs.push(est.q);
            }
            worst = worst.max(qs.iter().map(|q| (q - qs[0]).abs()).fold(0.0, f64::max));
        }
    }
    Ok(Check::new(
        "sentinel invariance",
        worst == 0.0,
        format!("largest change across sentinels {worst:e}"),
    ))
}

fn random_weighted<R: Rng>(rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(1..300);
    let values = (0..n)
        .map(|_| f64::from(rng.random_range(-40i32..40)) * 0.25)
        .collect();
    let weights = (0..n)
        .map(|_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.01..20.0)
            }
        })
        .collect::<Vec<f64>>();
    (values, weights)
}

fn weight_scale_invariance() -> Result<Check, String> {
    let mut rng = stream_rng(MC_SEED, &[0x5CA1E]);
    let mut mismatches = 0;
    let mut trials = 0;
    while trials < 2000 {
        let (v, w) = random_weighted(&mut rng);
        if w.iter().all(|&x| x == 0.0) {
            continue;
        }
        trials += 1;
        let tau = rng.random_range(0.01..0.99);
        let q = weighted_quantile(&v, &w, tau).map_err(|e| e.to_string())?;
        for c in [1e-3, 0.5, 3.0, 1e6] {
            let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
            if weighted_quantile(&v, &scaled, tau).map_err(|e| e.to_string())? != q {
                mismatches += 1;
            }
        }
    }
    Ok(Check::new(
        "weight-scale invariance of q̂",
        mismatches == 0,
        format!("{trials} weighted samples x 4 scales, {mismatches} mismatches"),
    ))
}

fn psi_monotone_and_bracketing() -> Result<Check, String> {
    let mut rng = stream_rng(MC_SEED, &[0x951]);
    let (mut not_monotone, mut not_bracketed, mut trials) = (0, 0, 0);
    while trials < 2000 {
        let (v, w) = random_weighted(&mut rng);
        if w.iter().all(|&x| x == 0.0) {
            continue;
        }
        trials += 1;
        let tau = rng.random_range(0.01..0.99);
        let mut grid = v.clone();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        let psi = grid
            .iter()
            .map(|&q| estimating_equation(&v, &w, tau, q))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        not_monotone += usize::from(psi.windows(2).any(|p| p[1] < p[0]));
        let q = weighted_quantile(&v, &w, tau).map_err(|e| e.to_string())?;
        let j = grid
            .iter()
            .position(|&g| g == q)
            .ok_or("q̂ is not a sample value")?;
        let slack = 1e-12 * w.iter().sum::<f64>() / w.len() as f64;
        let below_ok = j == 0 || psi[j - 1] < 0.0;
        if psi[j] < -slack || !below_ok {
            not_bracketed += 1;
        }
    }
    Ok(Check::new(
        "Ψ monotone and root bracketing",
        not_monotone == 0 && not_bracketed == 0,
        format!(
            "{trials} weighted samples, {not_monotone} non-monotone, {not_bracketed} unbracketed"
        ),
    ))
}

fn mean_one_weights() -> Result<Vec<Check>, String> {
    let opts = WeightOptions::default();
    let mut checks = Vec::new();
    let dgp = PointDgp::default();
    let cohort = gen_point(MEAN_ONE_N, &dgp, 31);
    for arm in [false, true] {
        let w =
            iptw_point(&cohort, arm, &dgp.treatment_model(), &opts).map_err(|e| e.to_string())?;
        checks.push(Check::abs(
            format!("mean weight point a={}", u8::from(arm)),
            w.mean(),
            1.0,
            MEAN_ONE_ABS,
        ));
    }
    let tv = TimeVaryingDgp::default();
    let cohort = gen_time_varying(MEAN_ONE_N, &tv, 32);
    for arm in [false, true] {
        let regimen = Regimen::constant(arm, 2);
        let w = iptw_time_varying(&cohort, &regimen, &tv.treatment_model(), &opts)
            .map_err(|e| e.to_string())?;
        checks.push(Check::abs(
            format!("mean weight time-varying {regimen}"),
            w.mean(),
            1.0,
            MEAN_ONE_ABS,
        ));
    }
    Ok(checks)
}

fn logistic_two_by_two() -> Result<Check, String> {
    // Treated 45 of 60 when L = 1 and 12 of 80 when L = 0.
    let mut design = Design::new(vec!["(intercept)".into(), "L".into()]);
    let mut response = Vec::new();
    for (l, treated, total) in [(1.0, 45, 60), (0.0, 12, 80)] {
        for i in 0..total {
            design.push_row(&[1.0, l]);
            response.push(i < treated);
        }
    }
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let expected = [logit(12.0 / 80.0), logit(45.0 / 60.0) - logit(12.0 / 80.0)];
    let model = fit_logistic(&design, &response, None, &FitOptions::default())
        .map_err(|e| e.to_string())?;
    let err = model
        .theta
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(Check::at_most(
        "logistic fit vs 2x2 closed form",
        err,
        LOGISTIC_2X2_ABS,
    ))
}

fn fisher_vs_finite_differences() -> Result<Check, String> {
    let mut rng = stream_rng(MC_SEED, &[0xF15]);
    let mut design = Design::new(vec!["(intercept)".into(), "x1".into(), "x2".into()]);
    let mut response = Vec::new();
    for _ in 0..3000 {
        let x1: f64 = rng.random_range(-1.5..1.5);
        let x2 = f64::from(u8::from(rng.random_bool(0.4)));
        design.push_row(&[1.0, x1, x2]);
        response.push(rng.random::<f64>() < logistic(-0.3 + 1.2 * x1 - 0.8 * x2));
    }
    let model = fit_logistic(&design, &response, None, &FitOptions::default())
        .map_err(|e| e.to_string())?;
    let score = |theta: &[f64]| {
        let mut g = vec![0.0; theta.len()];
        for (x, &a) in design.rows().zip(&response) {
            let eta: f64 = x.iter().zip(theta).map(|(u, v)| u * v).sum();
            let r = f64::from(u8::from(a)) - logistic(eta);
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += xj * r;
            }
        }
        g
    };
    let p = model.dim();
    let mut worst = 0.0f64;
    for j in 0..p {
        let (mut up, mut down) = (model.theta.clone(), model.theta.clone());
        up[j] += FISHER_FD_STEP;
        down[j] -= FISHER_FD_STEP;
        let (gu, gd) = (score(&up), score(&down));
        for i in 0..p {
            let fd = -(gu[i] - gd[i]) / (2.0 * FISHER_FD_STEP);
            let exact = model.fisher_info[(i, j)];
            worst = worst.max((fd - exact).abs() / exact.abs().max(1.0));
        }
    }
    Ok(Check::at_most(
        "Fisher information vs finite differences (relative)",
        worst,
        FISHER_FD_REL,
    ))
}

fn c7_invariants() -> Outcome {
    let mut checks = vec![
        sentinel_invariance()?,
        weight_scale_invariance()?,
        psi_monotone_and_bracketing()?,
    ];
    checks.extend(mean_one_weights()?);
    checks.push(logistic_two_by_two()?);
    checks.push(fisher_vs_finite_differences()?);
    Ok(checks)
}

fn c8_predicted_sd() -> Outcome {
    let summary = table1().value.as_ref().map_err(Clone::clone)?;
    let mut checks = Vec::new();
    for arm in [false, true] {
        let regimen = Regimen::point(arm);
        let cell = summary.cell(&regimen, MC_N).ok_or("missing cell")?;
        for kind in [EstimatorKind::IptwTruePs, EstimatorKind::IptwEstPs] {
            let e = cell.get(kind).ok_or("missing estimator")?;
            let predicted = e
                .predicted_sd
                .ok_or_else(|| format!("{regimen} {}: no plug-in sd", kind.label()))?;
            checks.push(Check::rel(
                format!(
                    "{regimen} {} plug-in sd vs Monte Carlo sd {:.4}",
                    kind.label(),
                    e.sd
                ),
                predicted,
                e.sd,
                PREDICTED_SD_REL,
            ));
        }
    }
    Ok(checks)
}

type Criterion = (u8, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 8] = [
    (1, "analytic truths", c1_truths),
    (2, "time-varying Monte Carlo table", c2_table2),
    (3, "point-treatment Monte Carlo table", c3_table1),
    (4, "efficiency ordering", c4_efficiency),
    (5, "bootstrap coverage", c5_coverage),
    (6, "identification oracle", c6_oracle),
    (7, "invariant suites", c7_invariants),
    (8, "plug-in sd vs Monte Carlo sd", c8_predicted_sd),
];

fn main() -> ExitCode {
    let wanted: Vec<u8> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.trim_start_matches(['C', 'c']).parse().ok())
        .collect();
    let mut results = Vec::new();
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let result = match outcome {
            Ok(checks) => CriterionResult {
                id,
                name,
                checks,
                elapsed: start.elapsed(),
                error: None,
            },
            Err(e) => CriterionResult {
                id,
                name,
                checks: Vec::new(),
                elapsed: start.elapsed(),
                error: Some(e),
            },
        };
        print!("{result}");
        results.push(result);
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("C{}", r.id))
        .collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(" ({})", failed.join(", "))
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
