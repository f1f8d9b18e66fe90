//! Plug-in asymptotic variances for point-treatment estimates and percentile
//! bootstrap confidence intervals.

use nalgebra::{Cholesky, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::propensity::{Design, PropensityModel};
use crate::quantile::weighted_quantile;
use crate::rng::stream_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("density estimate {0:.3e} is degenerate")]
    DegenerateDensity(f64),
    #[error("Fisher information is singular")]
    SingularInformation,
    #[error("{failed} of {total} bootstrap replicates failed; first error: {first}")]
    PipelineFailure {
        failed: usize,
        total: usize,
        first: String,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Weighted Gaussian kernel density at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub value: f64,
    pub bandwidth: f64,
}

/// Plug-in variance components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub v_tilde: f64,
    /// Estimated-score variance; `None` on the known-score branch.
    pub v_hat: Option<f64>,
    pub f_hat: f64,
    pub avar_known: f64,
    pub avar_est: Option<f64>,
    pub d_vector: Vec<f64>,
    pub bandwidth: f64,
    /// `V̂` came out negative and was set to zero.
    pub clamped: bool,
}

impl VarianceEstimate {
    /// Asymptotic standard error of the estimate for a sample of size `n`.
    pub fn se(&self, n: usize) -> f64 {
        (self.avar_est.unwrap_or(self.avar_known) / n as f64).sqrt()
    }
}

fn indicator(v: f64, q: f64) -> f64 {
    f64::from(u8::from(v <= q))
}

fn check_lengths(values: &[f64], weights: &[f64]) -> Result<(), InferenceError> {
    if values.len() != weights.len() || values.is_empty() {
        return Err(InferenceError::InvalidInput(format!(
            "{} values and {} weights",
            values.len(),
            weights.len()
        )));
    }
    Ok(())
}

/// Weighted mean and standard deviation of `(value, weight)` pairs.
fn weighted_sd(pairs: &[(f64, f64)], total: f64) -> f64 {
    let mean = pairs.iter().map(|&(v, w)| w * v).sum::<f64>() / total;
    let var = pairs
        .iter()
        .map(|&(v, w)| w * (v - mean).powi(2))
        .sum::<f64>()
        / total;
    var.sqrt()
}

/// Weighted Gaussian-kernel density of `values` at `q`.
///
/// Entries flagged in `excluded` (decedents at the sentinel) contribute to
/// the normalizing mass but not to the kernel sum. The default bandwidth is
/// `0.9 · min(sd_w, IQR_w / 1.34) · N_eff^(−1/5)` over the included entries,
/// with `N_eff = (Σw)² / Σw²`.
pub fn density_at(
    values: &[f64],
    weights: &[f64],
    excluded: Option<&[bool]>,
    q: f64,
    bandwidth: Option<f64>,
) -> Result<DensityEstimate, InferenceError> {
    check_lengths(values, weights)?;
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(InferenceError::InvalidInput("weights sum to zero".into()));
    }
    let pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(weights)
        .enumerate()
        .filter(|&(i, (_, &w))| w > 0.0 && !excluded.is_some_and(|e| e[i]))
        .map(|(_, (&v, &w))| (v, w))
        .collect();
    let included: f64 = pairs.iter().map(|p| p.1).sum();
    if pairs.is_empty() || included.is_nan() || included <= 0.0 {
        return Err(InferenceError::DegenerateDensity(0.0));
    }
    let h = match bandwidth {
        Some(h) => h,
        None => default_bandwidth(&pairs, included),
    };
    if !(h > 0.0 && h.is_finite()) {
        return Err(InferenceError::DegenerateDensity(0.0));
    }
    let s: f64 = pairs
        .iter()
        .map(|&(v, w)| w * crate::normal::pdf((q - v) / h))
        .sum();
    let value = s / (h * total);
    if value <= 1e-12 {
        return Err(InferenceError::DegenerateDensity(value));
    }
    Ok(DensityEstimate {
        value,
        bandwidth: h,
    })
}

fn default_bandwidth(pairs: &[(f64, f64)], total: f64) -> f64 {
    let sd = weighted_sd(pairs, total);
    let (v, w): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let iqr = match (
        weighted_quantile(&v, &w, 0.75),
        weighted_quantile(&v, &w, 0.25),
    ) {
        (Ok(hi), Ok(lo)) => hi - lo,
        _ => 0.0,
    };
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let sum_sq: f64 = w.iter().map(|x| x * x).sum();
    let n_eff = total * total / sum_sq;
    0.9 * spread * n_eff.powf(-0.2)
}

/// `Ṽ̂ = N⁻¹ Σ [w_i (1{Ỹ_i ≤ q̂} − τ)]²` with weights rescaled to mean one.
pub fn v_tilde(values: &[f64], weights: &[f64], tau: f64, q: f64) -> Result<f64, InferenceError> {
    check_lengths(values, weights)?;
    let n = values.len() as f64;
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(InferenceError::InvalidInput("weights sum to zero".into()));
    }
    let scale = n / total;
    let s: f64 = values
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&v, &w)| (w * scale * (indicator(v, q) - tau)).powi(2))
        .sum();
    Ok(s / n)
}

/// Known propensity score branch: `avar = Ṽ̂ / f̂²`.
pub fn avar_known_ps(
    values: &[f64],
    weights: &[f64],
    excluded: Option<&[bool]>,
    tau: f64,
    q: f64,
    bandwidth: Option<f64>,
) -> Result<VarianceEstimate, InferenceError> {
    let v_tilde = v_tilde(values, weights, tau, q)?;
    let f = density_at(values, weights, excluded, q, bandwidth)?;
    Ok(VarianceEstimate {
        v_tilde,
        v_hat: None,
        f_hat: f.value,
        avar_known: v_tilde / (f.value * f.value),
        avar_est: None,
        d_vector: Vec::new(),
        bandwidth: f.bandwidth,
        clamped: false,
    })
}

/// Inputs for the estimated propensity score branch.
pub struct FittedScore<'a> {
    /// Propensity design row for every subject.
    pub design: &'a Design,
    pub treatment: &'a [bool],
    pub arm: bool,
    pub model: &'a PropensityModel,
}

/// Estimated propensity score branch: `V̂ = Ṽ̂ − D̂ᵀ (Î/N)⁻¹ D̂` with
/// `D̂ = N⁻¹ Σ x_i 1{A_i = a}(1 − 1/p̂_i)(1{Ỹ_i ≤ q̂} − τ)`.
pub fn avar_estimated_ps(
    values: &[f64],
    weights: &[f64],
    excluded: Option<&[bool]>,
    score: &FittedScore<'_>,
    tau: f64,
    q: f64,
    bandwidth: Option<f64>,
) -> Result<VarianceEstimate, InferenceError> {
    let mut out = avar_known_ps(values, weights, excluded, tau, q, bandwidth)?;
    let n = values.len();
    if score.design.n_rows() != n || score.treatment.len() != n {
        return Err(InferenceError::InvalidInput(
            "design rows must match subjects".into(),
        ));
    }
    let p = score.model.dim();
    let mut d = DVector::<f64>::zeros(p);
    for (i, x) in score.design.rows().enumerate() {
        if score.treatment[i] != score.arm {
            continue;
        }
        let pa = crate::propensity::predict(score.model, x, score.arm)
            .map_err(|e| InferenceError::InvalidInput(e.to_string()))?;
        let c = (1.0 - 1.0 / pa) * (indicator(values[i], q) - tau);
        for (dj, xj) in d.iter_mut().zip(x) {
            *dj += c * xj;
        }
    }
    d /= n as f64;
    let info = score.model.mean_fisher_info();
    let chol = Cholesky::new(info).ok_or(InferenceError::SingularInformation)?;
    let correction = d.dot(&chol.solve(&d));
    let mut v_hat = out.v_tilde - correction;
    if v_hat < 0.0 {
        v_hat = 0.0;
        out.clamped = true;
    }
    out.v_hat = Some(v_hat);
    out.avar_est = Some(v_hat / (out.f_hat * out.f_hat));
    out.d_vector = d.iter().copied().collect();
    Ok(out)
}

/// Percentile bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n_replicates: usize,
    pub n_failed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicate_estimates: Option<Vec<f64>>,
}

impl BootstrapCI {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Leftmost order statistic at rank `⌈B·p⌉` of an ascending sample.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let b = sorted.len();
    let rank = ((b as f64 * p).ceil() as usize).clamp(1, b);
    sorted[rank - 1]
}

/// Resamples `n_subjects` with replacement `replicates` times and applies
/// `pipeline` to each index draw.
///
/// Replicate `r` draws from its own stream of `seed`, so the result does not
/// depend on the number of worker threads. Fails when more than 5% of the
/// replicates fail.
pub fn bootstrap_ci<F, E>(
    n_subjects: usize,
    pipeline: F,
    replicates: usize,
    level: f64,
    seed: u64,
    keep_replicates: bool,
) -> Result<BootstrapCI, InferenceError>
where
    F: Fn(&[usize]) -> Result<f64, E> + Sync,
    E: std::fmt::Display,
{
    if n_subjects == 0 || replicates == 0 || !(level > 0.0 && level < 1.0) {
        return Err(InferenceError::InvalidInput(format!(
            "n = {n_subjects}, B = {replicates}, level = {level}"
        )));
    }
    let results: Vec<Result<f64, String>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, &[r as u64]);
            let idx: Vec<usize> = (0..n_subjects)
                .map(|_| rng.random_range(0..n_subjects))
                .collect();
            pipeline(&idx).map_err(|e| e.to_string())
        })
        .collect();
    bootstrap_summary(results, level, keep_replicates)
}

fn bootstrap_summary(
    results: Vec<Result<f64, String>>,
    level: f64,
    keep_replicates: bool,
) -> Result<BootstrapCI, InferenceError> {
    let total = results.len();
    let mut estimates = Vec::with_capacity(total);
    let mut first = None;
    let mut failed = 0;
    for r in results {
        match r {
            Ok(q) => estimates.push(q),
            Err(e) => {
                failed += 1;
                first.get_or_insert(e);
            }
        }
    }
    if estimates.is_empty() || failed as f64 > 0.05 * total as f64 {
        return Err(InferenceError::PipelineFailure {
            failed,
            total,
            first: first.unwrap_or_default(),
        });
    }
    let mut sorted = estimates.clone();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(BootstrapCI {
        lower: percentile(&sorted, alpha / 2.0),
        upper: percentile(&sorted, 1.0 - alpha / 2.0),
        level,
        n_replicates: total,
        n_failed: failed,
        replicate_estimates: keep_replicates.then_some(estimates),
    })
}

/// Serialized inference summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub estimate: f64,
    pub avar_known: Option<f64>,
    pub avar_est: Option<f64>,
    pub ci: Option<[f64; 2]>,
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propensity::{fit_logistic, FitOptions};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn density_of_standard_normal_at_zero() {
        let mut rng = stream_rng(5, &[]);
        let v: Vec<f64> = (0..100_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let w = vec![1.0; v.len()];
        let f = density_at(&v, &w, None, 0.0, None).unwrap();
        assert!((f.value - 0.398_942_280_401_432_7).abs() < 0.01, "{f:?}");
    }

    #[test]
    fn sentinel_mass_scales_density_down() {
        let v = [-1000.0, -1000.0, -0.5, 0.0, 0.5, 1.0];
        let w = [1.0; 6];
        let excl = [true, true, false, false, false, false];
        let all = density_at(&v[2..], &w[2..], None, 0.2, Some(0.5)).unwrap();
        let part = density_at(&v, &w, Some(&excl), 0.2, Some(0.5)).unwrap();
        assert!((part.value - all.value * 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_survivor_value_is_degenerate() {
        let v = [-1000.0, 2.0, 2.0];
        let excl = [true, false, false];
        assert!(matches!(
            density_at(&v, &[1.0; 3], Some(&excl), 50.0, None),
            Err(InferenceError::DegenerateDensity(_))
        ));
        assert!(matches!(
            density_at(&v, &[1.0, 0.0, 0.0], Some(&excl), 2.0, None),
            Err(InferenceError::DegenerateDensity(_))
        ));
    }

    #[test]
    fn density_is_continuous_in_bandwidth() {
        let v: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let w: Vec<f64> = (0..50).map(|i| 0.5 + (i % 3) as f64).collect();
        let mut prev = density_at(&v, &w, None, 0.3, Some(0.2)).unwrap().value;
        for step in 1..200 {
            let h = 0.2 + step as f64 * 1e-4;
            let f = density_at(&v, &w, None, 0.3, Some(h)).unwrap().value;
            assert!((f - prev).abs() < 1e-3 * prev);
            prev = f;
        }
    }

    #[test]
    fn v_tilde_approaches_bernoulli_variance() {
        let v: Vec<f64> = (0..10_001).map(|i| i as f64).collect();
        let w = vec![1.0; v.len()];
        let q = weighted_quantile(&v, &w, 0.5).unwrap();
        assert!((v_tilde(&v, &w, 0.5, q).unwrap() - 0.25).abs() < 1e-6);
    }

    #[test]
    fn v_tilde_uses_mean_one_weights() {
        let v = [0.1, 0.5, -0.3, 2.0, 1.2, 0.8, -1.0, 0.0, 0.4, 0.9];
        let w = [1.5, 0.5, 2.0, 1.0, 0.25, 1.75, 1.0, 0.5, 0.75, 0.75];
        let q = weighted_quantile(&v, &w, 0.5).unwrap();
        let raw_scaled: f64 = v
            .iter()
            .zip(&w)
            .map(|(&y, &wi)| (3.0 * wi * (indicator(y, q) - 0.5)).powi(2))
            .sum::<f64>()
            / 10.0;
        let unscaled: f64 = v
            .iter()
            .zip(&w)
            .map(|(&y, &wi)| (wi * (indicator(y, q) - 0.5)).powi(2))
            .sum::<f64>()
            / 10.0;
        assert!((raw_scaled - 9.0 * unscaled).abs() < 1e-12);
        let w3: Vec<f64> = w.iter().map(|x| 3.0 * x).collect();
        assert_eq!(weighted_quantile(&v, &w3, 0.5).unwrap(), q);
        let a = v_tilde(&v, &w, 0.5, q).unwrap();
        let b = v_tilde(&v, &w3, 0.5, q).unwrap();
        assert!((a - b).abs() < 1e-12);
        // Weights here already average one.
        assert!((a - unscaled).abs() < 1e-12);
    }

    fn toy_fit() -> (Vec<f64>, Vec<f64>, Design, Vec<bool>, PropensityModel) {
        let mut rng = stream_rng(9, &[]);
        let n = 400;
        let mut rows = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let l: bool = rng.random_bool(0.5);
            let t = rng.random_bool(if l { 0.7 } else { 0.3 });
            let e: f64 = StandardNormal.sample(&mut rng);
            rows.push([1.0, f64::from(u8::from(l))]);
            a.push(t);
            y.push(3.0 * f64::from(u8::from(l)) - 0.9 * f64::from(u8::from(t)) + e);
        }
        let design = Design::from_rows(vec!["1".into(), "L".into()], &rows);
        let model = fit_logistic(&design, &a, None, &FitOptions::default()).unwrap();
        let w: Vec<f64> = (0..n)
            .map(|i| {
                if a[i] {
                    1.0 / model.prob_treated(design.row(i))
                } else {
                    0.0
                }
            })
            .collect();
        (y, w, design, a, model)
    }

    #[test]
    fn estimated_score_variance_is_smaller() {
        let (y, w, design, a, model) = toy_fit();
        let q = weighted_quantile(&y, &w, 0.5).unwrap();
        let score = FittedScore {
            design: &design,
            treatment: &a,
            arm: true,
            model: &model,
        };
        let v = avar_estimated_ps(&y, &w, None, &score, 0.5, q, None).unwrap();
        assert!(v.v_hat.unwrap() <= v.v_tilde + 1e-10);
        assert!(v.avar_est.unwrap() <= v.avar_known);
        assert_eq!(v.d_vector.len(), 2);
    }

    #[test]
    fn covariate_free_design_has_no_correction() {
        let (y, _, _, a, _) = toy_fit();
        let design = Design::from_rows(vec!["1".into()], &vec![[1.0]; y.len()]);
        let model = fit_logistic(&design, &a, None, &FitOptions::default()).unwrap();
        let w: Vec<f64> = a
            .iter()
            .map(|&t| {
                if t {
                    1.0 / model.prob_treated(&[1.0])
                } else {
                    0.0
                }
            })
            .collect();
        let q = weighted_quantile(&y, &w, 0.5).unwrap();
        let score = FittedScore {
            design: &design,
            treatment: &a,
            arm: true,
            model: &model,
        };
        let v = avar_estimated_ps(&y, &w, None, &score, 0.5, q, None).unwrap();
        // Within the arm, (1 − 1/p̂) is constant and the indicators average τ
        // under the weights, so D̂ is zero up to the root's jump.
        assert!(
            v.d_vector[0].abs() < 2.0 / y.len() as f64,
            "{:?}",
            v.d_vector
        );
        assert!((v.v_hat.unwrap() - v.v_tilde).abs() < 1e-4);
    }

    #[test]
    fn constant_pipeline_gives_point_interval() {
        let ci = bootstrap_ci(10, |_| Ok::<_, String>(1.5), 200, 0.95, 3, false).unwrap();
        assert_eq!((ci.lower, ci.upper), (1.5, 1.5));
        assert_eq!(ci.n_replicates, 200);
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let data: Vec<f64> = (0..60).map(|i| ((i * 7919) % 61) as f64).collect();
        let run = |seed| {
            bootstrap_ci(
                data.len(),
                |idx: &[usize]| {
                    let v: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
                    weighted_quantile(&v, &vec![1.0; v.len()], 0.5)
                },
                500,
                0.9,
                seed,
                true,
            )
            .unwrap()
        };
        let a = run(17);
        assert_eq!(a, run(17));
        assert!(a.lower <= a.upper);
        assert_eq!(a.replicate_estimates.as_ref().unwrap().len(), 500);
    }

    #[test]
    fn bootstrap_reports_failures() {
        let fail_every = |k: usize| {
            move |idx: &[usize]| {
                if idx[0].is_multiple_of(k) {
                    Err("boom")
                } else {
                    Ok(0.0)
                }
            }
        };
        assert!(matches!(
            bootstrap_ci(10, fail_every(2), 100, 0.95, 1, false),
            Err(InferenceError::PipelineFailure { .. })
        ));
        let ok = bootstrap_ci(1000, fail_every(1000), 100, 0.95, 1, false).unwrap();
        assert!(ok.n_failed <= 5);
    }

    #[test]
    fn percentile_rank_convention() {
        let s: Vec<f64> = (1..=2000).map(f64::from).collect();
        assert_eq!(percentile(&s, 0.025), 50.0);
        assert_eq!(percentile(&s, 0.975), 1950.0);
        assert_eq!(percentile(&s[..1], 0.025), 1.0);
    }
}
