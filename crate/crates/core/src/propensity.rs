//! Logistic propensity-score models fit by damped Newton iteration.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropensityError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("design matrix is rank deficient (condition ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },
    #[error("separation: coefficients diverge (max |theta| = {max_abs_theta:.1}, max |score| = {max_abs_score:.3e})")]
    Separation {
        max_abs_theta: f64,
        max_abs_score: f64,
    },
    #[error("no convergence after {iterations} iterations (max |score| = {max_abs_score:.3e})")]
    NonConvergence {
        iterations: usize,
        max_abs_score: f64,
    },
    #[error("observation weights must be finite and nonnegative")]
    InvalidWeights,
    #[error("design has no rows")]
    Empty,
}

/// Row-major design matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    names: Vec<String>,
    data: Vec<f64>,
}

impl Design {
    pub fn new(names: Vec<String>) -> Self {
        Self {
            names,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(names: Vec<String>, rows: usize) -> Self {
        let cap = rows * names.len();
        Self {
            names,
            data: Vec::with_capacity(cap),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(names: Vec<String>, rows: &[R]) -> Self {
        let mut d = Self::with_capacity(names, rows.len());
        for r in rows {
            d.push_row(r.as_ref());
        }
        d
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.names.len(), "row width");
        self.data.extend_from_slice(row);
    }

    pub fn n_rows(&self) -> usize {
        if self.names.is_empty() {
            0
        } else {
            self.data.len() / self.names.len()
        }
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.names.len();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.names.len().max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub score_tol: f64,
    /// Threshold on the Newton decrement `gᵀ H⁻¹ g`.
    pub step_tol: f64,
    pub max_halvings: usize,
    /// `‖θ‖∞` beyond which a non-converged fit is declared separated.
    pub separation_bound: f64,
    /// Ridge added to the Hessian. Diagnostics only; keep at 0 for estimation.
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            score_tol: 1e-8,
            step_tol: 1e-10,
            max_halvings: 20,
            separation_bound: 50.0,
            ridge: 0.0,
        }
    }
}

/// Fitted model `logit P(A = 1 | x) = θᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
    /// `Σ w p (1 − p) x xᵀ` at θ̂ (a sum, not an average).
    pub fisher_info: DMatrix<f64>,
    pub design_spec: Vec<String>,
    pub log_likelihood: f64,
    /// Total observation weight used in the fit.
    pub total_weight: f64,
}

#[inline]
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Evaluation {
    loglik: f64,
    score: DVector<f64>,
    hessian: DMatrix<f64>,
}

fn evaluate(design: &Design, y: &[bool], w: Option<&[f64]>, theta: &[f64]) -> Evaluation {
    let p = design.n_cols();
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut hessian = DMatrix::zeros(p, p);
    for (i, x) in design.rows().enumerate() {
        let wi = w.map_or(1.0, |w| w[i]);
        if wi == 0.0 {
            continue;
        }
        let eta = dot(x, theta);
        let e = (-eta.abs()).exp();
        let prob = if eta >= 0.0 {
            1.0 / (1.0 + e)
        } else {
            e / (1.0 + e)
        };
        let yi = if y[i] { 1.0 } else { 0.0 };
        loglik += wi * (yi * eta - eta.max(0.0) - e.ln_1p());
        let r = wi * (yi - prob);
        let v = wi * prob * (1.0 - prob);
        for a in 0..p {
            score[a] += r * x[a];
            let vx = v * x[a];
            for b in 0..=a {
                hessian[(a, b)] += vx * x[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            hessian[(b, a)] = hessian[(a, b)];
        }
    }
    Evaluation {
        loglik,
        score,
        hessian,
    }
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Maximum-likelihood logistic fit by Newton iteration with step halving.
pub fn fit_logistic(
    design: &Design,
    response: &[bool],
    obs_weights: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<PropensityModel, PropensityError> {
    let n = design.n_rows();
    let p = design.n_cols();
    if n == 0 || p == 0 {
        return Err(PropensityError::Empty);
    }
    if response.len() != n {
        return Err(PropensityError::DimensionMismatch(format!(
            "{n} design rows but {} responses",
            response.len()
        )));
    }
    if let Some(w) = obs_weights {
        if w.len() != n {
            return Err(PropensityError::DimensionMismatch(format!(
                "{n} design rows but {} weights",
                w.len()
            )));
        }
        if w.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
            return Err(PropensityError::InvalidWeights);
        }
    }

    let total_weight = obs_weights.map_or(n as f64, |w| w.iter().sum());
    let mut model = match collapse(design, response, obs_weights) {
        Some((d, y, w)) => fit_rows(&d, &y, Some(&w), opts)?,
        None => fit_rows(design, response, obs_weights, opts)?,
    };
    model.design_spec = design.names().to_vec();
    model.total_weight = total_weight;
    Ok(model)
}

/// Distinct `(row, response)` patterns beyond which rows are fit one by one.
const MAX_PATTERNS: usize = 64;

/// Merges identical `(row, response)` pairs into weighted patterns when the
/// design has few distinct rows, e.g. discrete covariates.
fn collapse(
    design: &Design,
    y: &[bool],
    w: Option<&[f64]>,
) -> Option<(Design, Vec<bool>, Vec<f64>)> {
    if design.n_rows() <= 2 * MAX_PATTERNS {
        return None;
    }
    let mut rows = Design::with_capacity(design.names().to_vec(), MAX_PATTERNS);
    let mut resp: Vec<bool> = Vec::with_capacity(MAX_PATTERNS);
    let mut mass: Vec<f64> = Vec::with_capacity(MAX_PATTERNS);
    for (i, x) in design.rows().enumerate() {
        let wi = w.map_or(1.0, |w| w[i]);
        match (0..resp.len()).find(|&j| resp[j] == y[i] && rows.row(j) == x) {
            Some(j) => mass[j] += wi,
            None => {
                if resp.len() == MAX_PATTERNS {
                    return None;
                }
                rows.push_row(x);
                resp.push(y[i]);
                mass.push(wi);
            }
        }
    }
    Some((rows, resp, mass))
}

fn fit_rows(
    design: &Design,
    response: &[bool],
    obs_weights: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<PropensityModel, PropensityError> {
    let p = design.n_cols();
    let mut theta = vec![0.0; p];
    let mut eval = evaluate(design, response, obs_weights, &theta);

    // At θ = 0 the Hessian is XᵀWX / 4, so its spectrum tells us the rank.
    let eig = SymmetricEigen::new(eval.hessian.clone()).eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
        (lo.min(e), hi.max(e))
    });
    let ratio = if hi > 0.0 { lo / hi } else { 0.0 };
    if ratio < 1e-12 {
        return Err(PropensityError::RankDeficient { ratio });
    }

    let ridge = DMatrix::<f64>::identity(p, p) * opts.ridge;
    let mut converged = false;
    let mut n_iter = 0;
    while n_iter < opts.max_iter {
        let max_score = max_abs(eval.score.iter().copied());
        let max_theta = max_abs(theta.iter().copied());
        let step = match Cholesky::new(&eval.hessian + &ridge) {
            Some(ch) => ch.solve(&eval.score),
            None => {
                if max_theta > opts.separation_bound / 2.0 || max_score < opts.score_tol {
                    return Err(PropensityError::Separation {
                        max_abs_theta: max_theta,
                        max_abs_score: max_score,
                    });
                }
                return Err(PropensityError::NonConvergence {
                    iterations: n_iter,
                    max_abs_score: max_score,
                });
            }
        };
        let decrement = eval.score.dot(&step);
        let max_step = max_abs(step.iter().copied());
        // A small score alone is not enough: under separation the score
        // vanishes geometrically while the Newton step stays O(1).
        if (max_score < opts.score_tol || decrement < opts.step_tol)
            && max_step <= 1e-6 * (1.0 + max_theta)
        {
            // Final full Newton step.
            let polished: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
            let polished_eval = evaluate(design, response, obs_weights, &polished);
            // The log-likelihood is flat to rounding here; the score is not.
            if max_abs(polished_eval.score.iter().copied()) <= max_score {
                theta = polished;
                eval = polished_eval;
            }
            converged = true;
            break;
        }
        n_iter += 1;

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(a, s)| a + t * s)
                .collect();
            let cand_eval = evaluate(design, response, obs_weights, &cand);
            if cand_eval.loglik >= eval.loglik {
                accepted = Some((cand, cand_eval));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, cand_eval)) => {
                theta = cand;
                eval = cand_eval;
            }
            None => {
                // No ascent possible in double precision: we sit at the optimum.
                if max_score < opts.score_tol.sqrt() {
                    converged = true;
                    break;
                }
                return Err(PropensityError::NonConvergence {
                    iterations: n_iter,
                    max_abs_score: max_score,
                });
            }
        }
        let max_theta = max_abs(theta.iter().copied());
        if max_theta > opts.separation_bound {
            return Err(PropensityError::Separation {
                max_abs_theta: max_theta,
                max_abs_score: max_abs(eval.score.iter().copied()),
            });
        }
    }
    if !converged {
        return Err(PropensityError::NonConvergence {
            iterations: n_iter,
            max_abs_score: max_abs(eval.score.iter().copied()),
        });
    }
    let total_weight = obs_weights.map_or(design.n_rows() as f64, |w| w.iter().sum());
    Ok(PropensityModel {
        theta,
        converged,
        n_iter,
        fisher_info: eval.hessian,
        design_spec: design.names().to_vec(),
        log_likelihood: eval.loglik,
        total_weight,
    })
}

impl PropensityModel {
    /// Model with fixed coefficients, e.g. a known propensity score.
    pub fn from_coefficients(theta: Vec<f64>, design_spec: Vec<String>) -> Self {
        let p = theta.len();
        Self {
            theta,
            converged: true,
            n_iter: 0,
            fisher_info: DMatrix::zeros(p, p),
            design_spec,
            log_likelihood: f64::NAN,
            total_weight: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `P(A = 1 | x)`.
    #[inline]
    pub fn prob_treated(&self, x: &[f64]) -> f64 {
        logistic(dot(&self.theta, x))
    }

    /// Per-subject average of the Fisher information.
    pub fn mean_fisher_info(&self) -> DMatrix<f64> {
        &self.fisher_info / self.total_weight
    }
}

/// `P(A = target | x)` under the fitted model.
pub fn predict(model: &PropensityModel, x: &[f64], target: bool) -> Result<f64, PropensityError> {
    if x.len() != model.dim() {
        return Err(PropensityError::DimensionMismatch(format!(
            "model has {} coefficients, x has {} entries",
            model.dim(),
            x.len()
        )));
    }
    let p = model.prob_treated(x);
    Ok(if target { p } else { 1.0 - p })
}

/// Per-subject partial score `U₂ = x (A − p̂)`, one row per design row.
pub fn score_contributions(
    model: &PropensityModel,
    design: &Design,
    response: &[bool],
) -> Result<Design, PropensityError> {
    if design.n_cols() != model.dim() || design.n_rows() != response.len() {
        return Err(PropensityError::DimensionMismatch(format!(
            "design {}x{}, model {}, responses {}",
            design.n_rows(),
            design.n_cols(),
            model.dim(),
            response.len()
        )));
    }
    let mut out = Design::with_capacity(design.names().to_vec(), design.n_rows());
    let mut buf = vec![0.0; design.n_cols()];
    for (x, &a) in design.rows().zip(response) {
        let r = if a { 1.0 } else { 0.0 } - model.prob_treated(x);
        for (b, xi) in buf.iter_mut().zip(x) {
            *b = xi * r;
        }
        out.push_row(&buf);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    /// 2×2 table: (A=1,L=1)=70, (A=0,L=1)=30, (A=1,L=0)=30, (A=0,L=0)=70.
    pub(crate) fn two_by_two() -> (Design, Vec<bool>) {
        let mut d = Design::new(names(2));
        let mut y = Vec::new();
        for (l, a, count) in [
            (1.0, true, 70),
            (1.0, false, 30),
            (0.0, true, 30),
            (0.0, false, 70),
        ] {
            for _ in 0..count {
                d.push_row(&[1.0, l]);
                y.push(a);
            }
        }
        (d, y)
    }

    #[test]
    fn intercept_only_balanced_response() {
        let d = Design::from_rows(names(1), &[[1.0]; 10]);
        let y: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let m = fit_logistic(&d, &y, None, &FitOptions::default()).unwrap();
        assert!(m.theta[0].abs() < 1e-12);
        assert_eq!(predict(&m, &[1.0], true).unwrap(), 0.5);
    }

    #[test]
    fn two_by_two_matches_closed_form_log_odds() {
        let (d, y) = two_by_two();
        let m = fit_logistic(&d, &y, None, &FitOptions::default()).unwrap();
        let slope = (70.0f64 * 70.0 / (30.0 * 30.0)).ln();
        let intercept = (30.0f64 / 70.0).ln();
        assert!((m.theta[1] - slope).abs() < 1e-9, "{:?}", m.theta);
        assert!((m.theta[0] - intercept).abs() < 1e-9);
        assert!((predict(&m, &[1.0, 1.0], true).unwrap() - 0.7).abs() < 1e-9);
        assert!((predict(&m, &[1.0, 0.0], false).unwrap() - 0.7).abs() < 1e-9);
        let u = score_contributions(&m, &d, &y).unwrap();
        for j in 0..2 {
            let s: f64 = u.rows().map(|r| r[j]).sum();
            assert!(s.abs() < 1e-7, "score sum {s}");
        }
    }

    #[test]
    fn single_subject_score() {
        let m = PropensityModel::from_coefficients(vec![0.0], names(1));
        let d = Design::from_rows(names(1), &[[1.0]]);
        let u = score_contributions(&m, &d, &[true]).unwrap();
        assert_eq!(u.row(0), &[0.5]);
    }

    #[test]
    fn perfect_separation_is_detected() {
        let rows: Vec<[f64; 2]> = (0..40).map(|i| [1.0, i as f64 - 19.5]).collect();
        let y: Vec<bool> = rows.iter().map(|r| r[1] > 0.0).collect();
        let d = Design::from_rows(names(2), &rows);
        let err = fit_logistic(&d, &y, None, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, PropensityError::Separation { .. }), "{err}");
    }

    #[test]
    fn constant_response_is_separation() {
        let d = Design::from_rows(names(1), &[[1.0]; 20]);
        let err = fit_logistic(&d, &[true; 20], None, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, PropensityError::Separation { .. }), "{err}");
    }

    #[test]
    fn collinear_design_is_rank_deficient() {
        let rows: Vec<[f64; 3]> = (0..30).map(|i| [1.0, i as f64, 2.0 * i as f64]).collect();
        let y: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let d = Design::from_rows(names(3), &rows);
        let err = fit_logistic(&d, &y, None, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, PropensityError::RankDeficient { .. }));
    }

    #[test]
    fn unit_weights_equal_unweighted_fit_exactly() {
        let (d, y) = two_by_two();
        let a = fit_logistic(&d, &y, None, &FitOptions::default()).unwrap();
        let b = fit_logistic(&d, &y, Some(&vec![1.0; y.len()]), &FitOptions::default()).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.fisher_info, b.fisher_info);
    }

    #[test]
    fn predict_checks_dimension() {
        let m = PropensityModel::from_coefficients(vec![0.0, 1.0], names(2));
        assert!(matches!(
            predict(&m, &[1.0], true),
            Err(PropensityError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn fisher_info_is_symmetric_psd() {
        let (d, y) = two_by_two();
        let m = fit_logistic(&d, &y, None, &FitOptions::default()).unwrap();
        assert_eq!(m.fisher_info, m.fisher_info.transpose());
        let eig = SymmetricEigen::new(m.fisher_info.clone()).eigenvalues;
        assert!(eig.iter().all(|&e| e >= -1e-10));
    }
}
