//! Reference values, pinned tolerances and reporting for the acceptance
//! suite in `tests/acceptance.rs`.

pub mod reference;
pub mod tolerances;

use std::fmt;
use std::time::Duration;

/// Outcome of one comparison inside a criterion.
#[derive(Debug, Clone)]
pub struct Check {
    pub label: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(label: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// `|observed − target| ≤ tol`.
    pub fn abs(label: impl Into<String>, observed: f64, target: f64, tol: f64) -> Self {
        let err = (observed - target).abs();
        Self::new(
            label,
            err <= tol,
            format!("observed {observed:.6}, target {target}, |diff| {err:.2e} (tol {tol:e})"),
        )
    }

    /// `|observed / target − 1| ≤ tol`.
    pub fn rel(label: impl Into<String>, observed: f64, target: f64, tol: f64) -> Self {
        let err = (observed / target - 1.0).abs();
        Self::new(
            label,
            err <= tol,
            format!(
                "observed {observed:.4}, target {target:.4}, relative diff {:.1}% (tol {:.0}%)",
                100.0 * err,
                100.0 * tol
            ),
        )
    }

    /// `observed ≤ bound`.
    pub fn at_most(label: impl Into<String>, observed: f64, bound: f64) -> Self {
        Self::new(
            label,
            observed <= bound,
            format!("observed {observed:.3e}, bound {bound:e}"),
        )
    }

    /// `lo ≤ observed ≤ hi`.
    pub fn within(label: impl Into<String>, observed: f64, lo: f64, hi: f64) -> Self {
        Self::new(
            label,
            (lo..=hi).contains(&observed),
            format!("observed {observed:.4}, interval [{lo}, {hi}]"),
        )
    }

    pub fn runtime(label: impl Into<String>, elapsed: Duration, budget: Duration) -> Self {
        Self::new(
            label,
            elapsed <= budget,
            format!(
                "{:.1} s (budget {:.0} s)",
                elapsed.as_secs_f64(),
                budget.as_secs_f64()
            ),
        )
    }
}

/// One acceptance criterion and its checks.
#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
    /// Set when the criterion could not be evaluated at all.
    pub error: Option<String>,
}

impl CriterionResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        writeln!(
            f,
            "{} C{} {} ({}/{} checks, {:.1} s)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.checks.len() - failed,
            self.checks.len(),
            self.elapsed.as_secs_f64()
        )?;
        if let Some(e) = &self.error {
            writeln!(f, "    error: {e}")?;
        }
        for c in &self.checks {
            writeln!(
                f,
                "    [{}] {}: {}",
                if c.passed { "ok" } else { "FAIL" },
                c.label,
                c.detail
            )?;
        }
        Ok(())
    }
}
