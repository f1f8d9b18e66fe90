//! Tolerances of the acceptance criteria.

use std::time::Duration;

/// Analytic truths against their reference values.
pub const TRUTH_ABS: f64 = 5e-4;
pub const TRUTH_RUNTIME: Duration = Duration::from_secs(1);

/// Monte Carlo reproduction of the bias/rMSE tables.
pub const MC_REPS: usize = 2000;
pub const MC_N: usize = 5000;
pub const MC_GRID: [usize; 3] = [500, 1500, 5000];
pub const MC_SEED: u64 = 1;
pub const IPTW_BIAS_ABS: f64 = 0.01;
pub const RMSE_REL: f64 = 0.15;
pub const UNWEIGHTED_BIAS_ABS: f64 = 0.02;
pub const MC_RUNTIME: Duration = Duration::from_secs(5 * 60);

/// Plug-in variance ordering `V̂ ≤ Ṽ̂`, up to rounding.
pub const ORDERING_SLACK: f64 = 1e-10;

/// Bootstrap coverage.
pub const COVERAGE_N: usize = 1500;
pub const COVERAGE_SIMS: usize = 1000;
pub const COVERAGE_REPLICATES: usize = 2000;
pub const COVERAGE_SEED: u64 = 1;
pub const COVERAGE_LO: f64 = 0.93;
pub const COVERAGE_HI: f64 = 0.97;
pub const COVERAGE_RUNTIME: Duration = Duration::from_secs(2 * 60 * 60);

/// Identification oracle.
pub const ORACLE_INSTANCES: usize = 400;
pub const ORACLE_MIN_INSTANCES: usize = 200;
pub const ORACLE_ABS: f64 = 1e-12;
pub const ORACLE_TAUS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

/// Invariant suites.
pub const MEAN_ONE_N: usize = 100_000;
pub const MEAN_ONE_ABS: f64 = 0.03;
pub const LOGISTIC_2X2_ABS: f64 = 1e-6;
pub const FISHER_FD_REL: f64 = 1e-5;
pub const FISHER_FD_STEP: f64 = 1e-5;

/// Plug-in sd against Monte Carlo sd.
pub const PREDICTED_SD_REL: f64 = 0.20;
