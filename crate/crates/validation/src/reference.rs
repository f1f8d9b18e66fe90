//! Reference values of the simulation designs.

/// Survival-incorporated median and survivor median for one regimen.
#[derive(Debug, Clone, Copy)]
pub struct TruthRef {
    pub label: &'static str,
    pub time_varying: bool,
    pub arm: bool,
    pub median: f64,
    pub survivor_median: f64,
}

pub const TRUTHS: [TruthRef; 4] = [
    TruthRef {
        label: "point a=0",
        time_varying: false,
        arm: false,
        median: 1.449,
        survivor_median: 2.00,
    },
    TruthRef {
        label: "point a=1",
        time_varying: false,
        arm: true,
        median: 0.915,
        survivor_median: 1.145,
    },
    TruthRef {
        label: "time-varying (0,0)",
        time_varying: true,
        arm: false,
        median: 1.726,
        survivor_median: 2.458,
    },
    TruthRef {
        label: "time-varying (1,1)",
        time_varying: true,
        arm: true,
        median: 0.751,
        survivor_median: 1.228,
    },
];

/// Monte Carlo cell at `N = 5000`.
#[derive(Debug, Clone, Copy)]
pub struct CellRef {
    pub arm: bool,
    pub rmse_true_ps: f64,
    pub rmse_est_ps: f64,
    pub unweighted_bias: f64,
}

/// Point-treatment table.
pub const TABLE1: [CellRef; 2] = [
    CellRef {
        arm: false,
        rmse_true_ps: 0.101,
        rmse_est_ps: 0.088,
        unweighted_bias: -0.970,
    },
    CellRef {
        arm: true,
        rmse_true_ps: 0.075,
        rmse_est_ps: 0.058,
        unweighted_bias: 0.669,
    },
];

/// Time-varying table.
pub const TABLE2: [CellRef; 2] = [
    CellRef {
        arm: false,
        rmse_true_ps: 0.114,
        rmse_est_ps: 0.103,
        unweighted_bias: -0.753,
    },
    CellRef {
        arm: true,
        rmse_true_ps: 0.077,
        rmse_est_ps: 0.066,
        unweighted_bias: 1.079,
    },
];
