//! JSON run configuration. Every field is optional; command-line flags
//! override values read from a file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use survquant::pipeline::WeightingMode;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Quantile level, default 0.5.
    pub tau: Option<f64>,
    /// Treatment regimen such as `1` or `(1,1)`, default all ones.
    pub regimen: Option<String>,
    /// Decedent value on the ranking scale, default below the data.
    pub sentinel: Option<f64>,
    /// Positivity floor, default 0.01.
    pub eps_floor: Option<f64>,
    pub strict_positivity: Option<bool>,
    /// Bootstrap replicates, default 2000 (0 disables).
    pub bootstrap: Option<usize>,
    /// Confidence level, default 0.95.
    pub level: Option<f64>,
    /// Master seed, default 1.
    pub seed: Option<u64>,
    pub mode: Option<WeightingMode>,
    pub lower_is_better: Option<bool>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Sample sizes for simulation presets.
    pub n: Option<Vec<usize>>,
    pub reps: Option<usize>,
    /// Simulated datasets per coverage cell.
    pub sims: Option<usize>,
    /// Random instances for the oracle check.
    pub instances: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Fields set in `other` replace those in `self`.
    pub fn overlay(self, other: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RunConfig { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            tau,
            regimen,
            sentinel,
            eps_floor,
            strict_positivity,
            bootstrap,
            level,
            seed,
            mode,
            lower_is_better,
            data,
            out,
            threads,
            n,
            reps,
            sims,
            instances
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig {
            tau: Some(0.25),
            regimen: Some("(1,0)".into()),
            sentinel: Some(-123.456789),
            eps_floor: Some(0.02),
            strict_positivity: Some(true),
            bootstrap: Some(300),
            level: Some(0.9),
            seed: Some(u64::MAX),
            mode: Some(WeightingMode::EstimatedWithCensoring),
            lower_is_better: Some(false),
            data: Some("a/b.csv".into()),
            out: Some("out".into()),
            threads: Some(3),
            n: Some(vec![500, 1500]),
            reps: Some(7),
            sims: Some(11),
            instances: Some(200),
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert_eq!(
            serde_json::from_str::<RunConfig>("{}").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn flags_override_file() {
        let file = RunConfig {
            tau: Some(0.3),
            seed: Some(5),
            ..Default::default()
        };
        let flags = RunConfig {
            seed: Some(9),
            ..Default::default()
        };
        let merged = file.overlay(flags);
        assert_eq!(merged.tau, Some(0.3));
        assert_eq!(merged.seed, Some(9));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"taus": 0.5}"#).is_err());
    }
}
