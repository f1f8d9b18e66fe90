//! `survquant`: estimate survival-incorporated quantiles from cohort CSV
//! files, reproduce the simulation tables, and run the identification oracle.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use survquant::pipeline::WeightingMode;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "survquant",
    version,
    about = "Survival-incorporated quantile estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate a quantile from a cohort CSV file.
    Estimate(EstimateArgs),
    /// Run a simulation preset and write its table.
    Simulate(SimulateArgs),
    /// Print analytic truths of the simulation designs.
    Truth(TruthArgs),
    /// Check the weighted estimating equation against exact enumeration.
    OracleCheck(OracleArgs),
}

#[derive(Debug, Args, Default)]
struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Estimated,
    Censoring,
    Unweighted,
    Uniform,
}

impl From<ModeArg> for WeightingMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Estimated => WeightingMode::Estimated,
            ModeArg::Censoring => WeightingMode::EstimatedWithCensoring,
            ModeArg::Unweighted => WeightingMode::Unweighted,
            ModeArg::Uniform => WeightingMode::Uniform,
        }
    }
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Cohort CSV: subject_id,visit,D,A,L_1..L_p,Y[,C].
    data: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// Regimen such as `1` or `1,1`.
    #[arg(long)]
    regimen: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    sentinel: Option<f64>,
    #[arg(long)]
    eps_floor: Option<f64>,
    /// Bootstrap replicates (0 disables).
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    /// Fail when a contributing probability falls below the floor.
    #[arg(long)]
    strict_positivity: bool,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Same as `--mode unweighted`.
    #[arg(long, conflicts_with = "mode")]
    unweighted: bool,
    /// Rank smaller outcomes as better.
    #[arg(long)]
    lower_is_better: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    #[value(name = "table1")]
    Table1,
    #[value(name = "table2")]
    Table2,
    #[value(name = "tableB1")]
    TableB1,
    #[value(name = "truths")]
    Truths,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(value_enum)]
    preset: Preset,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    /// Simulated datasets per coverage cell.
    #[arg(long)]
    sims: Option<usize>,
    /// Bootstrap replicates for coverage.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct TruthArgs {
    #[arg(long)]
    tau: Option<f64>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long)]
    instances: Option<usize>,
    #[command(flatten)]
    common: CommonArgs,
}

/// Failure reported as JSON on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: message.into(),
            code: 2,
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            kind: "numeric",
            message: message.into(),
            code: 4,
        }
    }

    pub fn io(e: std::io::Error) -> Self {
        Self {
            kind: "io",
            message: e.to_string(),
            code: 2,
        }
    }
}

impl From<survquant::Error> for CliError {
    fn from(e: survquant::Error) -> Self {
        use survquant::weights::WeightsError;
        use survquant::Error as E;
        let (kind, code) = match &e {
            E::Cohort(_) => ("validation", 2),
            E::Csv(_) => ("parse", 2),
            E::Config(_) => ("config", 2),
            E::Weights(WeightsError::PositivityViolation { .. }) => ("positivity", 3),
            E::Weights(WeightsError::RegimenLength { .. }) => ("config", 2),
            E::Quantile(survquant::quantile::QuantileError::TauOutOfRange(_)) => ("config", 2),
            _ => ("numeric", 4),
        };
        Self {
            kind,
            message: e.to_string(),
            code,
        }
    }
}

fn common_config(c: &CommonArgs) -> Result<(RunConfig, RunConfig), CliError> {
    let file = match &c.config {
        Some(p) => RunConfig::load(p).map_err(CliError::usage)?,
        None => RunConfig::default(),
    };
    let flags = RunConfig {
        seed: c.seed,
        out: c.out.clone(),
        threads: c.threads,
        ..Default::default()
    };
    Ok((file, flags))
}

fn set_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Estimate(a) => {
            let (file, mut flags) = common_config(&a.common)?;
            flags.data = a.data;
            flags.tau = a.tau;
            flags.regimen = a.regimen;
            flags.sentinel = a.sentinel;
            flags.eps_floor = a.eps_floor;
            flags.bootstrap = a.bootstrap;
            flags.level = a.level;
            flags.strict_positivity = a.strict_positivity.then_some(true);
            flags.mode = if a.unweighted {
                Some(WeightingMode::Unweighted)
            } else {
                a.mode.map(Into::into)
            };
            flags.lower_is_better = a.lower_is_better.then_some(true);
            let cfg = file.overlay(flags);
            set_threads(cfg.threads)?;
            commands::estimate_cmd(&cfg)
        }
        Command::Simulate(a) => {
            let (file, mut flags) = common_config(&a.common)?;
            flags.n = a.n;
            flags.reps = a.reps;
            flags.sims = a.sims;
            flags.bootstrap = a.bootstrap;
            flags.tau = a.tau;
            let cfg = file.overlay(flags);
            set_threads(cfg.threads)?;
            commands::simulate(a.preset, &cfg)
        }
        Command::Truth(a) => {
            let (file, mut flags) = common_config(&a.common)?;
            flags.tau = a.tau;
            let cfg = file.overlay(flags);
            commands::truth(&cfg, a.json)
        }
        Command::OracleCheck(a) => {
            let (file, mut flags) = common_config(&a.common)?;
            flags.instances = a.instances;
            let cfg = file.overlay(flags);
            set_threads(cfg.threads)?;
            commands::oracle_check(&cfg)
        }
    }
}

fn report_error(e: &CliError) -> ExitCode {
    let body = json!({
        "error": {
            "kind": e.kind,
            "message": e.message,
            "exit_code": e.code,
        }
    });
    eprintln!("{body}");
    ExitCode::from(e.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return report_error(&CliError::usage(e.to_string().trim_end()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
