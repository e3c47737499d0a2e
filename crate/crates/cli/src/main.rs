//! `heatsc`: heatwave detection, donor pools, synthetic control fits and
//! seeded simulation studies from the command line.
//!
//! Every subcommand resolves its settings as flag, then `--config` file
//! value, then built-in default, and writes a manifest next to its outputs.
//! Exit codes: 0 success, 1 estimation degraded, 2 input error.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicU8, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};

use settings::{DetectArgs, DonorsArgs, EvaluateArgs, FitArgs, PipelineArgs, PoolArgs, SimulateArgs};

#[derive(Debug, Parser)]
#[command(name = "heatsc", version, about = "Synthetic control studies of heatwave health effects")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML file with settings for the subcommand; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    pub log_level: LogLevel,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect percentile heatwaves in a panel's heat series.
    Detect(DetectArgs),
    /// Build donor pools for heatwave episodes.
    Donors(DonorsArgs),
    /// Fit a synthetic control for each episode.
    Fit(FitArgs),
    /// Simulate replications of the spatial Monte Carlo design.
    Simulate(SimulateArgs),
    /// Score fitted counterfactuals against simulated truth.
    Evaluate(EvaluateArgs),
    /// Pool per-episode log relative risks.
    Pool(PoolArgs),
    /// Simulate, fit both estimators and report the scenario table.
    PipelineSim(PipelineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

static LOG_LEVEL: AtomicU8 = AtomicU8::new(1);

pub fn log(level: LogLevel, msg: impl AsRef<str>) {
    if level as u8 <= LOG_LEVEL.load(Ordering::Relaxed) {
        eprintln!("{}", msg.as_ref());
    }
}

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Estimation(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }
}

impl From<heatsc::Error> for CliError {
    fn from(e: heatsc::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Estimation(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

/// What a successful subcommand reports back.
#[derive(Debug, Default)]
pub struct Outcome {
    pub degraded: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    LOG_LEVEL.store(cli.global.log_level as u8, Ordering::Relaxed);
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log(LogLevel::Warn, format!("could not size the thread pool: {e}"));
        }
    }
    let g = &cli.global;
    let result = match &cli.command {
        Command::Detect(a) => commands::detect(g, a),
        Command::Donors(a) => commands::donors(g, a),
        Command::Fit(a) => commands::fit(g, a),
        Command::Simulate(a) => commands::simulate(g, a),
        Command::Evaluate(a) => commands::evaluate(g, a),
        Command::Pool(a) => commands::pool(g, a),
        Command::PipelineSim(a) => commands::pipeline_sim(g, a),
    };
    match result {
        Ok(o) if o.degraded => {
            log(LogLevel::Warn, "warning: some fits failed convergence diagnostics");
            ExitCode::from(1)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(CliError::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Estimation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
