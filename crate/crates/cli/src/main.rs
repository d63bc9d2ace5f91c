//! `mffbsde`: batch driver for the mean-field FBSDE solvers.
//!
//! Every run reads one JSON config, writes its outputs to `--out` and
//! records them with hashes in `manifest.json`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{BackendKind, Overrides};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error(transparent)]
    Core(#[from] mffbsde::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use mffbsde::Error as E;
        match self {
            CliError::Validation(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::NoConvergence(_)
                | E::StepContraction { .. }
                | E::PicardStall { .. }
                | E::Conditioning { .. }
                | E::NonFinite { .. }
                | E::RankDeficient { .. }
                | E::Consistency { .. } => 3,
                _ => 2,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LqAction {
    Solve,
    Oracle,
    Compare,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the forward equation with `(y, z)` frozen at zero.
    SolveSde,
    /// Solve the backward equation with `x` frozen at zero.
    SolveBsde,
    /// Solve the coupled system by continuation.
    SolveFbsde,
    /// Check the domination and monotonicity conditions by sampling.
    VerifyConditions,
    /// Forward linear-quadratic control problem.
    LqForward {
        #[arg(value_enum)]
        action: LqAction,
    },
    /// Backward linear-quadratic control problem.
    LqBackward {
        #[arg(value_enum)]
        action: LqAction,
    },
    /// Conditions, solution, residual and symmetric-transform check in one report.
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "mffbsde", version, about = "Mean-field FBSDE solvers by the method of continuation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (schema "mffbsde-run-v1").
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scenario backend; overrides the config.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Exit with code 4 when a condition check fails.
    #[arg(long, global = true)]
    strict: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SolveSde => "solve-sde",
            Command::SolveBsde => "solve-bsde",
            Command::SolveFbsde => "solve-fbsde",
            Command::VerifyConditions => "verify-conditions",
            Command::LqForward { .. } => "lq-forward",
            Command::LqBackward { .. } => "lq-backward",
            Command::Report => "report",
        }
    }
}

fn execute(cli: &Cli) -> Result<u8, CliError> {
    let Some(path) = &cli.config else {
        return Err(CliError::Validation(vec!["--config: required".into()]));
    };
    let run = config::load(
        path,
        Overrides {
            seed: cli.seed,
            backend: cli.backend,
        },
    )?;
    let outcome = match &cli.command {
        Command::SolveSde => commands::solve_sde(&run)?,
        Command::SolveBsde => commands::solve_bsde(&run)?,
        Command::SolveFbsde => commands::solve_fbsde(&run, cli.strict)?,
        Command::VerifyConditions => commands::verify_conditions(&run)?,
        Command::LqForward { action } => commands::lq_forward(&run, *action, cli.strict)?,
        Command::LqBackward { action } => commands::lq_backward(&run, *action, cli.strict)?,
        Command::Report => commands::report(&run)?,
    };
    let failed = outcome.condition_failure.clone();
    commands::write_outputs(&cli.out, cli.command.name(), &run, cli.strict, outcome)?;
    match failed {
        Some(msg) if cli.strict => {
            eprintln!("condition check failed: {msg}");
            Ok(4)
        }
        Some(msg) => {
            eprintln!("warning: condition check failed: {msg}");
            Ok(0)
        }
        None => Ok(0),
    }
}

#[cfg(feature = "parallel")]
fn with_threads(threads: Option<usize>, f: impl FnOnce() -> Result<u8, CliError> + Send) -> Result<u8, CliError> {
    match threads {
        None => f(),
        Some(0) => Err(CliError::Validation(vec!["--threads: must be at least 1".into()])),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| CliError::Validation(vec![format!("--threads: {e}")]))?;
            pool.install(f)
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads(threads: Option<usize>, f: impl FnOnce() -> Result<u8, CliError>) -> Result<u8, CliError> {
    if threads == Some(0) {
        return Err(CliError::Validation(vec!["--threads: must be at least 1".into()]));
    }
    f()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match with_threads(cli.threads, || execute(&cli)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
