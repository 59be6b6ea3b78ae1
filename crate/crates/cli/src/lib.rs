//! Batch front end: one subcommand per experiment, reports written to a directory.
//!
//! Every run writes `<scenario>_<subcommand>_<hash>` artifacts plus a
//! `.manifest.json` listing them with SHA-256 checksums. The hash covers the
//! scenario bytes, the subcommand and the effective settings, so identical
//! inputs map to identical file names and identical bytes.

pub mod commands;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mflq::riccati::DiffusionWeight;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mflq::Error),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl CliError {
    /// 1 for invalid input, 2 for numerical failure, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => e.exit_code(),
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mflq", version, about = "Regime-switching mean-field LQ experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Definiteness margins, open-loop and stationary stabilizer certificates.
    Check(RunArgs),
    /// Finite-horizon Riccati solution on [0, --horizon].
    Riccati(RunArgs),
    /// Stationary Riccati solution with its Lyapunov certificate.
    Are(RunArgs),
    /// Offset η and feedforward controls v on [0, --horizon].
    Feedforward(RunArgs),
    /// Monte Carlo of the finite-horizon optimal loop.
    Simulate(RunArgs),
    /// Finite- versus infinite-horizon gaps for each of --horizons.
    Turnpike(RunArgs),
    /// Time-averaged cost of the stationary loop for each of --horizons.
    Ergodic(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Check(_) => "check",
            Command::Riccati(_) => "riccati",
            Command::Are(_) => "are",
            Command::Feedforward(_) => "feedforward",
            Command::Simulate(_) => "simulate",
            Command::Turnpike(_) => "turnpike",
            Command::Ergodic(_) => "ergodic",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Check(a)
            | Command::Riccati(a)
            | Command::Are(a)
            | Command::Feedforward(a)
            | Command::Simulate(a)
            | Command::Turnpike(a)
            | Command::Ergodic(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightArg {
    P1,
    Pk,
}

impl From<WeightArg> for DiffusionWeight {
    fn from(w: WeightArg) -> Self {
        match w {
            WeightArg::P1 => DiffusionWeight::P1,
            WeightArg::Pk => DiffusionWeight::Pk,
        }
    }
}

/// Flags shared by every subcommand; each overrides the scenario default.
/// Flags a subcommand does not use are ignored.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Scenario file (JSON, `//` comment lines allowed).
    pub scenario: PathBuf,
    /// Finite horizon T.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Comma-separated horizons for turnpike and ergodic.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<f64>>,
    /// Time step of every grid.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Number of Monte Carlo paths.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Master seed of the path streams.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "mflq-out")]
    pub out: PathBuf,
    /// Stationarity tolerance of the algebraic Riccati solve.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Weight on the diffusion term of the Riccati equations.
    #[arg(long, value_enum)]
    pub diffusion_weight: Option<WeightArg>,
}

/// Parses `argv`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(&cli.command) {
        Ok(outcome) => {
            for path in &outcome.files {
                println!("{}", path.display());
            }
            match outcome.verdict {
                Some(e) => {
                    eprintln!("mflq {}: {e}", cli.command.name());
                    e.exit_code()
                }
                None => 0,
            }
        }
        Err(e) => {
            eprintln!("mflq {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
