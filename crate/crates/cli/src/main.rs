//! Batch front-end for the lattice conductance experiments: configuration
//! parsing, experiment orchestration, caching, and machine-readable output.
//!
//! Exit codes: 0 success, 1 selftest failure, 2 configuration error,
//! 3 solver or runtime failure, 4 cross-check failure.

mod commands;
mod config;
mod selftest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EXIT_CONFIG, EXIT_OK};
use config::{init_thread_pool, resolve, CommonArgs, ProbabilityUse};

#[derive(Parser)]
#[command(
    name = "perturbhom",
    version,
    about = "Monte Carlo and exact experiments for perturbed lattice conductance models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the effective energy at one or more replacement
    /// probabilities.
    Ahom(CommonArgs),
    /// Estimate the derivative of the effective energy in the replacement
    /// probability at p_bar.
    A1 {
        #[command(flatten)]
        common: CommonArgs,
        /// Also verify, on every sample, that the local and whole-box forms
        /// of the derivative agree; on boxes with n <= 4 the origin series
        /// is checked as well.
        #[arg(long)]
        cross_check: bool,
    },
    /// Fit the first-order expansion of the effective energy on a grid of
    /// probability offsets.
    Sweep(CommonArgs),
    /// Run the built-in invariant suite with fixed seeds.
    Selftest {
        /// Relative solver tolerance used by the checks.
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
}

fn run(cli: Cli) -> u8 {
    let resolved = match &cli.command {
        Command::Ahom(args) => Some((args, ProbabilityUse::PointList)),
        Command::A1 { common, .. } => Some((common, ProbabilityUse::ExpansionPoint)),
        Command::Sweep(args) => Some((args, ProbabilityUse::OffsetGrid)),
        Command::Selftest { .. } => None,
    };
    let cfg = match resolved {
        Some((args, usage)) => match resolve(args, usage) {
            Ok(cfg) => Some(cfg),
            Err(e) => {
                eprintln!("{e}");
                return EXIT_CONFIG;
            }
        },
        None => None,
    };
    if let Err(e) = init_thread_pool(cfg.as_ref().and_then(|c| c.threads)) {
        eprintln!("{e}");
        return EXIT_CONFIG;
    }
    match (&cli.command, cfg) {
        (Command::Ahom(_), Some(cfg)) => commands::run_ahom(&cfg),
        (Command::A1 { cross_check, .. }, Some(cfg)) => commands::run_a1(&cfg, *cross_check),
        (Command::Sweep(_), Some(cfg)) => commands::run_sweep(&cfg),
        (Command::Selftest { tolerance }, _) => selftest::run_selftest(*tolerance),
        _ => EXIT_OK,
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()))
}
