//! Command-line entry point.
//!
//! Subcommands: `simulate`, `test`, `hb-fit`, `backtest`, `report`.
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use commands::{
    cmd_backtest, cmd_hb_fit, cmd_report, cmd_simulate, cmd_test, load_config, resolve_out,
    resolve_seed, CliError,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bayes-portfolio",
    about = "Bayesian multiple-testing portfolio selection: simulation experiments, \
             per-asset pricing tests, hierarchical-Bayes fits, and rolling backtests",
    version
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one of the four simulation experiments.
    Simulate {
        /// Experiment id (1: S vs S̃, 2: vs diffuse-prior F-test,
        /// 3: portfolio returns, 4: factor-count comparison).
        #[arg(long)]
        experiment: Option<u8>,
    },
    /// Per-asset pricing test over a date window of a price panel.
    Test {
        /// Long-format price CSV (date,ticker,adj_close).
        prices: PathBuf,
    },
    /// Hierarchical-Bayes chain fit with trace and ranking output.
    HbFit {
        /// Long-format price CSV (date,ticker,adj_close).
        prices: PathBuf,
    },
    /// Rolling monthly backtest across the configured strategies.
    Backtest {
        /// Long-format price CSV (date,ticker,adj_close).
        prices: PathBuf,
        /// Restrict to one strategy: oracle|hb|ftest|market.
        #[arg(long)]
        selector: Option<String>,
    },
    /// Rebuild yearly report tables from an existing daily return series.
    Report {
        /// daily_returns.csv produced by a backtest run.
        #[arg(long)]
        daily: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (config, raw) = load_config(cli.config.as_deref())?;
    let seed = resolve_seed(cli.seed, &config);
    let out = resolve_out(cli.out);
    match cli.command {
        Command::Simulate { experiment } => {
            cmd_simulate(&config, raw, experiment, seed, &out)
        }
        Command::Test { prices } => cmd_test(&config, raw, &prices, seed, &out),
        Command::HbFit { prices } => cmd_hb_fit(&config, raw, &prices, seed, &out),
        Command::Backtest { prices, selector } => {
            cmd_backtest(&config, raw, &prices, selector.as_deref(), seed, &out)
        }
        Command::Report { daily } => cmd_report(&config, raw, &daily, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
