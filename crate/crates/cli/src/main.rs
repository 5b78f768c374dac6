mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ModeName;

/// Malformed invocation or configuration (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "attnlq", version, about = "LQ control with limited attention: solve, simulate and backtest")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base seed; overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads. Never changes results.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Problem mode; overrides `mode` from the config.
    #[arg(long, value_enum)]
    pub mode: Option<ModeName>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate return-model parameters from the `[data]` files.
    Estimate(Common),
    /// Solve the policy tables.
    Solve(Common),
    /// Simulate episodes under solved tables.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Directory holding the tables; defaults to `<out>/tables`.
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Mean-variance efficient frontier from solved tables.
    Frontier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Rolling-window out-of-sample backtest.
    Backtest(Common),
    /// Print `h_t` and `λ*_t` at a state, and export the configured cases.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tables: Option<PathBuf>,
        /// Remaining budget; defaults to the initial budget.
        #[arg(long)]
        budget: Option<f64>,
        /// Comma-separated factor values; defaults to zero.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        f: Option<Vec<f64>>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() || err.downcast_ref::<toml::de::Error>().is_some() {
        return 1;
    }
    match err.downcast_ref::<attnlq::Error>() {
        Some(e) if e.is_data_error() => 2,
        Some(attnlq::Error::Numerical(_)) => 3,
        Some(attnlq::Error::Domain(_) | attnlq::Error::Dimension(_)) => 1,
        Some(_) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Estimate(c) => commands::estimate(&c),
        Command::Solve(c) => commands::solve(&c),
        Command::Simulate { common, tables } => commands::simulate(&common, tables),
        Command::Frontier { common, tables } => commands::frontier(&common, tables),
        Command::Backtest(c) => commands::backtest(&c),
        Command::Inspect {
            common,
            tables,
            budget,
            f,
        } => commands::inspect(&common, tables, budget, f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
