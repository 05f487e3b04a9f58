//! `gnndt`: dataset generation, training, evaluation and experiment grids.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gnndt_core::CoreError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => Self::Config(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "gnndt", version, about = "GNN decision transformer for EV charging")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Overrides the seed of the config (for seed lists: the first seed,
    /// keeping the list length).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for grid cells and rollouts (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Record a trajectory dataset with one behaviour policy.
    GenData { config: PathBuf },
    /// Train one model and keep the best checkpoint.
    Train { config: PathBuf },
    /// Evaluate a checkpoint and/or baseline policies on held-out scenarios.
    Eval { config: PathBuf },
    /// Ablation grid: flat DT up to the full model.
    Ablate { config: PathBuf },
    /// Context length sweep.
    SweepK { config: PathBuf },
    /// Dataset mixing sweep (expert fraction at fixed size).
    SweepMix { config: PathBuf },
    /// Evaluate a checkpoint under distribution shifts.
    Generalize { config: PathBuf },
    /// Evaluate a checkpoint on sites of other sizes.
    Scale { config: PathBuf },
    /// Merge cell tables into one summary.
    Report { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let ctx = commands::Context {
        seed: cli.seed,
        out: cli.out,
    };
    let result = match &cli.verb {
        Verb::GenData { config } => commands::gen_data(&ctx, config),
        Verb::Train { config } => commands::train(&ctx, config),
        Verb::Eval { config } => commands::eval(&ctx, config),
        Verb::Ablate { config } => commands::ablate(&ctx, config),
        Verb::SweepK { config } => commands::sweep_k(&ctx, config),
        Verb::SweepMix { config } => commands::sweep_mix(&ctx, config),
        Verb::Generalize { config } => commands::generalize(&ctx, config),
        Verb::Scale { config } => commands::scale(&ctx, config),
        Verb::Report { config } => commands::report(&ctx, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
