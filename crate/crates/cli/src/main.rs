use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifacts;
mod commands;
mod config;
mod error;

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "saros", version, about = "Sequential block-wise ranking trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Parse, binarize and split a raw log into the canonical dataset.
    Ingest,
    /// Train the configured algorithm on the training split.
    Train,
    /// Score the test split with the trained model.
    Eval,
    /// Dataset statistics and block distributions.
    Stats,
    /// Unbiasedness, variance-decay and convergence-rate checks.
    Diagnose,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    match cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Stats => commands::stats(&cfg),
        Command::Diagnose => commands::diagnose(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::DiagnosticsFailed(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
