//! `mosdistill` command-line front end.

mod commands;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "mosdistill", version, about = "Distill, prune and evaluate speech quality students")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override the experiment directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Validate and print the plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,

    /// Overwrite outputs of a previous run.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Verb {
    /// Generate the synthetic corpus.
    Synth,
    /// Train the labeled-only baseline.
    Train,
    /// Distill a student from the teacher.
    Distill,
    /// Run the pruning schedules.
    Prune,
    /// Write per-model evaluation reports.
    Eval,
    /// Merge all checkpoints into the size sweep table.
    Sweep,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
