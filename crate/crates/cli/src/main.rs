//! `toprokit` command-line front end.
//!
//! Exit codes: 0 on success, 1 when a computation fails, 2 for usage, config
//! or input errors. Errors are printed to stderr as one JSON object.

mod bench;
mod bounds;
mod calibrate;
mod config;
mod entropy;
mod error;
mod generate;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::FileConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "toprokit", version, about = "Entropy-guided attention and token pruning experiments")]
struct Cli {
    /// Worker threads for parallel stages [default: all cores]
    #[arg(long, global = true, env = "TOPROKIT_THREADS")]
    threads: Option<usize>,
    /// JSON config file with optional sections toy, policy, block, entropy,
    /// calibration, bench and bounds. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Attention output and per-query entropy from Q, K, V tensors.
    Entropy(entropy::Args),
    /// Low-entropy ratio curves across runs and a recommended tau.
    Calibrate(calibrate::Args),
    /// Baseline and pruned toy-model generation with a comparison report.
    Generate(generate::Args),
    /// Timing table for the naive, flash and fae engines.
    Bench(bench::Args),
    /// Monte-Carlo validation of the error bounds.
    Bounds(bounds::Args),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(CliError::compute)?;
    }
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Entropy(a) => entropy::run(a, &file),
        Command::Calibrate(a) => calibrate::run(a, &file),
        Command::Generate(a) => generate::run(a, &file),
        Command::Bench(a) => bench::run(a, &file),
        Command::Bounds(a) => bounds::run(a, &file),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::Usage(e.render().to_string().trim_end().to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
