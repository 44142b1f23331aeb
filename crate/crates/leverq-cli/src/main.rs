//! Command-line front end for the experiment runner.
//!
//! Exit codes: 0 on success, 2 for configuration problems (unreadable or
//! invalid config, bad flags, bad `LEVERQ_THREADS`), 3 when an experiment or
//! its outputs fail.

use clap::{Parser, Subcommand};
use leverq::harness::{
    self, golden_toy, run_experiment, summarize_file, ExperimentConfig, HarnessError,
};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

/// Writes a line to stdout, treating a closed pipe (e.g. `| head`) as
/// success rather than a panic.
fn emit(line: &str) -> Result<(), HarnessError> {
    match writeln!(std::io::stdout(), "{line}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        other => Ok(other?),
    }
}

#[derive(Parser)]
#[command(
    name = "leverq",
    about = "Leverage-guided low-rank value estimation experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list (comma-separated).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory (overrides the config's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate an existing records CSV into a JSON summary on stdout.
    Summarize {
        /// Path to a records CSV produced by `run`.
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print the built-in toy MDP's reference diagnostics as JSON.
    GoldenToy,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), HarnessError> {
    let threads = harness::init_thread_pool()?;
    if let Some(n) = threads {
        eprintln!("using {n} worker threads");
    }
    match cli.command {
        Command::Run { config, seeds, out } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(seeds) = seeds {
                config.seeds = seeds;
                config.validate()?;
            }
            let output = run_experiment(&config, out.as_deref())?;
            eprintln!(
                "{}: ran {} cells ({} already recorded), {} rows total",
                config.id(),
                output.cells_run,
                output.cells_skipped,
                output.records.len()
            );
            emit(&format!("records: {}", output.csv_path.display()))?;
            emit(&format!("summary: {}", output.summary_path.display()))

        }
        Command::Summarize { input } => {
            let summary = summarize_file(&input)?;
            emit(&serde_json::to_string_pretty(&summary)?)

        }
        Command::GoldenToy => {
            let report = golden_toy()?;
            emit(&serde_json::to_string_pretty(&report)?)

        }
    }
}
