//! `sgcd`: synthetic data, spectral filtering, training, evaluation,
//! reporting and gradient self-checks from the command line.
//!
//! Exit codes: 0 success, 1 validation or usage, 2 I/O, 3 numerical failure.

mod commands;
mod config;
mod manifest;
mod training;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use config::ConfigFile;
use manifest::Runtime;

#[derive(Debug, Parser)]
#[command(name = "sgcd", version, about = "Spectral concept filtering and category discovery over precomputed embeddings")]
struct Cli {
    /// TOML (or .json) file with [synth], [filter] and [train] tables. Flags
    /// override file values, which override built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Run on a single worker thread. Results do not depend on the thread
    /// count either way; this only removes scheduling from the picture.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic teacher/student dataset with planted concepts.
    Synth(commands::SynthArgs),
    /// Select task-relevant concepts from the teacher's cross-modal covariance.
    Filter(commands::FilterArgs),
    /// Train the head on filtered student similarities.
    Train(training::TrainArgs),
    /// Score a checkpoint on the unlabeled samples.
    Eval(training::EvalArgs),
    /// Render eval results or a filtering threshold sweep as a table.
    Report(commands::ReportArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    Checkgrad(commands::CheckgradArgs),
}

/// Paths shared by `train` and `eval`.
#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long, value_name = "BUNDLE")]
    student: PathBuf,
    #[arg(long, value_name = "BUNDLE")]
    teacher: PathBuf,
    #[arg(long, value_name = "DICT")]
    student_dict: PathBuf,
    #[arg(long, value_name = "DICT")]
    teacher_dict: PathBuf,
}

fn run(cli: Cli) -> sgcd::Result<()> {
    let runtime = Runtime {
        threads: if cli.deterministic { Some(1) } else { cli.threads },
        deterministic: cli.deterministic,
    };
    if let Some(n) = runtime.threads {
        if n == 0 {
            return Err(sgcd::Error::Invalid("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&a, &file, &runtime),
        Command::Filter(a) => commands::filter(&a, &file, &runtime),
        Command::Train(a) => training::train(&a, &file, &runtime),
        Command::Eval(a) => training::eval(&a, &runtime),
        Command::Report(a) => commands::report(&a, &file, &runtime),
        Command::Checkgrad(a) => commands::checkgrad(&a, &file, &runtime),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap uses 2 for usage errors, which would collide with I/O.
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
