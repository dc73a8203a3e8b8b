//! `gst`: fit splat scenes, build transport kernels, train and benchmark.
//!
//! Exit codes: 0 success, 1 oracle failure, 2 I/O, 3 configuration,
//! 4 data consistency, 5 missing dependency.

mod commands;
mod config;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{CliError, FileConfig};

#[derive(Debug, Parser)]
#[command(name = "gst", version, about = "Gaussian spatial transport toolkit")]
struct Cli {
    /// JSON file with `fit`, `correspondence`, `train`, `bench`, `scene` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single thread, no wall-clock values in outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a splat scene to an annotated image.
    Fit(commands::FitArgs),
    /// Build a transport kernel from a fitted scene (or a fixed-width heuristic).
    BuildKernel(commands::BuildKernelArgs),
    /// Write a synthetic annotated corpus with a manifest.
    Synth(commands::SynthArgs),
    /// Train the density regressor on a manifest.
    Train(commands::TrainArgs),
    /// Evaluate a trained (or the pseudo ground-truth) model.
    Eval(commands::EvalArgs),
    /// Time the transport losses.
    Bench(commands::BenchArgs),
    /// Run a named oracle check: appendix-a, theorem1, ot-1d, dense-kernel.
    Oracle(commands::OracleArgs),
}

/// Settings every subcommand sees.
#[derive(Debug, Clone)]
pub struct Global {
    pub config: FileConfig,
    pub deterministic: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let threads = if cli.deterministic {
        1
    } else {
        match cli.threads.or(config.threads) {
            Some(0) => return Err(CliError::Config("threads must be ≥ 1".into())),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let global = Global {
        config,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Fit(args) => commands::fit(&global, args),
        Command::BuildKernel(args) => commands::build_kernel_cmd(&global, args),
        Command::Synth(args) => commands::synth(&global, args),
        Command::Train(args) => commands::train(&global, args),
        Command::Eval(args) => commands::eval(&global, args),
        Command::Bench(args) => commands::bench(&global, args),
        Command::Oracle(args) => commands::oracle(&global, args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
