//! `rnsde` command-line driver.
//!
//! Exit codes: 0 success, 2 usage, 3 missing or unreadable dependency,
//! 4 numerical failure. Errors are also printed to stderr as one JSON line.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rnsde::Error;

#[derive(Parser, Debug)]
#[command(name = "rnsde", version, about = "Limited-angle CT reconstruction with residual null-space diffusion")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `key=value` override applied after the config file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for sampling, and for initialisation and batching when training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run directory receiving the config echo, provenance and outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Also write PNG previews of image outputs.
    #[arg(long, global = true)]
    pub export_png: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the default configuration.
    Defaults,
    /// Dataset operations.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Forward-project an image container to a sinogram.
    Project {
        #[arg(long)]
        input: PathBuf,
    },
    /// Filtered back-projection of a sinogram container.
    Fbp {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the learned pseudo-inverse for `geometry.theta_miss`.
    TrainPinv,
    /// Train the conditional score network for `geometry.theta_miss`.
    TrainScore,
    /// Train the MMSE restorer for `geometry.theta_miss`.
    TrainRestorer,
    /// Draw posterior samples for one measurement.
    Sample {
        /// Test-split item id (defaults to the first test item).
        #[arg(long, conflicts_with = "input")]
        item: Option<String>,
        /// Sinogram container to reconstruct instead of a dataset item.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compare all methods on the test split of every `eval.theta_miss`.
    Evaluate {
        /// Comma-separated method labels (default: all).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Sweep one config key and report the sampler metrics per value.
    Ablate {
        /// `KEY=v1,v2,...`; `T` and `mu` abbreviate `schedule.T` and `score.mu`.
        #[arg(long)]
        sweep: String,
        /// Also report the sampler without rectification.
        #[arg(long)]
        with_unrectified: bool,
    },
}

#[derive(Subcommand, Debug)]
pub enum DatasetAction {
    /// Generate phantoms, sinograms and FBP reconstructions.
    Build {
        /// Build one dataset per `eval.theta_miss` instead of `geometry.theta_miss`.
        #[arg(long)]
        all: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingDependency(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::Numerical(_) | Error::SamplingAborted { .. } => 4,
        _ => 2,
    }
}

fn kind(code: u8) -> &'static str {
    match code {
        2 => "usage",
        3 => "dependency",
        _ => "numerical",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let line = serde_json::json!({ "error": kind(code), "code": code, "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
