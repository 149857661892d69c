//! `mfrd` command-line interface.
//!
//! Exit codes: 0 success, 2 data error, 3 configuration error, 4 numeric
//! failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "mfrd",
    version,
    about = "Multi-frequency reconstruction diffusion load forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decompose a series into VMD modes.
    Decompose {
        #[command(flatten)]
        common: Common,
        /// Input CSV (defaults to the config's data path).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Overrides the number of modes.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the denoiser; writes checkpoints and a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Forecast the horizon following the end of a series.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input CSV (defaults to the config's data path).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Rolling-origin evaluation on a test series.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test CSV; without it the test partition of the config's data is used.
        #[arg(long)]
        input: Option<PathBuf>,
        /// none | monthly (overrides the config).
        #[arg(long)]
        grouping: Option<String>,
        /// Number of seeded runs averaged per window (overrides the config).
        #[arg(long)]
        ensemble: Option<usize>,
    },
    /// Train and evaluate once per VMD mode count.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Inclusive range such as 2..10 or 2..=10.
        #[arg(long, default_value = "2..10")]
        k_range: String,
    },
    /// Run one ablation variant (or `all`).
    Ablate {
        #[command(flatten)]
        common: Common,
        /// full | wo_vmd | wo_lstm | wo_vmd_lstm | wo_f | all
        #[arg(long, default_value = "all")]
        variant: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Decompose { common, input, k } => commands::decompose(&common, input, k),
        Command::Train { common, resume } => commands::train(&common, resume),
        Command::Forecast {
            common,
            checkpoint,
            input,
        } => commands::forecast(&common, &checkpoint, input),
        Command::Evaluate {
            common,
            checkpoint,
            input,
            grouping,
            ensemble,
        } => commands::evaluate(&common, &checkpoint, input, grouping, ensemble),
        Command::Sweep { common, k_range } => commands::sweep(&common, &k_range),
        Command::Ablate { common, variant } => commands::ablate(&common, &variant),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
