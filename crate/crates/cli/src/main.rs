//! `hmq` — mixed-precision quantization-aware training pipeline.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<hmq_core::Error> for CliError {
    fn from(e: hmq_core::Error) -> Self {
        match e {
            hmq_core::Error::DataFormat { .. } => CliError::Data(e.to_string()),
            hmq_core::Error::InfeasibleBudget { .. } => CliError::Infeasible(e.to_string()),
            hmq_core::Error::Checkpoint(_) => CliError::Data(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "hmq",
    about = "Mixed-precision quantization-aware training with learned bit-widths and power-of-two thresholds",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-threaded kernels for byte-identical reruns.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision baseline and write float.ckpt.
    Pretrain(CommonArgs),
    /// Calibrate, attach quantization blocks and run the two-phase fine-tune.
    Quantize(CommonArgs),
    /// Report top-1 accuracy of a checkpoint on the test split.
    Evaluate {
        /// Checkpoint to evaluate (float or quantized).
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Summarize a completed run directory and emit plot-ready CSVs.
    Report {
        /// Directory produced by `hmq quantize`.
        run_dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain(common) => {
            hmq_core::kernels::set_sequential(common.strict);
            let settings = commands::Settings::resolve(&common.config, common.seed, common.out)?;
            commands::cmd_pretrain(&settings)
        }
        Command::Quantize(common) => {
            hmq_core::kernels::set_sequential(common.strict);
            let settings = commands::Settings::resolve(&common.config, common.seed, common.out)?;
            commands::cmd_quantize(&settings)
        }
        Command::Evaluate { checkpoint, common } => {
            hmq_core::kernels::set_sequential(common.strict);
            let settings = commands::Settings::resolve(&common.config, common.seed, common.out)?;
            commands::cmd_evaluate(&settings, &checkpoint)
        }
        Command::Report { run_dir } => commands::cmd_report(&run_dir),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
