mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<nkm::Error> for CliError {
    fn from(e: nkm::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "nkm",
    version,
    about = "Neural Koopman forecasting of longitudinal cohorts"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON config file; nested sections or dotted keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "nkm-out")]
    pub out: PathBuf,
    /// Base configuration: desk or adni-full.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Override one config key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Cohort CSV. A synthetic cohort is generated when absent.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with known latent dynamics.
    Synth,
    /// Train one model on the whole cohort with a held-out validation split.
    Train(DataArgs),
    /// Evaluate a saved model on a cohort.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Directory written by `train`.
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
    },
    /// Stratified k-fold cross-validation of the configured setup.
    Cv(DataArgs),
    /// Cross-validate the full model and the four single-component ablations.
    Ablate(DataArgs),
    /// Cross-validate the EDMD and linear regression baselines.
    Edmd(DataArgs),
    /// Check the multi-step error bound for the trained model and EDMD.
    VerifyBound {
        #[command(flatten)]
        data: DataArgs,
        /// Use a saved model instead of training one.
        #[arg(long, value_name = "DIR")]
        model: Option<PathBuf>,
    },
    /// Check monotone descent of the alternating scheme.
    VerifyDescent(DataArgs),
    /// Permutation feature importance over reseeded splits.
    Importance(DataArgs),
    /// Write 2-D PCA coordinates of latent rollouts.
    ExportLatents {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        model: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(std::env::args_os()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n\nRun `nkm --help` for usage.");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::FAILURE
        }
    }
}
