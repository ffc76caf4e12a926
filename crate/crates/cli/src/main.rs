mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lasco_core::collab::CollabError;
use lasco_core::harness::HarnessError;
use lasco_core::models::ModelError;

use config::{CommonArgs, ConfigError, ModeArgs};

#[derive(Debug, Parser)]
#[command(
    name = "lasco",
    version,
    about = "Large/small model collaboration for CSI feedback reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Figure {
    /// Mode comparison over codeword lengths.
    Fig5,
    /// Alpha sweep, mean and per environment.
    Fig6,
    /// Sample efficiency.
    Fig7,
    /// Reference-SAM ablation and convergence CDF.
    Fig8,
    /// SAM size sweep.
    Fig9,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the per-environment datasets of the suite.
    GenData(CommonArgs),
    /// Pre-train the base LAM and reference SAM for every codeword length.
    Pretrain(CommonArgs),
    /// Adapt one mode to one environment (every configured seed).
    Adapt {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        mode: ModeArgs,
    },
    /// Evaluate one mode on the test splits of the adaptation environments.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        mode: ModeArgs,
    },
    /// LASCO over the alpha grid.
    SweepAlpha(CommonArgs),
    /// LASCO, fine-tuned SAM and Baseline A over the sample-count grid.
    SweepSamples {
        #[command(flatten)]
        common: CommonArgs,
        /// Fixed alpha of LASCO (default: tuned on the alpha grid).
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// E-LASCO over the SAM-width grid.
    SweepSize(CommonArgs),
    /// Convergence-epoch CDF, from existing runs.csv files or from a fresh
    /// LASCO vs reference-free comparison.
    Cdf {
        #[command(flatten)]
        common: CommonArgs,
        /// runs.csv files to read instead of running.
        runs: Vec<PathBuf>,
    },
    /// Run the experiment behind one figure at desk scale.
    Repro {
        figure: Figure,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the header, configuration and parameter count of a checkpoint.
    InspectCkpt { file: PathBuf },
}

/// 2 for configuration errors, 3 for missing or mismatched prerequisites,
/// 4 for numerical failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            if h.is_numerical() {
                return 4;
            }
            match h {
                HarnessError::Config(_) => return 2,
                HarnessError::Missing(_) | HarnessError::Mismatch(_) => return 3,
                _ => {}
            }
        }
        if let Some(m) = cause.downcast_ref::<ModelError>() {
            match m {
                ModelError::InvalidConfig(_) => return 2,
                ModelError::Io(_)
                | ModelError::Corrupt(_)
                | ModelError::Version { .. }
                | ModelError::ConfigMismatch(_)
                | ModelError::CodecMismatch { .. } => return 3,
                _ => {}
            }
        }
        if let Some(c) = cause.downcast_ref::<CollabError>() {
            match c {
                CollabError::Alpha { .. } | CollabError::UnknownMode(_) => return 2,
                CollabError::MissingModel { .. } | CollabError::NotFrozen { .. } => return 3,
                _ => {}
            }
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::Adapt { common, mode } => commands::adapt(&common, &mode),
        Command::Eval { common, mode } => commands::eval(&common, &mode),
        Command::SweepAlpha(c) => commands::sweep_alpha(&c),
        Command::SweepSamples { common, alpha } => commands::sweep_samples(&common, alpha),
        Command::SweepSize(c) => commands::sweep_size(&c),
        Command::Cdf { common, runs } => commands::cdf(&common, &runs),
        Command::Repro { figure, common } => commands::repro(figure, &common),
        Command::InspectCkpt { file } => commands::inspect_ckpt(&file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
