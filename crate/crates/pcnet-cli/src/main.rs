//! Pipeline driver for the density-gated decoding experiments.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or config), 2 runtime
//! failure (missing files, divergence, violated checkpoints).

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::{AblateAxis, DecodeMode};
use config::Overrides;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "pcnet",
    about = "Latent density estimation and density-gated decoding over a deterministic toy LM",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the toy LM, plant a corpus, and train the density model.
    Train {
        /// TOML (or JSON) config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output run directory.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score held-out states, calibrate the threshold, report AUROC/F1.
    Detect {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/detect")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Decode the evaluation prompts in one intervention mode.
    Decode {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// vanilla (pure greedy), ungated (always-on, β = 1), or gated.
        #[arg(long, value_enum)]
        mode: DecodeMode,
        #[arg(long, default_value = "runs/decode")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sweep training-set size or projection dimension over all seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// train-size or proj-dim.
        #[arg(long, value_enum)]
        axis: AblateAxis,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Load a checkpoint and run the structural validators.
    ValidateCkpt {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            overrides,
        } => {
            let cfg = config::resolve(config.as_deref(), &overrides)?;
            commands::cmd_train(&cfg, &out)
        }
        Command::Detect {
            config,
            checkpoint,
            out,
            overrides,
        } => {
            let cfg = config::resolve(config.as_deref(), &overrides)?;
            commands::cmd_detect(&cfg, &checkpoint, &out)
        }
        Command::Decode {
            config,
            checkpoint,
            mode,
            out,
            overrides,
        } => {
            let cfg = config::resolve(config.as_deref(), &overrides)?;
            commands::cmd_decode(&cfg, &checkpoint, mode, &out)
        }
        Command::Ablate {
            config,
            axis,
            out,
            overrides,
        } => {
            let cfg = config::resolve(config.as_deref(), &overrides)?;
            commands::cmd_ablate(&cfg, axis, &out)
        }
        Command::ValidateCkpt { checkpoint } => commands::cmd_validate_ckpt(&checkpoint),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors.
            if e.kind() == clap::error::ErrorKind::DisplayHelp
                || e.kind() == clap::error::ErrorKind::DisplayVersion
            {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli) {
        let msg = format!("{e:#}");
        eprintln!("error: {msg}");
        // Config and flag problems are usage errors; everything else is a
        // runtime failure.
        let usage = msg.contains("invalid config field") || msg.contains("cannot read config");
        std::process::exit(if usage { 1 } else { 2 });
    }
}
