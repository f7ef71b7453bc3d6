//! `jct` — train, decode, and inspect the two-stage acoustic model.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, numerics, divergence),
//! 2 configuration error (bad flag, unknown key, missing path).

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jct_core::features::FeaturesError;
use jct_core::numerics::NumericsError;
use jct_core::training::TrainingError;

/// CLI-level error split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// The invocation or config is wrong; fix the input (exit 2).
    Config(String),
    /// The work itself failed (exit 1).
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Runtime(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<FeaturesError> for CliError {
    fn from(e: FeaturesError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Config file + dotted overrides, shared by every subcommand.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON config file; defaults apply for anything omitted.
    #[arg(long, global = false)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.max_steps=200
    /// (values parse as JSON, bare words fall back to strings).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<config::RunConfig, CliError> {
        config::load_config(self.config.as_deref(), &self.set)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "jct",
    about = "Two-stage acoustic model: masked pretraining, joint CTC/attention fine-tuning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Masked-prediction pretraining of the encoder on unlabeled features.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Joint CTC/attention fine-tuning on labeled features.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// direct | frozen | scratch (overrides the config's finetune_mode).
        #[arg(long)]
        mode: Option<String>,
        /// Pretraining checkpoint to start from (overrides paths.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode an eval manifest with one or more checkpoints and report WER.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fine-tuned checkpoint directory (repeatable; mean WER is reported
        /// when more than one is given).
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Decode an eval manifest into decode.jsonl without a summary report.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fine-tuned checkpoint directory (overrides paths.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Beam width override (1 = greedy-like best-first).
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Write one encoder self-attention head as CSV + PGM.
    AttentionDump {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory, either stage (overrides paths.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Utterance to inspect (defaults to the first in the manifest).
        #[arg(long)]
        utt_id: Option<String>,
        /// Encoder block index.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Attention head index.
        #[arg(long, default_value_t = 0)]
        head: usize,
    },
    /// Fast offline verification of the numerical core.
    Selftest,
    /// Generate a synthetic corpus manifest.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Manifest path to write (overrides paths.train_manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain { cfg } => commands::cmd_pretrain(&cfg.load()?),
        Command::Finetune { cfg, mode, checkpoint } => {
            commands::cmd_finetune(&cfg.load()?, mode.as_deref(), checkpoint.as_deref())
        }
        Command::Evaluate { cfg, checkpoint } => commands::cmd_evaluate(&cfg.load()?, &checkpoint),
        Command::Decode { cfg, checkpoint, beam } => {
            commands::cmd_decode(&cfg.load()?, checkpoint.as_deref(), beam)
        }
        Command::AttentionDump { cfg, checkpoint, utt_id, layer, head } => {
            commands::cmd_attention_dump(
                &cfg.load()?,
                checkpoint.as_deref(),
                utt_id.as_deref(),
                layer,
                head,
            )
        }
        Command::Selftest => commands::cmd_selftest(),
        Command::SynthData { cfg, out } => {
            commands::cmd_synth_data(&cfg.load()?, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
