//! `urie` command line: pretrain the recognizer, train and apply the
//! enhancer, corrupt images, evaluate and count MACs.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use urie_core::sem::NormMode;
use urie_core::train::LossKind;

pub mod commands;
pub mod config;
pub mod error;

pub use config::{CliConfig, DatasetConfig};
pub use error::{CliError, CliResult, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(
    name = "urie",
    version,
    about = "Recognition-aware image enhancement on a synthetic shape task"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the recognizer on clean images and freeze it.
    Pretrain(PretrainArgs),
    /// Train the enhancer in front of a frozen recognizer.
    Train(TrainArgs),
    /// Enhance one PNG image.
    Enhance(EnhanceArgs),
    /// Apply one seeded corruption to a PNG image.
    Corrupt(CorruptArgs),
    /// Accuracy with and without an enhancer on clean, seen and unseen splits.
    Eval(EvalArgs),
    /// Multiply-accumulates of one forward pass.
    Macs(MacsArgs),
    /// Print the resolved configuration as JSON.
    Config(ConfigArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config file; unknown keys are rejected. Missing keys take the defaults shown below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Classifier checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log, one JSON object per line [default: <out>.log.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Sets pretrain.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sets pretrain.epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Both,
    #[value(alias = "bn_only")]
    Bn,
    #[value(alias = "in_only")]
    In,
}

impl From<NormArg> for NormMode {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Both => NormMode::Both,
            NormArg::Bn => NormMode::BnOnly,
            NormArg::In => NormMode::InOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Recognition,
    Mse,
    Ssim,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Recognition => LossKind::Recognition,
            LossArg::Mse => LossKind::Mse,
            LossArg::Ssim => LossKind::Ssim,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Frozen classifier checkpoint from `urie pretrain`.
    #[arg(long)]
    pub clf: PathBuf,
    /// Enhancer checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log, one JSON object per line [default: <out>.log.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Sets train.loss_kind.
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    /// Sets model.norm_mode.
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    /// Sets train.data_fraction.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Sets train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sets train.epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EnhanceArgs {
    /// Enhancer checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Refuse checkpoints trained under a different normalization mode.
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    /// Input PNG of any size; it is reflect-padded to a multiple of 16 and cropped back.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CorruptArgs {
    /// Corruption kind, e.g. gaussian_noise or identity.
    #[arg(long)]
    pub kind: String,
    /// Severity 1 to 5.
    #[arg(long, default_value_t = 3)]
    pub severity: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Enhancer checkpoint; without it only the identity baseline is evaluated.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Refuse enhancer checkpoints trained under a different normalization mode.
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    /// Frozen classifier checkpoint.
    #[arg(long)]
    pub clf: PathBuf,
    /// Read frozen evaluation splits instead of rebuilding them from the config.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Write the evaluation splits used.
    #[arg(long)]
    pub save_splits: Option<PathBuf>,
    /// JSON report path [default: stdout].
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-kind accuracy CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct MacsArgs {
    #[arg(long, default_value_t = 224)]
    pub h: usize,
    #[arg(long, default_value_t = 224)]
    pub w: usize,
    /// Normalization mode; MACs do not depend on it.
    #[arg(long, value_enum, default_value_t = NormArg::Both)]
    pub norm: NormArg,
    /// Attention bottleneck reduction ratio.
    #[arg(long, default_value_t = urie_core::sem::DEFAULT_REDUCTION)]
    pub reduction: usize,
    /// Print a per-layer breakdown before the total.
    #[arg(long)]
    pub table: bool,
}

fn command() -> clap::Command {
    let defaults = format!("Default configuration:\n{}", CliConfig::default().to_json());
    Cli::command()
        .mut_subcommand("pretrain", |c| c.after_long_help(defaults.clone()))
        .mut_subcommand("train", |c| c.after_long_help(defaults.clone()))
        .mut_subcommand("eval", |c| c.after_long_help(defaults.clone()))
        .mut_subcommand("config", |c| c.after_long_help(defaults.clone()))
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code: 0 success, 1 file I/O, 2 usage or config error, 3
/// numeric failure.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = command()
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match commands::dispatch(&cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
