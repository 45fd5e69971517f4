//! `dmmv` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.
//! `DMMV_WORKERS` overrides `train.workers`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dmmv_core::Error;

#[derive(Parser)]
#[command(name = "dmmv", version, about = "Dual-view long-term time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, history and test metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on a split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Segment-length sweep of the imaging period.
    SweepBias {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated segment lengths (overrides sweep.lengths).
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        /// Use k * period / 6 for k = 1..6 instead of sweep.lengths.
        #[arg(long, conflicts_with = "lengths")]
        sixth_grid: bool,
    },
    /// Run the ablation modes and write one table row per mode.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated modes (overrides ablate.modes).
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
    },
    /// Write a synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Write one window's decomposition, forecast and ground truth as CSV.
    Decompose {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the split's windows (taken at train.eval_stride).
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
}

#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub sets: Vec<(String, String)>,
    /// Shorthand for `--set data.path=...`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Shorthand for `--set out=...`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Shorthand for `--set model.variant=...` (s or a).
    #[arg(long)]
    pub variant: Option<String>,
    /// Shorthand for `--set model.mask_mode=...` (bcmask, none, random).
    #[arg(long)]
    pub mask_mode: Option<String>,
    /// Shorthand for `--set train.seed=...`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub kind: SynthKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2400)]
    pub len: usize,
    #[arg(long, default_value_t = 24)]
    pub period: usize,
    #[arg(long, default_value_t = 1.0)]
    pub a_start: f64,
    #[arg(long, default_value_t = 0.2)]
    pub a_end: f64,
    #[arg(long, default_value_t = 0.005)]
    pub slope: f64,
    #[arg(long, default_value_t = 1.0)]
    pub amp: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    DecayingSine,
    TrendSine,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    config::split_assignment(s)
}

fn run(cli: Cli) -> dmmv_core::Result<()> {
    match cli.command {
        Command::Train(run) => commands::train(&run),
        Command::Eval { run, checkpoint, split } => commands::eval(&run, &checkpoint, split),
        Command::SweepBias { run, lengths, sixth_grid } => commands::sweep_bias(&run, lengths, sixth_grid),
        Command::Ablate { run, modes } => commands::ablate(&run, modes),
        Command::Synth(args) => commands::synth(&args),
        Command::Decompose {
            run,
            checkpoint,
            window,
            split,
        } => commands::decompose(&run, &checkpoint, window, split),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else {
        3
    }
}
