//! `uniultra` command-line pipeline.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;

pub use config::RunConfig;

// Aliases keep clap from treating the parsed lists as repeated flags.
type Directions = Vec<uniultra_core::edge::Direction>;
type Levels = Vec<uniultra_core::distill::Level>;

/// Bad flags, config files or settings (exit 1).
#[derive(Debug)]
pub struct UsageError(pub String);

/// Missing or unusable data (exit 2).
#[derive(Debug)]
pub struct DataError(pub String);

/// A self-check that ran and failed (exit 3).
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for DataError {}
impl std::error::Error for CheckFailed {}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

pub fn exit_code(err: &anyhow::Error) -> u8 {
    use uniultra_core::Error as E;
    if err.is::<CheckFailed>() {
        return EXIT_CHECK;
    }
    if err.is::<DataError>() || err.is::<std::io::Error>() {
        return EXIT_DATA;
    }
    match err.downcast_ref::<E>() {
        Some(E::Data { .. } | E::Io(_) | E::Checkpoint(_)) => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "uniultra", version, about = "Adapter fine-tuning and feature distillation for box-prompted segmentation")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic image/mask dataset with a split manifest.
    GenData(GenDataArgs),
    /// Fine-tune adapters, prompt encoder and decoder on a frozen backbone.
    Train(TrainArgs),
    /// Distil a trained teacher encoder into a narrower student.
    Distill(DistillArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Trainable/total parameter table per phase.
    Params(ParamsArgs),
    /// Paired-seed sweeps.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long)]
    pub size: Option<usize>,
    /// Validation count; defaults to a 10% share when n >= 10.
    #[arg(long)]
    pub val: Option<usize>,
    /// Test count; defaults to a 10% share when n >= 10.
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `none`, `all` or a list such as `h,v`.
    #[arg(long, value_parser = config::parse_directions)]
    pub edge_directions: Option<Directions>,
    #[arg(long)]
    pub adapter_dim: Option<usize>,
    /// Per-epoch metrics CSV; defaults to `<out>/metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: Common,
    /// Teacher checkpoint directory.
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma list of d1, d2, d3.
    #[arg(long, value_parser = config::parse_levels)]
    pub levels: Option<Levels>,
    /// Seg-loss epochs on the copied decoder afterwards.
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Per-image CSV (`id,dice,iou,hd`).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model sizes; overrides the config's teacher and student.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    EdgeDirections,
    DistillLevels,
    AdapterDim,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub study: Study,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for `ablation.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Required for distill-levels.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Arm values: direction counts, level counts or adapter widths.
    #[arg(long, value_delimiter = ',')]
    pub arms: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a, out),
        Command::Train(a) => commands::train(&a, out).map(|_| ()),
        Command::Distill(a) => commands::distill(&a, out).map(|_| ()),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Gradcheck(a) => commands::gradcheck(&a, out),
        Command::Params(a) => commands::params(&a, out),
        Command::Ablate(a) => commands::ablate(&a, out),
    }
}
