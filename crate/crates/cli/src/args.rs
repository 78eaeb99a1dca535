use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "sdan", version, about = "Squared deformable alignment for optical-zoom super-resolution")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Run the worker pool on a single thread.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic misaligned-zoom dataset.
    GenData(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Zoom images with a trained checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint (or dumped predictions) on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Rgb,
    Raw,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Directory of HR source images (PNG or PPM).
    #[arg(long)]
    pub src: Option<PathBuf>,
    /// Procedurally generated sources to add.
    #[arg(long, default_value_t = 0)]
    pub synthetic_sources: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// LR crop side length.
    #[arg(long, default_value_t = 64)]
    pub crop: usize,
    #[arg(long, default_value_t = 8)]
    pub shift_max: usize,
    /// Draw real-valued shifts instead of integers.
    #[arg(long)]
    pub fractional: bool,
    #[arg(long, value_enum, default_value_t = Mode::Rgb)]
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OffsetModeArg {
    Squared,
    PerPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttentionArg {
    None,
    Channel,
    Cpa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ValModeArg {
    Reference,
    #[value(name = "self")]
    SelfRef,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset for per-epoch validation.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Ablation row: table2-row-1 (per-point DCN) to table2-row-5 (full).
    #[arg(long, value_name = "table2-row-N")]
    pub preset: Option<String>,
    #[arg(long, value_enum)]
    pub offset_mode: Option<OffsetModeArg>,
    #[arg(long, value_enum)]
    pub attention: Option<AttentionArg>,
    #[arg(long, value_enum)]
    pub flip_aug: Option<Switch>,
    /// Replace deformable alignment with a plain convolution.
    #[arg(long)]
    pub no_align: bool,
    #[arg(long, default_value_t = 64)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 4)]
    pub res_blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub pack_size: usize,
    #[arg(long, default_value_t = 16)]
    pub reduction: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    /// Stop after this many optimiser steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Write a checkpoint every N epochs (0 = final only).
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: usize,
    #[arg(long, value_enum, default_value_t = ValModeArg::Reference)]
    pub val_mode: ValModeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Png,
    Ppm,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (PNG/PPM) or SDTN tensor; repeatable.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Optional reference for the alignment branch (defaults to the input).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ImageFormat::Png)]
    pub format: ImageFormat,
    /// Write the centre offset field as a (1, 2, h, w) SDTN tensor.
    #[arg(long)]
    pub dump_offsets: bool,
    /// Write the HR validity mask as a grayscale PNG.
    #[arg(long)]
    pub dump_mask: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Score images named `<id>.png` / `<id>.ppm` from this directory
    /// instead of running a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Directory for `metrics.csv` (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write every zoomed result as `<out>/images/<id>.png`.
    #[arg(long, requires = "out", conflicts_with = "predictions")]
    pub dump_images: bool,
    #[arg(long, value_enum, default_value_t = ValModeArg::Reference)]
    pub val_mode: ValModeArg,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Compute analytic gradients in 64-bit.
    #[arg(long)]
    pub f64: bool,
    /// Only ops whose name starts with this.
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}
