use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "inpaint", version, about = "Detection-weighted image inpainting")]
pub struct Cli {
    /// TOML training config; flags override individual keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed overriding the config (or the command default).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (genmasks, train, visualize).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate free-form masks sorted into hole-ratio buckets.
    Genmasks(GenmasksArgs),
    /// Train a generator in det, weight or adv mode.
    Train(TrainArgs),
    /// Inpaint one image with a trained checkpoint.
    Infer(InferArgs),
    /// Compute per-bucket metrics on a test set.
    Evaluate(EvaluateArgs),
    /// Render detector colormaps for an output and its ground truth.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct GenmasksArgs {
    /// Masks per bucket.
    #[arg(long, default_value_t = 100)]
    pub count: usize,

    /// Six comma-separated per-bucket counts; overrides --count.
    #[arg(long, value_delimiter = ',')]
    pub quotas: Option<Vec<usize>>,

    /// Square mask side in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,

    /// Keep a hole-free band along the border.
    #[arg(long)]
    pub border: bool,

    /// Skip rotation, dilation and cropping.
    #[arg(long)]
    pub no_augment: bool,

    /// Attempts before giving up on unmet quotas (default 50 per requested mask).
    #[arg(long)]
    pub max_attempts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training images (searched recursively).
    #[arg(long)]
    pub images: PathBuf,

    /// Training masks (searched recursively).
    #[arg(long)]
    pub masks: PathBuf,

    /// det, weight or adv.
    #[arg(long)]
    pub mode: Option<String>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub image_size: Option<usize>,

    #[arg(long)]
    pub learning_rate: Option<f64>,

    #[arg(long)]
    pub checkpoint_interval: Option<u64>,

    /// Override any config key, e.g. `--set loss.gamma=1.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Continue from `<out>/checkpoints/last.ckpt`.
    #[arg(long)]
    pub resume: bool,

    /// Print a progress line every N steps (0 disables).
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub image: PathBuf,

    /// Hole mask (white = hole).
    #[arg(long)]
    pub mask: PathBuf,

    /// Where to write the raw generator output.
    #[arg(long)]
    pub output: PathBuf,

    /// Also write the output with valid pixels pasted back from the input.
    #[arg(long, value_name = "PATH")]
    pub composite: Option<PathBuf>,

    /// Working resolution (default: the checkpoint's image_size).
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stub {
    /// Returns the ground truth.
    Perfect,
    /// Returns the corrupted input.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExtractorKind {
    /// Fixed random projection of an 8×8 thumbnail.
    Bundled,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, conflicts_with = "stub", required_unless_present = "stub")]
    pub checkpoint: Option<PathBuf>,

    /// Evaluate a stub model instead of a checkpoint.
    #[arg(long, value_enum)]
    pub stub: Option<Stub>,

    #[arg(long)]
    pub images: PathBuf,

    /// Directory with one subdirectory per bucket label.
    #[arg(long)]
    pub masks: PathBuf,

    /// Report path (default `<out>/report.toml`).
    #[arg(long)]
    pub report: Option<PathBuf>,

    /// Score the output with valid pixels pasted back.
    #[arg(long)]
    pub composite: bool,

    /// Also compute FID; requires --extractor.
    #[arg(long)]
    pub fid: bool,

    #[arg(long, value_enum)]
    pub extractor: Option<ExtractorKind>,

    /// Working resolution (default: the checkpoint's image_size, or 256 for stubs).
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    /// Det-mode checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub image: PathBuf,

    #[arg(long)]
    pub mask: PathBuf,

    /// Working resolution (default: the checkpoint's image_size).
    #[arg(long)]
    pub size: Option<usize>,
}
