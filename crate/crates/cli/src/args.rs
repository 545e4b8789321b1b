use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "adps", version, about = "Asymmetric distillation with post-segmentation for anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write `ckpt.bin` and `train_log.csv`.
    Train(TrainArgs),
    /// Score a checkpoint (or stored raw maps) on the test split; writes `metrics.json`.
    Eval(EvalArgs),
    /// Write heatmaps, binary masks and per-stage similarity maps for images.
    Infer(InferArgs),
    /// Render synthesized training anomalies for inspection.
    SynthPreview(PreviewArgs),
    /// Train and evaluate a grid of ablation configurations.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML config file or preset name (`paper`, `toy`).
    #[arg(long)]
    pub config: Option<String>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["ckpt", "maps"])))]
pub struct EvalArgs {
    /// Checkpoint to evaluate. Its stored config is the base for `--set`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Score raw maps written by `--dump-maps` instead of running a model.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value = "runs/eval")]
    pub out: PathBuf,
    /// Also write every raw anomaly map under `<out>/maps`.
    #[arg(long)]
    pub dump_maps: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image files or directories of images.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "runs/infer")]
    pub out: PathBuf,
    /// Abnormal probability at or above which a pixel is masked.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Also write the raw float map with a JSON sidecar.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value = "runs/preview")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of samples to render.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Base configuration; defaults to the toy preset.
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value = "runs/ablate")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated groups to sweep: k, fusion, metric, variant.
    #[arg(long, default_value = "k,fusion,metric,variant")]
    pub grid: String,
    /// Grid entries trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}
