mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Parser, ValueEnum};
use viact_core::PosEmbedVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Render a phantom cohort to disk.
    GenData,
    /// Masked-autoencoder pre-training.
    Pretrain,
    /// Fine-tune the point tracker.
    Track,
    /// Fine-tune the binary classifier.
    Classify,
    /// Fine-tune the ejection-fraction regressor.
    Ef,
    /// Re-evaluate a fine-tuned checkpoint on one split.
    Eval,
    /// Export class-token attention of one sample.
    Attn,
    /// Token counts and attention cost per model scale.
    Profile,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

fn pos_embed_parser() -> impl TypedValueParser<Value = PosEmbedVariant> {
    let names: Vec<&'static str> = PosEmbedVariant::ALL.iter().map(|v| v.name()).collect();
    PossibleValuesParser::new(names).map(|s| s.parse::<PosEmbedVariant>().expect("listed name"))
}

/// Anatomical video transformer on echo phantoms.
#[derive(Clone, Debug, Parser, serde::Serialize)]
#[command(name = "viact", version, args_override_self = true)]
pub struct Args {
    #[arg(long, value_enum)]
    pub task: Command,
    /// Dataset directory (written by `gen-data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Learning rate at batch 256; the peak is `base_lr * batch / 256`.
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Pre-train once per ratio in 0.80, 0.85, 0.90, 0.95.
    #[arg(long)]
    pub mask_ratio_sweep: bool,
    #[arg(long, value_parser = pos_embed_parser())]
    pub pos_embed: Option<PosEmbedVariant>,
    #[arg(long, default_value_t = 18)]
    pub frames: usize,
    #[arg(long, default_value_t = 84)]
    pub points: usize,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    #[arg(long, default_value_t = 12)]
    pub depth: usize,
    #[arg(long, default_value_t = 192)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub heads: usize,
    /// Divisor applied to pixel coordinates by the linear embeddings.
    #[arg(long)]
    pub coord_scale: Option<f32>,
    #[arg(long, default_value_t = 96)]
    pub decoder_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub decoder_depth: usize,
    #[arg(long, default_value_t = 3)]
    pub decoder_heads: usize,
    /// Pre-trained checkpoint to fine-tune, or the checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue a pre-training run from one of its checkpoints.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Extra tracker passes at the previous prediction.
    #[arg(long, default_value_t = 0)]
    pub refine: usize,
    /// Always start fine-tuning windows at frame 0.
    #[arg(long)]
    pub fixed_windows: bool,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// Sample id for `attn`; defaults to the first sample of `--split`.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Encoder block for `attn`; defaults to the last.
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    /// Cohort size for `gen-data`.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Square frame size for `gen-data` and `profile`.
    #[arg(long, default_value_t = 224)]
    pub image_size: usize,
    /// Frames per generated clip.
    #[arg(long, default_value_t = 36)]
    pub clip_frames: usize,
    /// Contour rows per phantom; points = rows * contour points.
    #[arg(long, default_value_t = 4)]
    pub rows: usize,
    #[arg(long, default_value_t = 21)]
    pub contour_points: usize,
    /// Peak longitudinal shortening per unit EF.
    #[arg(long)]
    pub amplitude: Option<f32>,
    /// Speckle grain, pixels.
    #[arg(long)]
    pub grain: Option<f32>,
    #[arg(long)]
    pub noise: Option<f32>,
    /// Replace the contents this command owns in a non-empty `--out`.
    #[arg(long)]
    pub force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match commands::run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
