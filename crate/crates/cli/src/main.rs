mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Latency-aware architecture search and training for multi-exposure fusion.
#[derive(Debug, Parser)]
#[command(name = "mefnas", version)]
pub struct Cli {
    /// Flat `key = value` file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true, env = "MEFNAS_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic exposure-pair dataset.
    Synth(SynthArgs),
    /// Measures per-operator latency and writes a lookup table.
    Bench(BenchArgs),
    /// Searches an architecture under a latency table.
    Search(SearchArgs),
    /// Trains a genotype and writes checkpoints.
    Train(TrainArgs),
    /// Fuses one under/over pair with a trained model.
    Fuse(FuseArgs),
    /// Scores a model on a dataset, or one image against a reference.
    Eval(EvalArgs),
    /// Trains the variants of one ablation and writes a table.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    /// Square size; `--height`/`--width` override it.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub misaligned: Option<bool>,
    /// Under-exposure in stops (<= 0).
    #[arg(long, allow_hyphen_values = true)]
    pub under: Option<f64>,
    /// Over-exposure in stops (>= 0).
    #[arg(long)]
    pub over: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub max_translation: Option<f64>,
    #[arg(long)]
    pub max_rotation: Option<f64>,
    #[arg(long)]
    pub max_scale_delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `all` or a comma-separated list of operator names.
    #[arg(long)]
    pub ops: Option<String>,
    /// Reference input shape `C,H,W`.
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct NetArgs {
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub cascade: Option<usize>,
    /// Enables feature alignment for misaligned pairs.
    #[arg(long)]
    pub misaligned: Option<bool>,
}

#[derive(Debug, Args)]
pub struct SearchOpts {
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub search_epochs: Option<usize>,
    #[arg(long)]
    pub weight_lr: Option<f64>,
    #[arg(long)]
    pub arch_lr: Option<f64>,
    #[arg(long)]
    pub search_batch_size: Option<usize>,
    /// Search crop size; 0 uses whole images.
    #[arg(long)]
    pub search_patch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub search: SearchOpts,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training crop size; 0 trains on whole frames.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub gp_weight: Option<f64>,
    #[arg(long)]
    pub disc_channels: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub genotype: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continues from the newest checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub under: Option<PathBuf>,
    #[arg(long)]
    pub over: Option<PathBuf>,
    /// Training directory or checkpoint file.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Scores this image against `--reference` instead of running a model.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// One of srsm_cascade, dasm, losses, search_space, eta.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Latency table; required by `eta`.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Operator family of the fixed variants.
    #[arg(long)]
    pub family: Option<String>,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub search: SearchOpts,
    #[command(flatten)]
    pub train: TrainOpts,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    match commands::run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = commands::exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
