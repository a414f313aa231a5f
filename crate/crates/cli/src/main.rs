mod commands;
mod config;
mod error;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliResult;

#[derive(Parser, Debug, Clone)]
#[command(name = "albedo", version, about = "Lighting-invariant albedo estimation on toy scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub run: RunArgs,

    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Output directory for this run; must be empty or absent.
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,

    /// Parent of numbered run directories when --run-dir is not given.
    #[arg(long, global = true, env = "ALBEDO_RUN_ROOT", default_value = "runs", value_name = "DIR")]
    pub run_root: PathBuf,
}

/// Config sources, applied in order: defaults, --config, --set, named flags.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// JSON config file; missing fields keep their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Assign any config field, e.g. `--set autoencoder.epochs=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,

    /// Weight of the invariant and positivity terms [default: 0.5].
    #[arg(long, global = true, help_heading = "Training")]
    pub lambda: Option<f64>,
    /// Probability of blurring the lighting latent per item [default: 0.5].
    #[arg(long, global = true, help_heading = "Training")]
    pub blur_prob: Option<f64>,
    /// Lower end of the blur sigma range, in latent pixels [default: 0.5].
    #[arg(long, global = true, help_heading = "Training")]
    pub blur_sigma_min: Option<f64>,
    /// Upper end of the blur sigma range, in latent pixels [default: 2.0].
    #[arg(long, global = true, help_heading = "Training")]
    pub blur_sigma_max: Option<f64>,
    /// Whether the consistency term enters the objective.
    #[arg(long, global = true, help_heading = "Training")]
    pub consistency: Option<bool>,
    /// Optimiser steps [default: 20000].
    #[arg(long, global = true, help_heading = "Training")]
    pub steps: Option<usize>,
    /// Scene pairs per step [default: 16].
    #[arg(long, global = true, help_heading = "Training")]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long, global = true, help_heading = "Training")]
    pub learning_rate: Option<f64>,
    /// Diffusion timesteps T [default: 1000].
    #[arg(long, global = true, help_heading = "Training")]
    pub timesteps: Option<usize>,
    /// Seed for batches, noise and dropout [default: 0].
    #[arg(long, global = true, help_heading = "Training")]
    pub train_seed: Option<u64>,

    /// DDIM steps per sample [default: 50].
    #[arg(long, global = true, help_heading = "Inference")]
    pub ddim_steps: Option<usize>,
    /// Classifier-free guidance scale [default: 1.5].
    #[arg(long, global = true, help_heading = "Inference")]
    pub guidance_scale: Option<f64>,
    /// Albedo samples averaged per image [default: 10].
    #[arg(long, global = true, help_heading = "Inference")]
    pub n_samples: Option<usize>,
    /// DDIM stochasticity; 0 is deterministic [default: 0].
    #[arg(long, global = true, help_heading = "Inference")]
    pub eta: Option<f64>,
    /// Base seed of the sampler [default: 0].
    #[arg(long, global = true, help_heading = "Inference")]
    pub infer_seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Generate a toy dataset.
    GenData(GenDataArgs),
    /// Train the autoencoder.
    TrainVae(DataArgs),
    /// Train the denoiser on top of a frozen autoencoder.
    Train(TrainArgs),
    /// Predict albedos for PNG images.
    Infer(InferArgs),
    /// Evaluate a denoiser on held-out scenes.
    Eval(EvalArgs),
    /// Lighting-latent statistics of a dataset.
    Analyze(AnalyzeArgs),
    /// Train and evaluate the full model and its three ablations.
    Ablate(AblateArgs),
    /// Re-execute a run from its snapshot into a new run directory.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    #[arg(long, default_value_t = 5)]
    pub lights: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace an existing dataset.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset directory; without it the scenes are generated from the config.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Frozen autoencoder checkpoint.
    #[arg(long, value_name = "FILE")]
    pub vae: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct InferArgs {
    #[arg(long, value_name = "FILE")]
    pub vae: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Input PNGs; all must share one size.
    #[arg(long = "input", value_name = "PNG", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Held-out dataset; without it the config's test split is generated.
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "FILE")]
    pub vae: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "FILE")]
    pub vae: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    /// Comma-separated subset of full,no_reg,no_consistency,no_blur.
    #[arg(long, value_delimiter = ',', default_value = "full,no_reg,no_consistency,no_blur")]
    pub variants: Vec<String>,
    /// Reuse a frozen autoencoder instead of training one.
    #[arg(long, value_name = "FILE")]
    pub vae: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// Run directory to reproduce.
    pub source: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&argv);
    match dispatch(cli, argv[1..].to_vec()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    commands::run(cli, argv, None)
}
