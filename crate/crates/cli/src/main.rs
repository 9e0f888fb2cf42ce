//! `egip`: synthetic data, augmentation, training, prediction, evaluation,
//! layer sweeps and the gradient self-check behind one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use egip_core::Error;

#[derive(Debug, Parser)]
#[command(name = "egip", version, about = "Enhancement-guided intelligibility prediction")]
pub struct Cli {
    /// Worker threads for fold training and evaluation (1 = bit-deterministic).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Output directory (overrides EGIP_OUT_DIR and the config's out_dir).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the seeded synthetic benchmark and its listener split.
    SynthGen(SynthGenArgs),
    /// Add 2-clips augmentations and optionally merge a normal-hearing set.
    Augment(AugmentArgs),
    /// Train a fold × enhancer ensemble.
    Train(TrainArgs),
    /// Score clips with a trained ensemble.
    Predict(PredictArgs),
    /// Score a manifest and report RMSE and NCC.
    Evaluate(EvaluateArgs),
    /// Train one reduced-budget model per encoder layer and pick the best.
    LayerSweep(LayerSweepArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub listeners: Option<usize>,
    #[arg(long)]
    pub clips_per_listener: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Clip length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Listener moved to the test split; repeatable. Default: the last three.
    #[arg(long = "holdout", value_name = "LISTENER")]
    pub holdout: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub per_listener: Option<usize>,
    /// Silence between the two clips, in seconds.
    #[arg(long)]
    pub silence: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Normal-hearing manifest appended after augmentation.
    #[arg(long, value_name = "MANIFEST")]
    pub nh: Option<PathBuf>,
    /// Only merge `--nh`; skip 2-clips augmentation.
    #[arg(long)]
    pub no_two_clips: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub huber_delta: Option<f64>,
    /// Encoder layer fed to the model.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Enhancer name; repeatable. Default: every configured enhancer.
    #[arg(long = "enhancer", value_name = "NAME")]
    pub enhancers: Vec<String>,
    /// Also evaluate on this manifest and write report.json / report.csv.
    #[arg(long, value_name = "MANIFEST")]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Restrict to these clip ids; repeatable.
    #[arg(long = "clip", value_name = "ID")]
    pub clips: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct LayerSweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_name = "NAME", default_value = "identity")]
    pub enhancer: String,
    /// Epoch budget per layer.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn one_line(s: &str) -> String {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        "config" => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), one_line(&e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
