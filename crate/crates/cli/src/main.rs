//! `vitsr`: dataset synthesis, two-stage training, inference, evaluation and
//! gradient self-checks.

mod commands;
mod config;
mod infer;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vitsr::Error;

#[derive(Debug, Parser)]
#[command(
    name = "vitsr",
    version,
    about = "Vision-Transformer 4x super-resolution with colorization pretraining"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by the training commands.
#[derive(Debug, Args)]
#[command(after_help = config::keys_help())]
pub struct TrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root containing train/ and val/.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default runs/<command>).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Load encoder weights (and a resized positional table) from a checkpoint
    /// before training.
    #[arg(long)]
    pub init_encoder: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic PNG dataset with train/ and val/ splits.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Images placed in val/ (default: a quarter of --count). With 0 all
        /// images are written directly into --out.
        #[arg(long)]
        val_count: Option<usize>,
    },
    /// Stage 1: colorization pretraining.
    Pretrain(TrainArgs),
    /// Stage 2: super-resolution fine-tuning.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        /// Colorization checkpoint to start from; random initialization otherwise.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Keep the transferred output convolution instead of zeroing it.
        #[arg(long)]
        keep_output_conv: bool,
    },
    /// Super-resolve an image or every PNG in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Upscaling factor (default: the checkpoint's training scale).
        #[arg(long)]
        scale: Option<usize>,
    },
    /// PSNR/SSIM of a checkpoint and of the bicubic baseline.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Split to score: val or train. A dataset without split folders is
        /// scored as a whole.
        #[arg(long, default_value = "val")]
        split: String,
        /// JSON report path (default: <ckpt>.eval.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and of a micro model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 100)]
        model_samples: usize,
    },
}

/// Exit status for a failure: 1 usage or configuration, 2 data, 3 numerical.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<commands::GradcheckFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Contract(_)) => 1,
        Some(Error::NonFinite(_)) => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::MakeSynthetic {
            out,
            count,
            size,
            seed,
            val_count,
        } => commands::make_synthetic(&out, count, size, seed, val_count),
        Command::Pretrain(args) => commands::pretrain(&args),
        Command::Finetune {
            train,
            init_from,
            keep_output_conv,
        } => commands::finetune(&train, init_from.as_deref(), !keep_output_conv),
        Command::Infer {
            ckpt,
            input,
            out,
            scale,
        } => commands::infer(&ckpt, &input, &out, scale),
        Command::Eval {
            ckpt,
            dataset,
            split,
            out,
        } => commands::eval(&ckpt, &dataset, &split, out.as_deref()),
        Command::Gradcheck {
            seed,
            instances,
            model_samples,
        } => commands::gradcheck(seed, instances, model_samples),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
