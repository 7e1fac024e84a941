//! `terraseg` — the command-line surface of the segmentation framework:
//! dataset synthesis, training, tiled multi-scale inference, eroded-
//! boundary evaluation, gradient checking, and the six-variant ablation
//! ladder. Every command is deterministic given its configuration and
//! seed; run directories always carry the echoed config and a log.

mod commands;
mod config;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use terraseg_core::Error;

use crate::config::Profile;
use crate::runlog::RunLog;

#[derive(Parser)]
#[command(
    name = "terraseg",
    about = "CPU-only cascade-context semantic segmentation",
    version
)]
struct Cli {
    /// JSON config overriding the chosen profile key by key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named base profile.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: Profile,
    /// Run seed; overrides the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Execution is sequential either way; 1 is the
    /// reproducibility guarantee and the default.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (scenes, manifest, patch plan).
    GenData {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset's training split.
    Train {
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, loss curve, and logs.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict whole images from a checkpoint.
    Infer {
        /// Checkpoint directory (from train).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run directory for predictions.
        #[arg(long)]
        out: PathBuf,
        /// Single PPM image to predict.
        #[arg(long, conflicts_with_all = ["data", "split"])]
        image: Option<PathBuf>,
        /// Dataset directory; predicts every scene of --split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dataset split to predict.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score predictions against a split's ground truth.
    Eval {
        /// Dataset directory holding the ground truth.
        #[arg(long)]
        data: PathBuf,
        /// Split the predictions correspond to.
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory of pred_*.pgm (and optional probs_*.tsr) files.
        #[arg(long)]
        pred: PathBuf,
        /// Run directory for the report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify backward passes against finite differences.
    Gradcheck {
        /// Run directory for the report.
        #[arg(long)]
        out: PathBuf,
        /// Negate analytic gradients; the check must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Train and score the six-variant architecture ladder.
    Ablate {
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the comparison table.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::Graph(_) => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) => 3,
        Error::Diverged { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }

    let cfg = match config::load(cli.profile, cli.config.as_deref(), cli.seed) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for(&e));
        }
    };

    let mut log = RunLog::new();
    if cli.threads > 1 {
        log.line(format!(
            "note: --threads {} requested; execution is sequential and identical to --threads 1",
            cli.threads
        ));
    }

    let outcome = match &cli.cmd {
        Cmd::GenData { out } => commands::gen_data::run(&cfg, out, &mut log),
        Cmd::Train { data, out, resume } => {
            commands::train::run(&cfg, data, out, resume.as_deref(), &mut log)
        }
        Cmd::Infer { checkpoint, out, image, data, split } => {
            let args = commands::infer::InferArgs {
                checkpoint,
                image: image.as_deref(),
                data: data.as_deref(),
                split,
            };
            commands::infer::run(&cfg, &args, out, &mut log)
        }
        Cmd::Eval { data, split, pred, out } => {
            let args = commands::eval::EvalArgs { data, split, pred };
            commands::eval::run(&cfg, &args, out, &mut log)
        }
        Cmd::Gradcheck { out, inject_fault } => {
            commands::gradcheck::run(&cfg, *inject_fault, out, &mut log)
        }
        Cmd::Ablate { data, out } => commands::ablate::run(&cfg, data, out, &mut log),
    };

    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
