//! `evdi`: dataset simulation, training, sampling, and evaluation for the
//! event-conditioned interpolation pipeline.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 I/O failure.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use evdi_core::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "evdi", version, about = "Event-guided frame interpolation pipeline")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the top-level seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training and tiling (default: all cores).
    #[arg(long, global = true, env = "EVDI_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic clips with paired events and write a dataset.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the base denoiser on a dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint stem; writes <stem>.json and <stem>.bin.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint at --out up to the configured steps.
        #[arg(long)]
        resume: bool,
    },
    /// Train the event-conditioned control module against a frozen base.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        /// Stem of the pretrained base checkpoint.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Sample frames forward from one keyframe.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        /// Keyframe span within the clip.
        #[arg(long, default_value_t = 0)]
        span: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample frames between two keyframes with two-side fusion.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value_t = 0)]
        span: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted frames against the dataset's ground truth.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Directory of predicted frame_NNNN.pgm files.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value_t = 0)]
        span: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline in one directory: simulate, train, sample, score.
    Reproduce {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> evdi_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> evdi_core::Result<()> {
    if let Some(n) = cli.threads {
        // ignore the error if a global pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate { out } => commands::cmd_simulate(&cfg, out),
        Command::Pretrain { data, out, resume } => {
            commands::cmd_pretrain(&cfg, data, out, *resume)
        }
        Command::Adapt {
            data,
            base,
            out,
            resume,
        } => commands::cmd_adapt(&cfg, data, base, out, *resume),
        Command::Generate {
            checkpoint,
            data,
            clip,
            span,
            out,
        } => commands::cmd_generate(&cfg, checkpoint, data, *clip, *span, out),
        Command::Interpolate {
            checkpoint,
            data,
            clip,
            span,
            out,
        } => commands::cmd_interpolate(&cfg, checkpoint, data, *clip, *span, out),
        Command::Evaluate {
            data,
            pred,
            clip,
            span,
            out,
        } => commands::cmd_evaluate(&cfg, data, pred, *clip, *span, out),
        Command::Reproduce { out } => commands::cmd_reproduce(&cfg, out),
    }
}

/// Parse arguments, run, and map errors to exit codes.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } => 2,
                _ => 1,
            }
        }
    }
}
