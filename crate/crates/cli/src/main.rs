//! Batch front end over the diffusion translation pipeline. Subcommands
//! cover the whole workflow: synthetic data generation, score/baseline/
//! heatmap training, guided translation, quality and recognition
//! evaluation, and the five-condition comparison run.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 runtime or
//! numerical failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use commands::SplitArg;
use config::RunConfig;
use emdiff::error::Error;

#[derive(Parser, Debug)]
#[command(
    name = "emdiff",
    version,
    about = "Energy-guided diffusion translation between paired image modalities"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the paired synthetic dataset plus source-only extras.
    GenData {
        /// JSON run config (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed override for the paired dataset.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional score network on the train split.
    TrainScore {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest (from gen-data).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unconditional baseline score network.
    TrainBaseline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the landmark heatmap extractor on the train split.
    TrainHeatmap {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate source-modality images with the guided reverse SDE.
    Translate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Conditional score checkpoint (score.nfsd).
        #[arg(long)]
        ckpt: PathBuf,
        /// Heatmap checkpoint; required when lambda_h > 0 with trained_net.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Which manifest split to translate.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score translated images against ground truth (PSNR, SSIM).
    EvalQuality {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest written by translate.
        #[arg(long)]
        translated: PathBuf,
        /// Source data manifest override (defaults to the recorded one).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Augmentation comparison: classifier with vs without translated extras.
    EvalFer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Translated extras manifest (from translate on the extra set).
        #[arg(long)]
        extra: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all five comparison conditions end to end, emit a CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Reduced budget for smoke runs.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> emdiff::Result<()> {
    match cli.cmd {
        Cmd::GenData { config, seed, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::gen_data(&cfg, seed, &out)
        }
        Cmd::TrainScore { config, data, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::train_score(&cfg, &data, &out)
        }
        Cmd::TrainBaseline { config, data, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::train_baseline(&cfg, &data, &out)
        }
        Cmd::TrainHeatmap { config, data, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::train_heatmap(&cfg, &data, &out)
        }
        Cmd::Translate {
            config,
            data,
            ckpt,
            heatmap,
            split,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::run_translate(&cfg, &data, &ckpt, heatmap.as_deref(), split, &out)
        }
        Cmd::EvalQuality {
            config,
            translated,
            data,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::eval_quality(&cfg, &translated, data.as_deref(), &out)
        }
        Cmd::EvalFer {
            config,
            data,
            extra,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::eval_fer(&cfg, &data, &extra, &out)
        }
        Cmd::Ablate { config, tiny, out } => {
            let cfg = RunConfig::load(config.as_deref())?;
            commands::ablate(&cfg, tiny, &out)
        }
    }
}

fn main() {
    // --help carries the full config-key reference with defaults
    let matches = Cli::command()
        .after_long_help(config::config_reference())
        .after_help("Run with --help for the full config key reference.")
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::NonFinite(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}
