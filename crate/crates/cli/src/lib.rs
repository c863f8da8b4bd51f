//! Command-line front end: dataset preparation, training, cross validation,
//! evaluation, attention export and complexity reporting.

mod attention;
mod augment;
pub mod complexity;
pub mod config;
mod error;
mod fit;
mod prepare;

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

pub use attention::{clip_attention, render_heatmap, ClipAttention};
pub use config::RunConfig;
pub use error::{exit_code, CliError, EXIT_IO, EXIT_NUMERIC, EXIT_OTHER, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(
    name = "acrnn",
    version,
    about = "Environmental sound classification with an attention-based convolutional recurrent network"
)]
pub struct Cli {
    /// Experiment config (TOML with [paths] [prepare] [model] [train] [augment]).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for initialization, shuffling, mixup, dropout and augmentation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for feature extraction.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,

    /// Output location (store directory for `prepare`, report directory otherwise).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract Log-GT segments for a dataset into a feature store.
    Prepare(PrepareArgs),
    /// Train on all folds but one and evaluate on the held-out fold.
    Train(TrainArgs),
    /// k-fold cross validation, optionally over the attention ablation grid.
    Cv(CvArgs),
    /// Evaluate a checkpoint on a fold or classify audio files.
    Eval(EvalArgs),
    /// Export attention weights of one clip as CSV plus a PGM heatmap.
    AttnViz(AttnArgs),
    /// Parameter and FLOP counts per layer.
    Complexity(ComplexityArgs),
    /// Write time-stretched and pitch-shifted copies of audio files.
    Augment(AugmentArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Dataset root holding `audio/` and `meta/esc50.csv`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Also store augmented copies of every clip.
    #[arg(long)]
    pub augment: bool,
    /// Restrict to the ESC-10 rows of the manifest.
    #[arg(long)]
    pub esc10: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Feature store written by `prepare`.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Held-out fold (1-based).
    #[arg(long)]
    pub fold: usize,
    /// Override `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    /// Feature store written by `prepare`.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Override `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Run every attention placement and write `ablation.csv`.
    #[arg(long)]
    pub ablation: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Feature store, needed with `--fold`.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Evaluate on the original clips of this fold.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Audio files to classify.
    pub clips: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Audio file to visualize.
    pub clip: PathBuf,
}

#[derive(Args, Debug)]
pub struct ComplexityArgs {
    /// Also list totals for every ablation configuration.
    #[arg(long)]
    pub grid: bool,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Audio files to augment.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Copies per input (default `augment.copies_per_clip`).
    #[arg(long)]
    pub copies: Option<usize>,
}

/// Flags shared by every command after config resolution.
pub(crate) struct Common {
    pub cfg: RunConfig,
    pub force: bool,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn out_dir(&self) -> anyhow::Result<PathBuf> {
        self.out
            .clone()
            .or_else(|| self.cfg.paths.out.clone())
            .ok_or_else(|| error::usage("no output directory (pass --out or set paths.out)"))
    }

    pub fn store_dir(&self, flag: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
        flag.clone()
            .or_else(|| self.cfg.paths.store.clone())
            .ok_or_else(|| error::usage("no feature store (pass --store or set paths.store)"))
    }

    pub fn checkpoint(&self, flag: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
        let path = flag
            .clone()
            .or_else(|| self.cfg.paths.checkpoint.clone())
            .ok_or_else(|| error::usage("no checkpoint (pass --checkpoint or set paths.checkpoint)"))?;
        if !path.is_file() {
            return Err(error::path_error(&path, "checkpoint not found"));
        }
        Ok(path)
    }

    /// Fails when any of `paths` exists and `--force` was not given.
    pub fn check_clobber(&self, paths: &[PathBuf]) -> anyhow::Result<()> {
        if self.force {
            return Ok(());
        }
        match paths.iter().find(|p| p.exists()) {
            Some(p) => Err(error::usage(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            ))),
            None => Ok(()),
        }
    }
}

pub(crate) fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| error::path_error(dir, format!("cannot create directory: {e}")))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if cli.jobs == Some(0) {
        return Err(error::usage("--jobs must be at least 1"));
    }
    let config_origin = cli.config.clone().unwrap_or_else(|| PathBuf::from("<defaults>"));
    let mut common = Common {
        cfg,
        force: cli.force,
        jobs: cli.jobs,
        out: cli.out,
    };
    match cli.command {
        Command::Prepare(args) => {
            common
                .cfg
                .augment
                .validate()
                .with_context(|| format!("in {}", config_origin.display()))?;
            prepare::run(&common, &args)
        }
        Command::Train(args) => {
            if let Some(e) = args.epochs {
                common.cfg.train.epochs = e;
            }
            fit::train(&common, &args)
        }
        Command::Cv(args) => {
            if let Some(e) = args.epochs {
                common.cfg.train.epochs = e;
            }
            fit::cv(&common, &args)
        }
        Command::Eval(args) => fit::eval(&common, &args),
        Command::AttnViz(args) => attention::run(&common, &args),
        Command::Complexity(args) => complexity::run(&common, &args),
        Command::Augment(args) => {
            if let Some(c) = args.copies {
                common.cfg.augment.copies_per_clip = c;
            }
            augment::run(&common, &args)
        }
    }
}
