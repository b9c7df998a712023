//! `voxflow`: synthetic data, cross-validated training, evaluation, SVM
//! baselines and gradient diagnostics from the command line.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voxflow::{Error, ErrorClass, Result};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "voxflow", version, about = "Recurrent-convolutional fMRI classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-signal synthetic dataset.
    Synth(Common),
    /// Cross-validated training; writes metrics.csv and one checkpoint per fold.
    Train(Common),
    /// Apply a checkpoint to every subject of a manifest.
    Eval(Common),
    /// Linear and RBF SVMs on supervoxel features.
    Baseline(Common),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Print the subject-level fold assignment.
    Folds(Common),
}

/// Flags shared by every subcommand. Each one overrides the config key of
/// the same name (dashes become underscores).
#[derive(Args, Default)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    #[arg(long, value_name = "PATH")]
    manifest: Option<String>,
    #[arg(long, value_name = "PATH")]
    mask: Option<String>,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<String>,
    /// lstm, rcnn-2-1, rcnn-1-2, rcnn-2-2-1, or rcnn[LxF,...]
    #[arg(long)]
    arch: Option<String>,
    /// Window length in frames.
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    folds: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    /// Comma-separated fold indices to train, or `all`.
    #[arg(long)]
    only_folds: Option<String>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    snr: Option<String>,
    #[arg(long)]
    subjects: Option<String>,
    #[arg(long)]
    runs: Option<String>,
    #[arg(long)]
    frames: Option<String>,
    /// XxYxZ
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    shuffle_labels: bool,
    /// Baseline sample unit: run, window or both.
    #[arg(long)]
    level: Option<String>,
    /// Any other key, as KEY=VALUE (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Break one backward rule on purpose (checker self-test).
    #[arg(long, hide = true, value_name = "OP")]
    corrupt: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let cwd = Path::new(".");
        let flags = [
            ("seed", &self.seed),
            ("out", &self.out),
            ("manifest", &self.manifest),
            ("mask", &self.mask),
            ("checkpoint", &self.checkpoint),
            ("arch", &self.arch),
            ("window_size", &self.window),
            ("folds", &self.folds),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("workers", &self.workers),
            ("only_folds", &self.only_folds),
            ("precision", &self.precision),
            ("snr", &self.snr),
            ("subjects", &self.subjects),
            ("runs", &self.runs),
            ("frames", &self.frames),
            ("grid", &self.grid),
            ("baseline_level", &self.level),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v, cwd).map_err(|e| flag_error(key, e))?;
            }
        }
        if self.shuffle_labels {
            cfg.set("shuffle_labels", "true", cwd)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v, cwd)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn flag_error(key: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("flag for `{key}`: {m}")),
        other => other,
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Divergence => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(c) => c.resolve().and_then(|cfg| commands::synth(&cfg)),
        Command::Train(c) => c.resolve().and_then(|cfg| commands::train(&cfg)),
        Command::Eval(c) => c.resolve().and_then(|cfg| commands::eval(&cfg)),
        Command::Baseline(c) => c.resolve().and_then(|cfg| commands::baseline(&cfg)),
        Command::Gradcheck(g) => g.common.resolve().and_then(|_| commands::gradcheck(g.corrupt.as_deref())),
        Command::Folds(c) => c.resolve().and_then(|cfg| commands::folds(&cfg)),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
