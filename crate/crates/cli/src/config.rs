//! Flat `key = value` run configuration.
//!
//! Values come from three layers: built-in defaults, an optional config
//! file, then command-line flags. Every key is validated when set, unknown
//! keys are rejected, and [`RunConfig::resolved`] writes the effective
//! settings in a form that parses back to the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use voxflow::autodiff::kernels::Padding;
use voxflow::data::supervoxel::DEFAULT_RATE;
use voxflow::harness::{BaselineLevels, SynthConfig, TrainConfig};
use voxflow::nn::arch::{parse_blocks, ArchitectureSpec, FlattenScope};
use voxflow::optim::OptimizerConfig;
use voxflow::svm::KernelFamily;
use voxflow::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// A reference model name, or `lstm[]` / `rcnn[LxF,...]` block syntax.
    pub arch: String,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub dropout: f64,
    pub padding: Padding,
    pub flatten_scope: FlattenScope,
    pub precision: Precision,
    pub train: TrainConfig,
    pub optim: OptimizerConfig,
    pub only_folds: Option<Vec<usize>>,
    pub synth: SynthConfig,
    pub baseline_level: BaselineLevels,
    pub svm_kernels: Vec<KernelFamily>,
    pub svm_tol: f64,
    pub supervoxel_rate: [usize; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ArchitectureSpec::lstm();
        RunConfig {
            manifest: None,
            mask: None,
            out: PathBuf::from("voxflow-out"),
            checkpoint: None,
            arch: "rcnn-2-1".into(),
            lstm_layers: spec.lstm_layers,
            lstm_hidden: spec.lstm_hidden,
            dropout: spec.dropout,
            padding: spec.padding,
            flatten_scope: spec.flatten_scope,
            precision: Precision::F32,
            train: TrainConfig::default(),
            optim: OptimizerConfig::default(),
            only_folds: None,
            synth: SynthConfig::default(),
            baseline_level: BaselineLevels { run: true, window: false },
            svm_kernels: vec![KernelFamily::Linear, KernelFamily::Rbf],
            svm_tol: 1e-3,
            supervoxel_rate: DEFAULT_RATE,
        }
    }
}

/// Every accepted key, in the order `resolved` writes them.
pub const KEYS: &[&str] = &[
    "manifest",
    "mask",
    "out",
    "checkpoint",
    "seed",
    "arch",
    "lstm_layers",
    "lstm_hidden",
    "dropout",
    "padding",
    "flatten_scope",
    "precision",
    "window_size",
    "batch_size",
    "epochs",
    "folds",
    "val_fraction",
    "only_folds",
    "workers",
    "stop_metric",
    "normalization_scope",
    "lr",
    "beta1",
    "beta2",
    "epsilon",
    "l2_lambda",
    "l2_factor",
    "subjects",
    "runs",
    "grid",
    "frames",
    "snr",
    "shuffle_labels",
    "baseline_level",
    "svm_kernels",
    "svm_tol",
    "supervoxel_rate",
];

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("`{key}` expects {expected}, got `{value}`"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, v, "a non-negative integer"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(bad(key, v, "a finite number")),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn parse_triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split('x').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad(key, v, "XxYxZ"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| bad(key, v, "XxYxZ"))?;
    }
    Ok(out)
}

fn triple(t: [usize; 3]) -> String {
    format!("{}x{}x{}", t[0], t[1], t[2])
}

fn parse_path(v: &str, base: &Path) -> Option<PathBuf> {
    if v.is_empty() {
        None
    } else {
        let p = PathBuf::from(v);
        Some(if p.is_absolute() { p } else { base.join(p) })
    }
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key. Relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let v = value.trim();
        match key {
            "manifest" => self.manifest = parse_path(v, base),
            "mask" => self.mask = parse_path(v, base),
            "out" => self.out = parse_path(v, base).ok_or_else(|| bad(key, v, "a directory"))?,
            "checkpoint" => self.checkpoint = parse_path(v, base),
            "seed" => {
                let s = v.parse().map_err(|_| bad(key, v, "a 64-bit unsigned integer"))?;
                self.train.seed = s;
                self.synth.seed = s;
            }
            "arch" => {
                arch_base(v)?;
                self.arch = v.to_string();
            }
            "lstm_layers" => self.lstm_layers = parse_usize(key, v)?,
            "lstm_hidden" => self.lstm_hidden = parse_usize(key, v)?,
            "dropout" => self.dropout = parse_f64(key, v)?,
            "padding" => self.padding = v.parse()?,
            "flatten_scope" => self.flatten_scope = v.parse()?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, v, "f32 or f64")),
                }
            }
            "window_size" => self.train.window = parse_usize(key, v)?,
            "batch_size" => self.train.batch_size = parse_usize(key, v)?,
            "epochs" => self.train.epochs = parse_usize(key, v)?,
            "folds" => self.train.folds = parse_usize(key, v)?,
            "val_fraction" => self.train.val_fraction = parse_f64(key, v)?,
            "only_folds" => {
                self.only_folds = if v.is_empty() || v == "all" {
                    None
                } else {
                    Some(v.split(',').map(|f| parse_usize(key, f.trim())).collect::<Result<_>>()?)
                }
            }
            "workers" => self.train.workers = parse_usize(key, v)?,
            "stop_metric" => self.train.stop_metric = v.parse()?,
            "normalization_scope" => self.train.normalization = v.parse()?,
            "lr" => self.optim.learning_rate = parse_f64(key, v)?,
            "beta1" => self.optim.beta1 = parse_f64(key, v)?,
            "beta2" => self.optim.beta2 = parse_f64(key, v)?,
            "epsilon" => self.optim.epsilon = parse_f64(key, v)?,
            "l2_lambda" => self.optim.l2_lambda = parse_f64(key, v)?,
            "l2_factor" => self.optim.l2_factor = parse_f64(key, v)?,
            "subjects" => self.synth.subjects = parse_usize(key, v)?,
            "runs" => self.synth.runs = parse_usize(key, v)?,
            "grid" => self.synth.grid = parse_triple(key, v)?,
            "frames" => self.synth.frames = parse_usize(key, v)?,
            "snr" => self.synth.snr = parse_f64(key, v)?,
            "shuffle_labels" => self.synth.shuffle_labels = parse_bool(key, v)?,
            "baseline_level" => {
                self.baseline_level = match v {
                    "run" => BaselineLevels { run: true, window: false },
                    "window" => BaselineLevels { run: false, window: true },
                    "both" => BaselineLevels { run: true, window: true },
                    _ => return Err(bad(key, v, "run, window or both")),
                }
            }
            "svm_kernels" => {
                let mut ks = Vec::new();
                for k in v.split(',').map(str::trim) {
                    let fam = match k {
                        "linear" => KernelFamily::Linear,
                        "rbf" => KernelFamily::Rbf,
                        _ => return Err(bad(key, v, "a list of linear, rbf")),
                    };
                    if !ks.contains(&fam) {
                        ks.push(fam);
                    }
                }
                self.svm_kernels = ks;
            }
            "svm_tol" => self.svm_tol = parse_f64(key, v)?,
            "supervoxel_rate" => self.supervoxel_rate = parse_triple(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a config file's lines on top of `self`. Blank lines and `#`
    /// comments are ignored; relative paths are taken from the file's
    /// directory.
    pub fn apply_text(&mut self, text: &str, base: &Path, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v, base)
                .map_err(|e| Error::Config(format!("{origin}:{}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.apply_text(&text, base, &path.display().to_string())?;
        Ok(cfg)
    }

    /// The effective architecture.
    pub fn spec(&self) -> Result<ArchitectureSpec> {
        let mut spec = arch_base(&self.arch)?;
        spec.lstm_layers = self.lstm_layers;
        spec.lstm_hidden = self.lstm_hidden;
        spec.dropout = self.dropout;
        spec.padding = self.padding;
        spec.flatten_scope = self.flatten_scope;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        self.train.validate()?;
        self.optim.validate()?;
        self.synth.validate()?;
        if self.supervoxel_rate.contains(&0) {
            return Err(Error::Config("supervoxel_rate entries must be positive".into()));
        }
        if !(self.svm_tol > 0.0) {
            return Err(Error::Config(format!("svm_tol must be positive, got {}", self.svm_tol)));
        }
        if self.svm_kernels.is_empty() {
            return Err(Error::Config("svm_kernels is empty".into()));
        }
        if let Some(f) = self.only_folds.as_ref().and_then(|l| l.iter().find(|&&f| f >= self.train.folds)) {
            return Err(Error::Config(format!("only_folds names fold {f} but folds = {}", self.train.folds)));
        }
        Ok(())
    }

    /// Every effective setting as `key = value` lines, paths made absolute.
    pub fn resolved(&self) -> String {
        let abs = |p: &Option<PathBuf>| -> Option<PathBuf> {
            p.as_ref().map(|p| std::path::absolute(p).unwrap_or_else(|_| p.clone()))
        };
        let mut s = String::from("# effective settings; feed back with --config to reproduce\n");
        for &key in KEYS {
            let v = match key {
                "manifest" => path_text(&abs(&self.manifest)),
                "mask" => path_text(&abs(&self.mask)),
                "out" => path_text(&abs(&Some(self.out.clone()))),
                "checkpoint" => path_text(&abs(&self.checkpoint)),
                "seed" => self.train.seed.to_string(),
                "arch" => self.arch.clone(),
                "lstm_layers" => self.lstm_layers.to_string(),
                "lstm_hidden" => self.lstm_hidden.to_string(),
                "dropout" => self.dropout.to_string(),
                "padding" => self.padding.name().into(),
                "flatten_scope" => self.flatten_scope.name().into(),
                "precision" => match self.precision {
                    Precision::F32 => "f32".into(),
                    Precision::F64 => "f64".into(),
                },
                "window_size" => self.train.window.to_string(),
                "batch_size" => self.train.batch_size.to_string(),
                "epochs" => self.train.epochs.to_string(),
                "folds" => self.train.folds.to_string(),
                "val_fraction" => self.train.val_fraction.to_string(),
                "only_folds" => match &self.only_folds {
                    None => "all".into(),
                    Some(l) => l.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(","),
                },
                "workers" => self.train.workers.to_string(),
                "stop_metric" => self.train.stop_metric.name().into(),
                "normalization_scope" => self.train.normalization.name().into(),
                "lr" => self.optim.learning_rate.to_string(),
                "beta1" => self.optim.beta1.to_string(),
                "beta2" => self.optim.beta2.to_string(),
                "epsilon" => self.optim.epsilon.to_string(),
                "l2_lambda" => self.optim.l2_lambda.to_string(),
                "l2_factor" => self.optim.l2_factor.to_string(),
                "subjects" => self.synth.subjects.to_string(),
                "runs" => self.synth.runs.to_string(),
                "grid" => triple(self.synth.grid),
                "frames" => self.synth.frames.to_string(),
                "snr" => self.synth.snr.to_string(),
                "shuffle_labels" => self.synth.shuffle_labels.to_string(),
                "baseline_level" => match (self.baseline_level.run, self.baseline_level.window) {
                    (true, true) => "both".into(),
                    (false, true) => "window".into(),
                    _ => "run".into(),
                },
                "svm_kernels" => self.svm_kernels.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
                "svm_tol" => self.svm_tol.to_string(),
                "supervoxel_rate" => triple(self.supervoxel_rate),
                _ => unreachable!("every key is listed"),
            };
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Parses `arch`: one of the reference names, `lstm[]`, or
/// `rcnn[2x16,1x32]` (layers x filters per block).
pub fn arch_base(v: &str) -> Result<ArchitectureSpec> {
    if let Some(body) = v.strip_prefix("rcnn[").and_then(|r| r.strip_suffix(']')) {
        let blocks = parse_blocks(body)?;
        if blocks.is_empty() {
            return Err(Error::Config("rcnn[...] needs at least one block".into()));
        }
        let pairs: Vec<(usize, usize)> = blocks.iter().map(|b| (b.layers, b.filters)).collect();
        return Ok(ArchitectureSpec::rcnn(&pairs));
    }
    if v == "lstm[]" {
        return Ok(ArchitectureSpec::lstm());
    }
    ArchitectureSpec::named(v)
}
