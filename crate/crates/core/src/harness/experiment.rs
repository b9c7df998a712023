//! Cross-validated experiments and their CSV reports.

use std::fmt::Write as _;

use crate::data::supervoxel::SupervoxelLayout;
use crate::data::Label;
use crate::error::{Error, Result};
use crate::harness::corpus::Corpus;
use crate::harness::folds::{make_folds, FoldSplit, Split};
use crate::harness::metrics::{compute_metrics, mean_of, pooled, subject_metrics, Level, Metrics};
use crate::harness::train::{train_fold, FoldResult, MetricsRow, TrainConfig};
use crate::nn::arch::ArchitectureSpec;
use crate::optim::OptimizerConfig;
use crate::svm::{grid_search, svm_predict, KernelFamily};
use crate::tensor::Real;

pub const METRICS_HEADER: &str = "fold,epoch,split,level,loss,accuracy,fpr,fnr,tp,fp,tn,fn";

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub spec: ArchitectureSpec,
    pub train: TrainConfig,
    pub optim: OptimizerConfig,
    /// Restrict training to these fold indices; `None` runs every fold.
    pub only_folds: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult<T> {
    pub folds: Vec<FoldSplit>,
    pub results: Vec<FoldResult<T>>,
    pub rows: Vec<MetricsRow>,
}

/// Pooled-count and mean-of-folds rows over the test metrics of each level.
pub fn aggregate_rows(per_fold: &[(Metrics, Metrics)]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (name, agg) in [("pooled", pooled as fn(&[Metrics]) -> Result<Metrics>), ("mean", mean_of)] {
        for pick in [0usize, 1] {
            let ms: Vec<Metrics> = per_fold.iter().map(|p| if pick == 0 { p.0 } else { p.1 }).collect();
            rows.push(MetricsRow {
                fold: name.into(),
                epoch: "best".into(),
                split: Split::Test,
                metrics: agg(&ms)?,
            });
        }
    }
    Ok(rows)
}

/// Trains every selected fold. `on_fold` sees each fold result as soon as
/// it is ready (for checkpointing and progress output).
pub fn run_experiment<T: Real>(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    mut on_fold: impl FnMut(&FoldResult<T>) -> Result<()>,
) -> Result<ExperimentResult<T>> {
    cfg.train.validate()?;
    let folds = make_folds(&corpus.subjects(), cfg.train.folds, cfg.train.val_fraction, cfg.train.seed)?;
    let selected: Vec<usize> = match &cfg.only_folds {
        Some(list) => {
            if let Some(bad) = list.iter().find(|&&f| f >= folds.len()) {
                return Err(Error::Config(format!("fold {bad} does not exist ({} folds)", folds.len())));
            }
            list.clone()
        }
        None => (0..folds.len()).collect(),
    };
    let mut results = Vec::with_capacity(selected.len());
    let mut rows = Vec::new();
    for &f in &selected {
        let r = train_fold::<T>(corpus, &folds[f], &cfg.spec, &cfg.train, &cfg.optim)?;
        on_fold(&r)?;
        rows.extend(r.rows.iter().cloned());
        results.push(r);
    }
    let tests: Vec<(Metrics, Metrics)> = results.iter().map(|r| (r.test_window, r.test_subject)).collect();
    rows.extend(aggregate_rows(&tests)?);
    Ok(ExperimentResult { folds, results, rows })
}

fn fmt_row(out: &mut String, prefix: Option<&str>, r: &MetricsRow) {
    let m = &r.metrics;
    if let Some(p) = prefix {
        let _ = write!(out, "{p},");
    }
    let loss = m.loss.map_or_else(String::new, |l| format!("{l:.8}"));
    let _ = writeln!(
        out,
        "{},{},{},{},{loss},{:.8},{:.8},{:.8},{},{},{},{}",
        r.fold,
        r.epoch,
        r.split.name(),
        m.level.name(),
        m.accuracy,
        m.fpr,
        m.fnr,
        m.tp,
        m.fp,
        m.tn,
        m.fn_
    );
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        fmt_row(&mut out, None, r);
    }
    out
}

/// Which sample unit the SVM baselines use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineLevels {
    pub run: bool,
    pub window: bool,
}

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub train: TrainConfig,
    pub rate: [usize; 3],
    pub levels: BaselineLevels,
    pub tol: f64,
    pub kernels: Vec<KernelFamily>,
}

/// One baseline row: the model name prefixes the usual metric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub model: String,
    pub row: MetricsRow,
}

pub fn baseline_csv(rows: &[BaselineRow]) -> String {
    let mut out = format!("model,{METRICS_HEADER}\n");
    for r in rows {
        fmt_row(&mut out, Some(&r.model), &r.row);
    }
    out
}

struct Samples {
    x: Vec<Vec<f64>>,
    y: Vec<i8>,
    labels: Vec<Label>,
    subjects: Vec<String>,
}

fn to_pm(l: Label) -> i8 {
    if l == Label::Patient {
        1
    } else {
        -1
    }
}

fn baseline_samples(
    corpus: &Corpus,
    runs: &[crate::tensor::Tensor<f64>],
    layout: &SupervoxelLayout,
    subjects: &[String],
    window: Option<usize>,
) -> Result<Samples> {
    let mut s = Samples {
        x: Vec::new(),
        y: Vec::new(),
        labels: Vec::new(),
        subjects: Vec::new(),
    };
    for r in corpus.runs_of(subjects) {
        let feats = layout.downsample(&runs[r])?;
        let frames = feats.shape()[0];
        let width = feats.shape()[1];
        let series = &corpus.series[r];
        let mut push = |v: Vec<f64>| {
            s.x.push(v);
            s.y.push(to_pm(series.label));
            s.labels.push(series.label);
            s.subjects.push(series.subject_id.clone());
        };
        match window {
            None => push(feats.into_vec()),
            Some(t) => {
                for off in crate::data::windows::enumerate_windows(frames, t)? {
                    push(feats.data()[off * width..(off + t) * width].to_vec());
                }
            }
        }
    }
    Ok(s)
}

/// Linear and RBF SVMs per fold on supervoxel features, with the
/// hyperparameter grid searched on the validation subjects.
pub fn run_baseline(corpus: &Corpus, cfg: &BaselineConfig) -> Result<Vec<BaselineRow>> {
    cfg.train.validate()?;
    let folds = make_folds(&corpus.subjects(), cfg.train.folds, cfg.train.val_fraction, cfg.train.seed)?;
    let layout = SupervoxelLayout::new(&corpus.mask, cfg.rate)?;
    let mut units: Vec<(&str, Option<usize>, Level)> = Vec::new();
    if cfg.levels.run {
        units.push(("run", None, Level::Run));
    }
    if cfg.levels.window {
        units.push(("window", Some(cfg.train.window), Level::Window));
    }
    if units.is_empty() {
        return Err(Error::Config("baseline needs at least one sample level".into()));
    }
    let mut per_model: Vec<(String, Vec<(Metrics, Metrics)>)> = Vec::new();
    let mut rows = Vec::new();
    for fold in &folds {
        let stats = corpus.stats(cfg.train.normalization, Some(&fold.train))?;
        let runs = corpus.normalized::<f64>(&stats)?;
        for &(unit, window, level) in &units {
            let tr = baseline_samples(corpus, &runs, &layout, &fold.train, window)?;
            let va = baseline_samples(corpus, &runs, &layout, &fold.val, window)?;
            let te = baseline_samples(corpus, &runs, &layout, &fold.test, window)?;
            for &family in &cfg.kernels {
                let name = format!("{}-{unit}", family.name());
                let found = grid_search(&tr.x, &tr.y, &va.x, &va.y, family, cfg.tol)?;
                let preds = te
                    .x
                    .iter()
                    .map(|x| svm_predict(&found.model, x).map(|(c, _)| if c > 0 { Label::Patient } else { Label::Control }))
                    .collect::<Result<Vec<_>>>()?;
                let sample_m = compute_metrics(&preds, &te.labels, level, None)?;
                let names: Vec<&str> = te.subjects.iter().map(String::as_str).collect();
                let subject_m = subject_metrics(&names, &preds, &te.labels)?;
                for m in [sample_m, subject_m] {
                    rows.push(BaselineRow {
                        model: name.clone(),
                        row: MetricsRow {
                            fold: fold.fold.to_string(),
                            epoch: "0".into(),
                            split: Split::Test,
                            metrics: m,
                        },
                    });
                }
                match per_model.iter_mut().find(|(n, _)| n == &name) {
                    Some((_, v)) => v.push((sample_m, subject_m)),
                    None => per_model.push((name, vec![(sample_m, subject_m)])),
                }
            }
        }
    }
    for (name, tests) in per_model {
        for row in aggregate_rows(&tests)? {
            rows.push(BaselineRow { model: name.clone(), row });
        }
    }
    Ok(rows)
}
