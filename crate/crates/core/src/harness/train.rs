//! Per-fold training with validation-based early stopping.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::normalize::{NormalizationScope, NormalizationStats};
use crate::data::Label;
use crate::error::{Error, Result};
use crate::harness::batches::{make_batches, window_pool, WindowRef};
use crate::harness::corpus::Corpus;
use crate::harness::folds::{FoldSplit, Split, DEFAULT_VAL_FRACTION};
use crate::harness::metrics::{compute_metrics, subject_metrics, Level, Metrics};
use crate::harness::mix_seed;
use crate::harness::parallel::{batch_gradient, predict_all, BatchItem};
use crate::nn::arch::ArchitectureSpec;
use crate::nn::layers::Mode;
use crate::nn::model::{predicted_class, Model};
use crate::optim::{adam_step, apply_l2, AdamState, OptimizerConfig};
use crate::tensor::{Real, Tensor};

/// Validation quantity that selects the checkpoint used for testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopMetric {
    #[default]
    Accuracy,
    Loss,
}

impl StopMetric {
    pub fn name(self) -> &'static str {
        match self {
            StopMetric::Accuracy => "accuracy",
            StopMetric::Loss => "loss",
        }
    }
}

impl fmt::Display for StopMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StopMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(StopMetric::Accuracy),
            "loss" => Ok(StopMetric::Loss),
            _ => Err(Error::Config(format!("early-stopping metric `{s}` is not accuracy or loss"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub window: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub workers: usize,
    pub stop_metric: StopMetric,
    pub normalization: NormalizationScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 64,
            batch_size: 64,
            epochs: 10,
            folds: 10,
            val_fraction: DEFAULT_VAL_FRACTION,
            seed: 0,
            workers: 1,
            stop_metric: StopMetric::Accuracy,
            normalization: NormalizationScope::TrainOnly,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(Error::Config("window, batch_size and workers must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("validation fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// One CSV row: `fold` and `epoch` are text so aggregate rows can use
/// `pooled`, `mean` and `best`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub fold: String,
    pub epoch: String,
    pub split: Split,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct FoldResult<T> {
    pub split: FoldSplit,
    /// Epoch whose parameters were tested; 0 means the initial parameters.
    pub best_epoch: usize,
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub stats: NormalizationStats,
    pub rows: Vec<MetricsRow>,
    pub test_window: Metrics,
    pub test_subject: Metrics,
}

/// Windows of one split with their labels and owners.
struct SplitWindows {
    refs: Vec<WindowRef>,
    labels: Vec<Label>,
    subjects: Vec<String>,
}

fn split_windows(corpus: &Corpus, subjects: &[String], window: usize) -> Result<SplitWindows> {
    let runs: Vec<(usize, usize)> = corpus.runs_of(subjects).into_iter().map(|r| (r, corpus.series[r].frames())).collect();
    let refs = window_pool(&runs, window)?;
    let labels = refs.iter().map(|w| corpus.series[w.run].label).collect();
    let subjects = refs.iter().map(|w| corpus.series[w.run].subject_id.clone()).collect();
    Ok(SplitWindows { refs, labels, subjects })
}

fn cut<T: Real>(runs: &[Tensor<T>], w: &WindowRef, window: usize) -> Result<Tensor<T>> {
    runs[w.run].slice_outer(w.offset, window)
}

/// Window- and subject-level metrics of `model` on `split`.
fn evaluate<T: Real>(model: &Model<T>, runs: &[Tensor<T>], split: &SplitWindows, window: usize, workers: usize) -> Result<(Metrics, Metrics)> {
    let windows = split.refs.iter().map(|w| cut(runs, w, window)).collect::<Result<Vec<_>>>()?;
    let log_probs = predict_all(model, &windows, workers)?;
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(windows.len());
    for (lp, &label) in log_probs.iter().zip(&split.labels) {
        loss -= lp[label.index()].as_f64();
        preds.push(Label::from_index(predicted_class(lp))?);
    }
    let loss = loss / windows.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite evaluation loss {loss}")));
    }
    let w = compute_metrics(&preds, &split.labels, Level::Window, Some(loss))?;
    let names: Vec<&str> = split.subjects.iter().map(String::as_str).collect();
    let s = subject_metrics(&names, &preds, &split.labels)?;
    Ok((w, s))
}

fn better(metric: StopMetric, candidate: &Metrics, best: &Metrics) -> bool {
    match metric {
        StopMetric::Accuracy => candidate.accuracy > best.accuracy,
        StopMetric::Loss => candidate.loss.unwrap_or(f64::INFINITY) < best.loss.unwrap_or(f64::INFINITY),
    }
}

/// Trains fresh parameters on `fold.train`, keeps the epoch with the best
/// validation score (earliest on ties), and tests that checkpoint.
pub fn train_fold<T: Real>(
    corpus: &Corpus,
    fold: &FoldSplit,
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
) -> Result<FoldResult<T>> {
    cfg.validate()?;
    opt.validate()?;
    let stats = corpus.stats(cfg.normalization, Some(&fold.train))?;
    let runs = corpus.normalized::<T>(&stats)?;
    let train = split_windows(corpus, &fold.train, cfg.window)?;
    let val = split_windows(corpus, &fold.val, cfg.window)?;
    let test = split_windows(corpus, &fold.test, cfg.window)?;
    if train.refs.is_empty() {
        return Err(Error::Data(format!("fold {} has no training windows", fold.fold)));
    }
    if test.refs.is_empty() {
        return Err(Error::Data(format!("fold {} has no test windows", fold.fold)));
    }

    let fold_seed = mix_seed(&[cfg.seed, fold.fold as u64]);
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[fold_seed, 0x1417]));
    let mut model = Model::<T>::new(spec.clone(), corpus.grid(), Some(corpus.mask.indices()), &mut init_rng)?;
    let mut adam = AdamState::new(&model.params);
    let fold_name = fold.fold.to_string();
    let mut rows = Vec::new();

    let mut best = (0usize, model.params.clone(), adam.clone());
    let mut best_val: Option<Metrics> = None;
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(&train.refs, cfg.batch_size, fold_seed, epoch)?;
        let mut loss_sum = 0.0;
        let mut preds = Vec::with_capacity(train.refs.len());
        let mut labels = Vec::with_capacity(train.refs.len());
        for (b, batch) in batches.iter().enumerate() {
            let items = batch
                .iter()
                .map(|w| {
                    let label = corpus.series[w.run].label;
                    labels.push(label);
                    Ok(BatchItem {
                        window: cut(&runs, w, cfg.window)?,
                        label: label.index(),
                        seed: mix_seed(&[fold_seed, epoch as u64, w.id as u64]),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out = batch_gradient(&model, &items, cfg.workers, Mode::Train)?;
            for s in &out.samples {
                if !s.loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite training loss in fold {} epoch {epoch} batch {b}",
                        fold.fold
                    )));
                }
                loss_sum += s.loss;
                preds.push(Label::from_index(s.predicted)?);
            }
            let mut grads = out.grads;
            apply_l2(&mut grads, &model.params, opt);
            adam_step(&mut model.params, &grads, &mut adam, opt).map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!("fold {} epoch {epoch} batch {b}: {m}", fold.fold)),
                other => other,
            })?;
        }
        let train_m = compute_metrics(&preds, &labels, Level::Window, Some(loss_sum / preds.len() as f64))?;
        rows.push(MetricsRow {
            fold: fold_name.clone(),
            epoch: epoch.to_string(),
            split: Split::Train,
            metrics: train_m,
        });

        if val.refs.is_empty() {
            best = (epoch, model.params.clone(), adam.clone());
            continue;
        }
        let (vw, vs) = evaluate(&model, &runs, &val, cfg.window, cfg.workers)?;
        for m in [vw, vs] {
            rows.push(MetricsRow {
                fold: fold_name.clone(),
                epoch: epoch.to_string(),
                split: Split::Val,
                metrics: m,
            });
        }
        if best_val.as_ref().is_none_or(|b| better(cfg.stop_metric, &vw, b)) {
            best_val = Some(vw);
            best = (epoch, model.params.clone(), adam.clone());
        }
    }

    let (best_epoch, params, adam) = best;
    model.params = params;
    let (tw, ts) = evaluate(&model, &runs, &test, cfg.window, cfg.workers)?;
    for m in [tw, ts] {
        rows.push(MetricsRow {
            fold: fold_name.clone(),
            epoch: best_epoch.to_string(),
            split: Split::Test,
            metrics: m,
        });
    }
    Ok(FoldResult {
        split: fold.clone(),
        best_epoch,
        model,
        adam,
        stats,
        rows,
        test_window: tw,
        test_subject: ts,
    })
}

/// Applies a trained model to every window of `subjects`.
pub fn evaluate_subjects<T: Real>(
    corpus: &Corpus,
    model: &Model<T>,
    stats: &NormalizationStats,
    subjects: &[String],
    window: usize,
    workers: usize,
) -> Result<(Metrics, Metrics)> {
    let runs = corpus.normalized::<T>(stats)?;
    let split = split_windows(corpus, subjects, window)?;
    if split.refs.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    evaluate(model, &runs, &split, window, workers)
}
