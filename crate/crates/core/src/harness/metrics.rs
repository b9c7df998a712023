//! Confusion counts and rates with patients as the positive class.

use std::collections::BTreeMap;

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Window,
    /// One sample per run (SVM baselines).
    Run,
    Subject,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Window => "window",
            Level::Run => "run",
            Level::Subject => "subject",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub level: Level,
    /// Mean cross-entropy, when known.
    pub loss: Option<f64>,
    pub accuracy: f64,
    /// `FP / (FP + TN)`; zero without negatives.
    pub fpr: f64,
    /// `FN / (FN + TP)`; zero without positives.
    pub fnr: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    pub fn from_counts(level: Level, tp: usize, fp: usize, tn: usize, fn_: usize, loss: Option<f64>) -> Self {
        Metrics {
            level,
            loss,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            fpr: ratio(fp, fp + tn),
            fnr: ratio(fn_, fn_ + tp),
            tp,
            fp,
            tn,
            fn_,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn compute_metrics(predictions: &[Label], labels: &[Label], level: Level, loss: Option<f64>) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::Contract("metrics over an empty prediction set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (Label::Patient, Label::Patient) => tp += 1,
            (Label::Patient, Label::Control) => fp += 1,
            (Label::Control, Label::Control) => tn += 1,
            (Label::Control, Label::Patient) => fn_ += 1,
        }
    }
    Ok(Metrics::from_counts(level, tp, fp, tn, fn_, loss))
}

/// Majority vote per subject over window predictions; ties go to patient.
/// Returns `(prediction, label)` per subject in subject order.
pub fn subject_votes(subjects: &[&str], predictions: &[Label], labels: &[Label]) -> Result<Vec<(Label, Label)>> {
    if subjects.len() != predictions.len() || subjects.len() != labels.len() {
        return Err(Error::Contract("subject, prediction and label lists differ in length".into()));
    }
    let mut tally: BTreeMap<&str, (usize, usize, Label)> = BTreeMap::new();
    for ((&s, &p), &l) in subjects.iter().zip(predictions).zip(labels) {
        let e = tally.entry(s).or_insert((0, 0, l));
        if e.2 != l {
            return Err(Error::Data(format!("subject `{s}` carries two labels")));
        }
        match p {
            Label::Patient => e.0 += 1,
            Label::Control => e.1 += 1,
        }
    }
    Ok(tally
        .into_values()
        .map(|(p, c, l)| (if p >= c { Label::Patient } else { Label::Control }, l))
        .collect())
}

pub fn subject_metrics(subjects: &[&str], predictions: &[Label], labels: &[Label]) -> Result<Metrics> {
    let votes = subject_votes(subjects, predictions, labels)?;
    let (p, l): (Vec<Label>, Vec<Label>) = votes.into_iter().unzip();
    compute_metrics(&p, &l, Level::Subject, None)
}

/// Sums confusion counts; the loss is weighted by sample count.
pub fn pooled(all: &[Metrics]) -> Result<Metrics> {
    let first = all.first().ok_or_else(|| Error::Contract("pooling zero metric sets".into()))?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    let mut loss = Some(0.0);
    let mut n = 0usize;
    for m in all {
        tp += m.tp;
        fp += m.fp;
        tn += m.tn;
        fn_ += m.fn_;
        n += m.total();
        loss = match (loss, m.loss) {
            (Some(a), Some(b)) => Some(a + b * m.total() as f64),
            _ => None,
        };
    }
    Ok(Metrics::from_counts(first.level, tp, fp, tn, fn_, loss.map(|l| l / n as f64)))
}

/// Unweighted mean of per-fold rates; counts are summed.
pub fn mean_of(all: &[Metrics]) -> Result<Metrics> {
    let p = pooled(all)?;
    let k = all.len() as f64;
    let avg = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / k;
    Ok(Metrics {
        loss: all.iter().map(|m| m.loss).sum::<Option<f64>>().map(|s| s / k),
        accuracy: avg(|m| m.accuracy),
        fpr: avg(|m| m.fpr),
        fnr: avg(|m| m.fnr),
        ..p
    })
}
