//! Synchronous data-parallel gradients.
//!
//! A batch is cut into contiguous slices, one per worker thread. Each worker
//! sums its per-sample gradients in sample order; the coordinator then adds
//! the partial sums in worker-index order and divides by the batch size, so
//! the result depends only on the slicing and never on thread timing.

use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::Mode;
use crate::nn::model::{accumulate_sample_gradient, Model, SampleOutcome};
use crate::nn::params::ParamGrads;
use crate::tensor::{Real, Tensor};

/// One labelled window plus the seed of its dropout stream.
#[derive(Debug, Clone)]
pub struct BatchItem<T> {
    pub window: Tensor<T>,
    pub label: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome<T> {
    /// Mean gradient over the batch.
    pub grads: ParamGrads<T>,
    /// Per-sample results in batch order.
    pub samples: Vec<SampleOutcome>,
}

/// Sums worker gradients in the order given.
pub fn aggregate_gradients<T: Real>(worker_grads: &[ParamGrads<T>]) -> Result<ParamGrads<T>> {
    let (first, rest) = worker_grads
        .split_first()
        .ok_or_else(|| Error::Contract("no worker gradients to aggregate".into()))?;
    let mut acc = first.clone();
    for g in rest {
        acc.add_assign(g)?;
    }
    Ok(acc)
}

/// Contiguous `[start, end)` ranges splitting `n` items over at most
/// `workers` slices.
pub fn slice_ranges(n: usize, workers: usize) -> Vec<(usize, usize)> {
    let w = workers.max(1).min(n.max(1));
    let base = n / w;
    let extra = n % w;
    let mut out = Vec::with_capacity(w);
    let mut start = 0;
    for i in 0..w {
        let len = base + usize::from(i < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

fn run_slice<T: Real>(model: &Model<T>, items: &[BatchItem<T>], mode: Mode) -> Result<(ParamGrads<T>, Vec<SampleOutcome>)> {
    let mut acc = ParamGrads::zeros_like(&model.params);
    let mut samples = Vec::with_capacity(items.len());
    for item in items {
        let mut rng = ChaCha8Rng::seed_from_u64(item.seed);
        samples.push(accumulate_sample_gradient(model, &item.window, item.label, mode, &mut rng, &mut acc)?);
    }
    Ok((acc, samples))
}

/// Mean loss gradient over `items`, computed by `workers` threads.
pub fn batch_gradient<T: Real>(model: &Model<T>, items: &[BatchItem<T>], workers: usize, mode: Mode) -> Result<BatchOutcome<T>> {
    if items.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let ranges = slice_ranges(items.len(), workers);
    let parts: Vec<Result<(ParamGrads<T>, Vec<SampleOutcome>)>> = if ranges.len() == 1 {
        vec![run_slice(model, items, mode)]
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = ranges
                .iter()
                .map(|&(a, b)| s.spawn(move || run_slice(model, &items[a..b], mode)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    };
    let mut grads = Vec::with_capacity(parts.len());
    let mut samples = Vec::with_capacity(items.len());
    for p in parts {
        let (g, s) = p?;
        grads.push(g);
        samples.extend(s);
    }
    let mut total = aggregate_gradients(&grads)?;
    total.scale(T::one() / T::of(items.len() as f64));
    Ok(BatchOutcome { grads: total, samples })
}

/// Inference log-probabilities for every window, spread over `workers`
/// threads; output order matches input order.
pub fn predict_all<T: Real>(model: &Model<T>, windows: &[Tensor<T>], workers: usize) -> Result<Vec<Vec<T>>> {
    let ranges = slice_ranges(windows.len(), workers);
    let run = |a: usize, b: usize| windows[a..b].iter().map(|w| model.predict_log_probs(w)).collect::<Result<Vec<_>>>();
    let parts: Vec<Result<Vec<Vec<T>>>> = if ranges.len() <= 1 {
        vec![run(0, windows.len())]
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = ranges.iter().map(|&(a, b)| s.spawn(move || run(a, b))).collect();
            handles.into_iter().map(|h| h.join().expect("inference worker panicked")).collect()
        })
    };
    let mut out = Vec::with_capacity(windows.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
