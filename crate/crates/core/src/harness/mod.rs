//! Cross-validation, training, metrics, data-parallel gradients and the
//! synthetic corpus generator.

pub mod batches;
pub mod corpus;
pub mod experiment;
pub mod folds;
pub mod metrics;
pub mod parallel;
pub mod synth;
pub mod train;

pub use batches::{make_batches, window_pool, WindowRef};
pub use corpus::Corpus;
pub use experiment::{
    baseline_csv, metrics_csv, run_baseline, run_experiment, BaselineConfig, BaselineLevels, BaselineRow, ExperimentConfig,
    ExperimentResult, METRICS_HEADER,
};
pub use folds::{check_folds, make_folds, FoldSplit, Split};
pub use metrics::{compute_metrics, Level, Metrics};
pub use parallel::{aggregate_gradients, batch_gradient, BatchItem};
pub use synth::{matched_filter_class, synth_build, synth_generate, SynthConfig, SynthData};
pub use train::{evaluate_subjects, train_fold, FoldResult, MetricsRow, StopMetric, TrainConfig};

/// Folds a list of integers into one 64-bit seed (splitmix64 chaining).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
