//! Three-step signal normalization.
//!
//! 1. Remove each voxel's temporal mean (per run).
//! 2. Divide the run by the SD over all in-mask voxels and frames.
//! 3. Standardize every voxel with a mean and SD pooled over a corpus.
//!
//! All arithmetic is done in `f64`. Out-of-mask voxels are zero after every
//! step.

use std::fmt;
use std::str::FromStr;

use crate::data::mask::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step-3 standard deviations are floored here.
pub const SD_FLOOR: f64 = 1e-8;

/// Which runs contribute to the step-3 statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizationScope {
    /// Training subjects only, so held-out data cannot influence the stats.
    #[default]
    TrainOnly,
    /// Every run in the corpus.
    AllSubjects,
}

impl NormalizationScope {
    pub fn name(self) -> &'static str {
        match self {
            NormalizationScope::TrainOnly => "train-only",
            NormalizationScope::AllSubjects => "all-subjects",
        }
    }
}

impl fmt::Display for NormalizationScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormalizationScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-only" => Ok(NormalizationScope::TrainOnly),
            "all-subjects" => Ok(NormalizationScope::AllSubjects),
            _ => Err(Error::Config(format!(
                "normalization scope `{s}` is not one of train-only, all-subjects"
            ))),
        }
    }
}

/// Pooled per-voxel mean and SD. Out-of-mask entries hold mean 0 and SD 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub scope: NormalizationScope,
    pub grid: [usize; 3],
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Steps 1 and 2 on one run.
pub fn demean_and_scale(data: &Tensor<f32>, mask: &Mask) -> Result<Tensor<f64>> {
    mask.check_series(data)?;
    let frames = data.shape()[0];
    let n = mask.values().len();
    let src = data.data();
    let mut out = vec![0f64; frames * n];
    let mut total = 0f64;
    let mut total_sq = 0f64;
    for (v, &inside) in mask.values().iter().enumerate() {
        if !inside {
            continue;
        }
        let mean = (0..frames).map(|t| src[t * n + v] as f64).sum::<f64>() / frames as f64;
        for t in 0..frames {
            let d = src[t * n + v] as f64 - mean;
            out[t * n + v] = d;
            total += d;
            total_sq += d * d;
        }
    }
    let count = (frames * mask.count()) as f64;
    if count == 0.0 {
        return Err(Error::Degenerate("mask selects no voxels".into()));
    }
    let mu = total / count;
    let sd = (total_sq / count - mu * mu).max(0.0).sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Degenerate(format!(
            "whole-brain SD is {sd} after demeaning; the run is constant in time"
        )));
    }
    for v in &mut out {
        *v /= sd;
    }
    Tensor::from_vec(data.shape(), out)
}

impl NormalizationStats {
    /// Pools frames of every run in `runs` (outputs of [`demean_and_scale`]).
    pub fn compute<'a>(runs: impl IntoIterator<Item = &'a Tensor<f64>>, mask: &Mask, scope: NormalizationScope) -> Result<Self> {
        let n = mask.values().len();
        let mut sum = vec![0f64; n];
        let mut frames = 0usize;
        let mut kept: Vec<&Tensor<f64>> = Vec::new();
        for run in runs {
            mask.check_series(run)?;
            for frame in run.data().chunks_exact(n) {
                for (s, &x) in sum.iter_mut().zip(frame) {
                    *s += x;
                }
            }
            frames += run.shape()[0];
            kept.push(run);
        }
        if frames == 0 {
            return Err(Error::Data("no runs to compute normalization statistics from".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / frames as f64).collect();
        let mut sq = vec![0f64; n];
        for run in kept {
            for frame in run.data().chunks_exact(n) {
                for ((s, &x), &m) in sq.iter_mut().zip(frame).zip(&mean) {
                    let d = x - m;
                    *s += d * d;
                }
            }
        }
        let mut stats = NormalizationStats {
            scope,
            grid: mask.shape(),
            mean,
            sd: sq.iter().map(|s| (s / frames as f64).sqrt().max(SD_FLOOR)).collect(),
        };
        for (v, &inside) in mask.values().iter().enumerate() {
            if !inside {
                stats.mean[v] = 0.0;
                stats.sd[v] = 1.0;
            }
        }
        Ok(stats)
    }

    /// Step 3 on one run.
    pub fn apply(&self, run: &Tensor<f64>, mask: &Mask) -> Result<Tensor<f64>> {
        mask.check_series(run)?;
        if mask.shape() != self.grid {
            return Err(Error::Shape(format!("stats grid {:?} vs mask {:?}", self.grid, mask.shape())));
        }
        let n = mask.values().len();
        let mut out = run.clone();
        for frame in out.data_mut().chunks_exact_mut(n) {
            for (v, x) in frame.iter_mut().enumerate() {
                *x = if mask.values()[v] { (*x - self.mean[v]) / self.sd[v] } else { 0.0 };
            }
        }
        Ok(out)
    }

    /// FNV-1a over the bit patterns of the stored statistics.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in self.mean.iter().chain(&self.sd) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// All three steps on one run. Without `stats`, step 3 uses statistics
/// computed from this run alone.
pub fn normalize_three_step(data: &Tensor<f32>, mask: &Mask, stats: Option<&NormalizationStats>) -> Result<Tensor<f64>> {
    let scaled = demean_and_scale(data, mask)?;
    match stats {
        Some(s) => s.apply(&scaled, mask),
        None => NormalizationStats::compute([&scaled], mask, NormalizationScope::AllSubjects)?.apply(&scaled, mask),
    }
}

/// Normalizes a corpus. With [`NormalizationScope::TrainOnly`] the step-3
/// statistics pool only runs flagged in `in_train`.
pub fn normalize_corpus(
    runs: &[Tensor<f32>],
    mask: &Mask,
    scope: NormalizationScope,
    in_train: &[bool],
) -> Result<(Vec<Tensor<f64>>, NormalizationStats)> {
    if in_train.len() != runs.len() {
        return Err(Error::Contract(format!("{} train flags for {} runs", in_train.len(), runs.len())));
    }
    let scaled = runs.iter().map(|r| demean_and_scale(r, mask)).collect::<Result<Vec<_>>>()?;
    let pool = scaled
        .iter()
        .zip(in_train)
        .filter(|(_, &t)| scope == NormalizationScope::AllSubjects || t)
        .map(|(r, _)| r);
    let stats = NormalizationStats::compute(pool, mask, scope)?;
    let out = scaled.iter().map(|r| stats.apply(r, mask)).collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_run(seed: u64, frames: usize, grid: [usize; 3]) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.iter().product::<usize>();
        let dist = Normal::new(3.0, 2.0).unwrap();
        let mut shape = vec![frames];
        shape.extend_from_slice(&grid);
        Tensor::from_vec(&shape, (0..frames * n).map(|i| dist.sample(&mut rng) as f32 + (i % n) as f32).collect()).unwrap()
    }

    #[test]
    fn demean_example() {
        let mask = Mask::full([1, 1, 2]).unwrap();
        let data = Tensor::from_vec(&[3, 1, 1, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let out = demean_and_scale(&data, &mask).unwrap();
        // Step 1 gives [-1, 0, 1] and [0, 0, 0]; step 2 divides by sqrt(1/3).
        let sd = (2.0f64 / 6.0).sqrt();
        let want = [-1.0 / sd, 0.0, 0.0, 0.0, 1.0 / sd, 0.0];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_in_time_is_degenerate() {
        let mask = Mask::full([2, 1, 1]).unwrap();
        let data = Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 7.0, 1.0, 7.0]).unwrap();
        assert!(matches!(demean_and_scale(&data, &mask), Err(Error::Degenerate(_))));
    }

    #[test]
    fn out_of_mask_voxels_are_zero() {
        let mask = Mask::new([2, 2, 1], vec![true, false, true, true]).unwrap();
        let out = normalize_three_step(&random_run(1, 5, [2, 2, 1]), &mask, None).unwrap();
        for frame in out.data().chunks(4) {
            assert_eq!(frame[1], 0.0);
        }
    }

    #[test]
    fn pooled_moments_after_all_subject_scope() {
        let grid = [3, 3, 2];
        let mask = Mask::new(grid, (0..18).map(|i| i % 5 != 0).collect()).unwrap();
        let runs: Vec<_> = (0..6).map(|s| random_run(s, 9, grid)).collect();
        let (out, _) = normalize_corpus(&runs, &mask, NormalizationScope::AllSubjects, &[false; 6]).unwrap();
        let n = 18;
        for v in mask.indices() {
            let xs: Vec<f64> = out.iter().flat_map(|r| r.data().chunks(n).map(move |f| f[v])).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((sd - 1.0).abs() < 1e-6, "sd {sd}");
        }
    }

    #[test]
    fn train_only_stats_ignore_held_out_runs() {
        let grid = [2, 2, 2];
        let mask = Mask::full(grid).unwrap();
        let mut runs: Vec<_> = (0..4).map(|s| random_run(s, 6, grid)).collect();
        let flags = [true, true, false, false];
        let (_, a) = normalize_corpus(&runs, &mask, NormalizationScope::TrainOnly, &flags).unwrap();
        runs[3] = random_run(99, 6, grid);
        let (_, b) = normalize_corpus(&runs, &mask, NormalizationScope::TrainOnly, &flags).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let (_, c) = normalize_corpus(&runs, &mask, NormalizationScope::AllSubjects, &flags).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("train-only".parse::<NormalizationScope>().unwrap(), NormalizationScope::TrainOnly);
        assert_eq!("all-subjects".parse::<NormalizationScope>().unwrap(), NormalizationScope::AllSubjects);
        assert!(matches!("both".parse::<NormalizationScope>(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn step_two_gives_unit_whole_brain_sd(seed in 0u64..1000, frames in 2usize..8) {
            let mask = Mask::full([2, 3, 2]).unwrap();
            let out = demean_and_scale(&random_run(seed, frames, [2, 3, 2]), &mask).unwrap();
            let xs = out.data();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }
}
