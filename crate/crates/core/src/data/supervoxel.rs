//! Block-mean downsampling for the SVM baselines.
//!
//! Blocks tile the grid from index 0; edge blocks are truncated. A block is
//! kept when it contains at least one in-mask voxel, and its value is the
//! mean over those voxels. Blocks are ordered x-major.

use crate::data::mask::Mask;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_RATE: [usize; 3] = [4, 4, 3];

/// In-mask voxel membership for every kept block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervoxelLayout {
    pub rate: [usize; 3],
    pub blocks: Vec<Vec<usize>>,
}

impl SupervoxelLayout {
    pub fn new(mask: &Mask, rate: [usize; 3]) -> Result<Self> {
        if rate.contains(&0) {
            return Err(Error::Config(format!("supervoxel rate {rate:?} has a zero entry")));
        }
        let [sx, sy, sz] = mask.shape();
        let [rx, ry, rz] = rate;
        let mut blocks = Vec::new();
        for bx in 0..sx.div_ceil(rx) {
            for by in 0..sy.div_ceil(ry) {
                for bz in 0..sz.div_ceil(rz) {
                    let mut members = Vec::new();
                    for x in bx * rx..((bx + 1) * rx).min(sx) {
                        for y in by * ry..((by + 1) * ry).min(sy) {
                            for z in bz * rz..((bz + 1) * rz).min(sz) {
                                if mask.contains(x, y, z) {
                                    members.push((x * sy + y) * sz + z);
                                }
                            }
                        }
                    }
                    if !members.is_empty() {
                        blocks.push(members);
                    }
                }
            }
        }
        Ok(SupervoxelLayout { rate, blocks })
    }

    pub fn count(&self) -> usize {
        self.blocks.len()
    }

    /// `(T, X, Y, Z)` series to a `(T, S)` matrix.
    pub fn downsample<T: Real>(&self, data: &Tensor<T>) -> Result<Tensor<T>> {
        let s = data.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected (T, X, Y, Z), got {s:?}")));
        }
        let frame_len: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(s[0] * self.blocks.len());
        for frame in data.data().chunks_exact(frame_len) {
            for block in &self.blocks {
                let sum: T = block.iter().map(|&i| frame[i]).sum();
                out.push(sum / T::of(block.len() as f64));
            }
        }
        Tensor::from_vec(&[s[0], self.blocks.len()], out)
    }
}

pub fn downsample_supervoxels<T: Real>(data: &Tensor<T>, mask: &Mask, rate: [usize; 3]) -> Result<Tensor<T>> {
    mask.check_series(data)?;
    SupervoxelLayout::new(mask, rate)?.downsample(data)
}

/// Time-major concatenation of the `(T, S)` matrix: `[t0s0, t0s1, …, t1s0, …]`.
pub fn flatten_baseline_features<T: Real>(data: &Tensor<T>, mask: &Mask, rate: [usize; 3]) -> Result<Vec<T>> {
    Ok(downsample_supervoxels(data, mask, rate)?.into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_block_mean() {
        let mask = Mask::full([4, 4, 3]).unwrap();
        let data = Tensor::from_vec(&[1, 4, 4, 3], (0..48).map(|v| v as f64).collect()).unwrap();
        let out = downsample_supervoxels(&data, &mask, [4, 4, 3]).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data()[0], 23.5);
    }

    #[test]
    fn ceil_tiling_count() {
        let mask = Mask::full([53, 64, 37]).unwrap();
        assert_eq!(SupervoxelLayout::new(&mask, DEFAULT_RATE).unwrap().count(), 14 * 16 * 13);
        assert!(matches!(SupervoxelLayout::new(&mask, [4, 0, 3]), Err(Error::Config(_))));
    }

    #[test]
    fn partial_blocks_average_in_mask_only() {
        let mask = Mask::new([3, 1, 1], vec![true, false, true]).unwrap();
        let data = Tensor::from_vec(&[2, 3, 1, 1], vec![1.0, 100.0, 2.0, 3.0, 100.0, 5.0]).unwrap();
        let out = downsample_supervoxels(&data, &mask, [2, 1, 1]).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 5.0]);
        let flat = flatten_baseline_features(&data, &mask, [2, 1, 1]).unwrap();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 5.0]);
    }

    #[test]
    fn time_major_order() {
        let mask = Mask::full([3, 1, 1]).unwrap();
        let data = Tensor::from_vec(&[2, 3, 1, 1], vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]).unwrap();
        let flat = flatten_baseline_features(&data, &mask, [1, 1, 1]).unwrap();
        assert_eq!(flat, vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
    }

    proptest! {
        #[test]
        fn shrinking_mask_never_adds_blocks(bits in proptest::collection::vec(any::<bool>(), 7 * 5 * 4),
                                            keep in proptest::collection::vec(any::<bool>(), 7 * 5 * 4),
                                            rx in 1usize..5, ry in 1usize..4, rz in 1usize..4) {
            let big = Mask::new([7, 5, 4], bits).unwrap();
            let small = big.and(&Mask::new([7, 5, 4], keep).unwrap()).unwrap();
            let a = SupervoxelLayout::new(&big, [rx, ry, rz]).unwrap().count();
            let b = SupervoxelLayout::new(&small, [rx, ry, rz]).unwrap().count();
            prop_assert!(b <= a);
        }

        #[test]
        fn blocks_partition_the_mask(bits in proptest::collection::vec(any::<bool>(), 6 * 6 * 5),
                                     rx in 1usize..7, ry in 1usize..7, rz in 1usize..6) {
            let m = Mask::new([6, 6, 5], bits).unwrap();
            let layout = SupervoxelLayout::new(&m, [rx, ry, rz]).unwrap();
            let mut all: Vec<usize> = layout.blocks.concat();
            all.sort_unstable();
            prop_assert_eq!(all, m.indices());
        }
    }
}
