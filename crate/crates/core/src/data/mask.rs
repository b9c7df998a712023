//! Boolean brain masks and the `MSK1` file format (magic, three
//! little-endian `u32` dims, then one byte per voxel in `{0, 1}`).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MASK_MAGIC: &[u8; 4] = b"MSK1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: [usize; 3],
    values: Vec<bool>,
    count: usize,
}

impl Mask {
    pub fn new(shape: [usize; 3], values: Vec<bool>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!("mask shape {shape:?} has a zero dimension")));
        }
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "mask {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                values.len()
            )));
        }
        let count = values.iter().filter(|&&v| v).count();
        Ok(Mask { shape, values, count })
    }

    pub fn full(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, vec![true; shape.iter().product()])
    }

    /// Voxels that are nonzero in at least one frame of every series.
    pub fn intersection_of_nonzero<'a>(series: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Self> {
        let mut acc: Option<(Vec<usize>, Vec<bool>)> = None;
        for s in series {
            let shape = s.shape();
            if shape.len() != 4 {
                return Err(Error::Shape(format!("expected (T, X, Y, Z), got {shape:?}")));
            }
            let n: usize = shape[1..].iter().product();
            let mut nz = vec![false; n];
            for frame in s.data().chunks_exact(n) {
                for (m, &v) in nz.iter_mut().zip(frame) {
                    *m |= v != 0.0;
                }
            }
            match &mut acc {
                None => acc = Some((shape[1..].to_vec(), nz)),
                Some((grid, m)) => {
                    if grid[..] != shape[1..] {
                        return Err(Error::Shape(format!("grid {:?} vs {grid:?}", &shape[1..])));
                    }
                    for (a, b) in m.iter_mut().zip(nz) {
                        *a &= b;
                    }
                }
            }
        }
        let (grid, values) = acc.ok_or_else(|| Error::Data("no series to intersect".into()))?;
        Self::new([grid[0], grid[1], grid[2]], values)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let [_, sy, sz] = self.shape;
        self.values[(x * sy + y) * sz + z]
    }

    /// Flat grid indices of in-mask voxels in scan order.
    pub fn indices(&self) -> Vec<usize> {
        self.values.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect()
    }

    pub fn check_series<T: Real>(&self, data: &Tensor<T>) -> Result<()> {
        let s = data.shape();
        if s.len() != 4 || s[1..] != self.shape {
            return Err(Error::Shape(format!("series {s:?} does not match mask {:?}", self.shape)));
        }
        Ok(())
    }

    /// Zeroes every out-of-mask voxel of a `(T, X, Y, Z)` series.
    pub fn apply<T: Real>(&self, data: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_series(data)?;
        let mut out = data.clone();
        let n = self.values.len();
        for frame in out.data_mut().chunks_exact_mut(n) {
            for (v, &m) in frame.iter_mut().zip(&self.values) {
                if !m {
                    *v = T::zero();
                }
            }
        }
        Ok(out)
    }

    /// Logical AND with another mask of the same shape.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("masks {:?} and {:?}", self.shape, other.shape)));
        }
        Mask::new(self.shape, self.values.iter().zip(&other.values).map(|(a, b)| *a && *b).collect())
    }
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<Mask> {
    if bytes.len() < 4 || &bytes[..4] != MASK_MAGIC {
        return Err(Error::format(path, 0, "missing MSK1 magic"));
    }
    if bytes.len() < 16 {
        return Err(Error::format(path, bytes.len() as u64, "header needs 16 bytes"));
    }
    let mut shape = [0usize; 3];
    for (i, d) in shape.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if *d == 0 {
            return Err(Error::format(path, off as u64, format!("dimension {i} is zero")));
        }
    }
    let n: usize = shape.iter().product();
    let expected = 16 + n;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(n);
    for (i, &b) in bytes[16..].iter().enumerate() {
        match b {
            0 => values.push(false),
            1 => values.push(true),
            _ => return Err(Error::format(path, (16 + i) as u64, format!("mask byte {b} is not 0 or 1"))),
        }
    }
    Mask::new(shape, values)
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + mask.values.len());
    out.extend_from_slice(MASK_MAGIC);
    for d in mask.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend(mask.values.iter().map(|&v| v as u8));
    out
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes, path)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    fs::write(path, encode_mask(mask)).map_err(|e| Error::io(path, e))
}
