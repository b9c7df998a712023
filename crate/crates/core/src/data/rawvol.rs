//! The `VOL4` raw series format: magic, four little-endian `u32` dims
//! `(T, X, Y, Z)`, then the payload as little-endian `f32` in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAWVOL_MAGIC: &[u8; 4] = b"VOL4";
const HEADER_LEN: usize = 4 + 4 * 4;

pub fn read_rawvol(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rawvol(&bytes, path)
}

/// Parses an in-memory `VOL4` image. `path` is used for diagnostics only.
pub fn decode_rawvol(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || &bytes[..4] != RAWVOL_MAGIC {
        return Err(Error::format(path, 0, "missing VOL4 magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if *d == 0 {
            return Err(Error::format(path, off as u64, format!("dimension {i} is zero")));
        }
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, 4, "dimensions overflow"))?;
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(path, 4, "dimensions overflow"))?;
    if bytes.len() != expected {
        let what = if bytes.len() < expected { "truncated payload" } else { "trailing bytes" };
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!("{what}: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&dims, data)
}

pub fn encode_rawvol(data: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape = data.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("VOL4 needs a rank-4 tensor, got {shape:?}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(RAWVOL_MAGIC);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_rawvol(path: &Path, data: &Tensor<f32>) -> Result<()> {
    let bytes = encode_rawvol(data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
