//! Binary checkpoints (`VFCK`): architecture, input geometry, mask,
//! parameters, and optionally Adam moments and normalization statistics.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VFCK" u32 version
//! u32 len, spec text      u32 window     3 x u32 grid     X*Y*Z mask bytes
//! u32 n_params, then per parameter:
//!     u32 len, path   u8 kind   u32 rank, rank x u32 dims   u8 width   payload
//! u8 has_adam  [u64 step, m payloads, v payloads]
//! u8 has_stats [u8 scope, X*Y*Z f64 means, X*Y*Z f64 SDs]
//! ```
//!
//! `width` is 4 (`f32`) or 8 (`f64`); values are converted to the in-memory
//! element type on load.

use std::fs;
use std::path::Path;

use crate::data::mask::Mask;
use crate::data::normalize::{NormalizationScope, NormalizationStats};
use crate::error::{Error, Result};
use crate::nn::arch::ArchitectureSpec;
use crate::nn::model::Model;
use crate::nn::params::{ModelParameters, ParamKind};
use crate::optim::AdamState;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub mask: Mask,
    pub window: usize,
    pub adam: Option<AdamState<T>>,
    pub stats: Option<NormalizationStats>,
}

const KINDS: [ParamKind; 7] = [
    ParamKind::ConvKernel,
    ParamKind::ConvBias,
    ParamKind::LstmInput,
    ParamKind::LstmRecurrent,
    ParamKind::LstmBias,
    ParamKind::DenseWeight,
    ParamKind::DenseBias,
];

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit the checkpoint's u32 fields")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_values<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    for &v in values {
        if T::NAME == "f64" {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        } else {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

fn width<T: Real>() -> u8 {
    if T::NAME == "f64" {
        8
    } else {
        4
    }
}

pub fn encode_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let model = &ck.model;
    if model.input.grid != ck.mask.shape() {
        return Err(Error::Contract("checkpoint mask does not match the model grid".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let spec = model.spec.to_text();
    put_u32(&mut out, spec.len())?;
    out.extend_from_slice(spec.as_bytes());
    put_u32(&mut out, ck.window)?;
    for d in model.input.grid {
        put_u32(&mut out, d)?;
    }
    out.extend(ck.mask.values().iter().map(|&b| b as u8));
    put_u32(&mut out, model.params.len())?;
    for p in model.params.iter() {
        put_u32(&mut out, p.path.len())?;
        out.extend_from_slice(p.path.as_bytes());
        out.push(KINDS.iter().position(|&k| k == p.kind).unwrap() as u8);
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        out.push(width::<T>());
        put_values(&mut out, p.value.data());
    }
    match &ck.adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            for m in a.m.iter().chain(&a.v) {
                put_values(&mut out, m);
            }
        }
    }
    match &ck.stats {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.push(match s.scope {
                NormalizationScope::TrainOnly => 0,
                NormalizationScope::AllSubjects => 1,
            });
            for v in s.mean.iter().chain(&s.sd) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, self.pos as u64, msg)
    }
    fn values<T: Real>(&mut self, n: usize, width: u8, what: &str) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(width as usize).ok_or_else(|| self.err("size overflow"))?, what)?;
        Ok(match width {
            4 => raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
            _ => raw.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        })
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        self.values::<f64>(n, 8, what)
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "missing VFCK magic"));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(c.err(format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32("spec length")?;
    let text = std::str::from_utf8(c.take(len, "spec")?).map_err(|_| c.err("spec is not UTF-8"))?;
    let spec = ArchitectureSpec::from_text(text).map_err(|e| c.err(format!("bad architecture: {e}")))?;
    let window = c.u32("window")?;
    let grid = [c.u32("grid")?, c.u32("grid")?, c.u32("grid")?];
    let n_vox = grid.iter().product::<usize>();
    let mask_start = c.pos;
    let raw_mask = c.take(n_vox, "mask")?;
    let mut mask_values = Vec::with_capacity(n_vox);
    for (i, &b) in raw_mask.iter().enumerate() {
        match b {
            0 | 1 => mask_values.push(b == 1),
            _ => return Err(Error::format(path, (mask_start + i) as u64, format!("mask byte {b}"))),
        }
    }
    let mask = Mask::new(grid, mask_values).map_err(|e| c.err(e.to_string()))?;

    let n_params = c.u32("parameter count")?;
    let mut params = ModelParameters::new();
    let mut widths = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let len = c.u32("path length")?;
        let name = std::str::from_utf8(c.take(len, "path")?).map_err(|_| c.err("path is not UTF-8"))?.to_string();
        let kind = *KINDS.get(c.u8("kind")? as usize).ok_or_else(|| c.err("unknown parameter kind"))?;
        let rank = c.u32("rank")?;
        let dims = (0..rank).map(|_| c.u32("dims")).collect::<Result<Vec<_>>>()?;
        let w = c.u8("width")?;
        if w != 4 && w != 8 {
            return Err(c.err(format!("element width {w}")));
        }
        let n = dims.iter().product();
        let values = c.values::<T>(n, w, "parameter payload")?;
        let tensor = Tensor::from_vec(&dims, values).map_err(|e| c.err(e.to_string()))?;
        params.push(name, kind, tensor).map_err(|e| c.err(e.to_string()))?;
        widths.push(w);
    }
    let adam = match c.u8("adam flag")? {
        0 => None,
        1 => {
            let step = c.u64("adam step")?;
            let mut moments = Vec::with_capacity(2 * n_params);
            for round in 0..2 {
                for (i, p) in params.iter().enumerate() {
                    let what = if round == 0 { "first moments" } else { "second moments" };
                    moments.push(c.values::<T>(p.value.len(), widths[i], what)?);
                }
            }
            let v = moments.split_off(n_params);
            Some(AdamState { step, m: moments, v })
        }
        f => return Err(c.err(format!("adam flag {f}"))),
    };
    let stats = match c.u8("stats flag")? {
        0 => None,
        1 => {
            let scope = match c.u8("scope")? {
                0 => NormalizationScope::TrainOnly,
                1 => NormalizationScope::AllSubjects,
                s => return Err(c.err(format!("scope code {s}"))),
            };
            let mean = c.f64s(n_vox, "means")?;
            let sd = c.f64s(n_vox, "SDs")?;
            Some(NormalizationStats { scope, grid, mean, sd })
        }
        f => return Err(c.err(format!("stats flag {f}"))),
    };
    if c.pos != bytes.len() {
        return Err(c.err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let model = Model::from_parts(spec, grid, Some(mask.indices()), params)?;
    Ok(Checkpoint { model, mask, window, adam, stats })
}

pub fn write_checkpoint<T: Real>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
