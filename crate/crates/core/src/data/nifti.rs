//! Minimal reader for uncompressed single-file NIfTI-1 (`.nii`) volumes.
//!
//! Only `float32` and `int16` payloads are accepted. The header's byte order
//! is detected from `sizeof_hdr`. Orientation fields are ignored; the series
//! is returned as `(T, X, Y, Z)` with the header's fourth dimension first.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NIFTI1_HEADER_LEN: usize = 348;
pub const NIFTI1_MAGIC: &[u8; 4] = b"n+1\0";
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_MAGIC: usize = 344;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    pub data: Tensor<f32>,
    /// Spatial voxel size in millimetres (`pixdim[1..4]`).
    pub voxel_mm: [f32; 3],
}

#[derive(Clone, Copy)]
struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a: [u8; N] = self.bytes[off..off + N].try_into().unwrap();
        if self.big_endian {
            a.reverse();
        }
        a
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.arr(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.arr(off))
    }
}

pub fn read_nifti1(path: &Path) -> Result<NiftiVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti1(&bytes, path)
}

pub fn decode_nifti1(bytes: &[u8], path: &Path) -> Result<NiftiVolume> {
    if bytes.len() < NIFTI1_HEADER_LEN {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("header needs {NIFTI1_HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::format(path, 0, format!("sizeof_hdr is {le}, expected 348"))),
    };
    let r = Reader { bytes, big_endian };
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != NIFTI1_MAGIC {
        return Err(Error::format(path, OFF_MAGIC as u64, "magic is not \"n+1\\0\""));
    }

    let rank = r.i16(OFF_DIM);
    if rank != 3 && rank != 4 {
        return Err(Error::format(path, OFF_DIM as u64, format!("dim[0] = {rank}, expected 3 or 4")));
    }
    let mut dims = [1usize; 4];
    for (i, d) in dims.iter_mut().enumerate().take(rank as usize) {
        let off = OFF_DIM + 2 * (i + 1);
        let v = r.i16(off);
        if v < 1 {
            return Err(Error::format(path, off as u64, format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    let [nx, ny, nz, nt] = dims;

    let datatype = r.i16(OFF_DATATYPE);
    let width = match datatype {
        DT_FLOAT32 => 4,
        DT_INT16 => 2,
        other => return Err(Error::format(path, OFF_DATATYPE as u64, format!("unsupported datatype code {other}"))),
    };
    let vox_offset = r.f32(OFF_VOX_OFFSET);
    if !vox_offset.is_finite() || vox_offset < NIFTI1_HEADER_LEN as f32 {
        return Err(Error::format(path, OFF_VOX_OFFSET as u64, format!("vox_offset {vox_offset} inside the header")));
    }
    let start = vox_offset as usize;
    let count = nx * ny * nz * nt;
    let end = start + count * width;
    if bytes.len() < end {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated payload: expected {end} bytes, found {}", bytes.len()),
        ));
    }

    let slope = r.f32(OFF_SCL_SLOPE);
    let inter = r.f32(OFF_SCL_INTER);
    let payload = Reader { bytes: &bytes[start..end], big_endian };
    let sample = |i: usize| -> f32 {
        match datatype {
            DT_FLOAT32 => payload.f32(4 * i),
            _ => {
                let raw = payload.i16(2 * i) as f32;
                if slope != 0.0 && slope.is_finite() {
                    raw * slope + inter
                } else {
                    raw
                }
            }
        }
    };

    // File order has x fastest and t slowest; the tensor is (t, x, y, z).
    let mut data = vec![0f32; count];
    for t in 0..nt {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let src = x + nx * (y + ny * (z + nz * t));
                    data[((t * nx + x) * ny + y) * nz + z] = sample(src);
                }
            }
        }
    }
    let voxel_mm = [r.f32(OFF_PIXDIM + 4), r.f32(OFF_PIXDIM + 8), r.f32(OFF_PIXDIM + 12)];
    Ok(NiftiVolume {
        data: Tensor::from_vec(&[nt, nx, ny, nz], data)?,
        voxel_mm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent fixture writer: lays out a header field by field and the
    /// payload in file order from a closure over `(x, y, z, t)`.
    struct Fixture {
        dims: Vec<i16>,
        datatype: i16,
        big_endian: bool,
        vox_offset: f32,
        slope: f32,
        inter: f32,
    }

    impl Fixture {
        fn new(dims: &[i16], datatype: i16) -> Self {
            Fixture {
                dims: dims.to_vec(),
                datatype,
                big_endian: false,
                vox_offset: 352.0,
                slope: 0.0,
                inter: 0.0,
            }
        }

        fn put(&self, buf: &mut [u8], off: usize, le: &[u8]) {
            let mut b = le.to_vec();
            if self.big_endian {
                b.reverse();
            }
            buf[off..off + b.len()].copy_from_slice(&b);
        }

        fn build(&self, value: impl Fn(usize, usize, usize, usize) -> f32) -> Vec<u8> {
            let d = |i: usize| self.dims.get(i).copied().unwrap_or(1).max(1) as usize;
            let (nx, ny, nz, nt) = (d(0), d(1), d(2), d(3));
            let width = if self.datatype == DT_INT16 { 2 } else { 4 };
            let mut buf = vec![0u8; self.vox_offset as usize + nx * ny * nz * nt * width];
            self.put(&mut buf, 0, &348i32.to_le_bytes());
            self.put(&mut buf, 40, &(self.dims.len() as i16).to_le_bytes());
            for (i, &v) in self.dims.iter().enumerate() {
                self.put(&mut buf, 42 + 2 * i, &v.to_le_bytes());
            }
            self.put(&mut buf, 70, &self.datatype.to_le_bytes());
            self.put(&mut buf, 72, &((width * 8) as i16).to_le_bytes());
            for (i, mm) in [2.0f32, 2.5, 3.0].iter().enumerate() {
                self.put(&mut buf, 80 + 4 * i, &mm.to_le_bytes());
            }
            self.put(&mut buf, 108, &self.vox_offset.to_le_bytes());
            self.put(&mut buf, 112, &self.slope.to_le_bytes());
            self.put(&mut buf, 116, &self.inter.to_le_bytes());
            buf[344..348].copy_from_slice(b"n+1\0");
            let mut off = self.vox_offset as usize;
            for t in 0..nt {
                for z in 0..nz {
                    for y in 0..ny {
                        for x in 0..nx {
                            let v = value(x, y, z, t);
                            if self.datatype == DT_INT16 {
                                self.put(&mut buf, off, &(v as i16).to_le_bytes());
                            } else {
                                self.put(&mut buf, off, &v.to_le_bytes());
                            }
                            off += width;
                        }
                    }
                }
            }
            buf
        }
    }

    fn code(x: usize, y: usize, z: usize, t: usize) -> f32 {
        (1000 * t + 100 * x + 10 * y + z) as f32
    }

    fn check_layout(vol: &NiftiVolume, scale: f32, offset: f32) {
        let s = vol.data.shape().to_vec();
        for t in 0..s[0] {
            for x in 0..s[1] {
                for y in 0..s[2] {
                    for z in 0..s[3] {
                        let got = vol.data.data()[((t * s[1] + x) * s[2] + y) * s[3] + z];
                        assert_eq!(got, code(x, y, z, t) * scale + offset, "({t},{x},{y},{z})");
                    }
                }
            }
        }
    }

    #[test]
    fn float32_four_dimensional() {
        let bytes = Fixture::new(&[4, 4, 3, 2], DT_FLOAT32).build(code);
        let vol = decode_nifti1(&bytes, Path::new("f.nii")).unwrap();
        assert_eq!(vol.data.shape(), &[2, 4, 4, 3]);
        assert_eq!(vol.voxel_mm, [2.0, 2.5, 3.0]);
        check_layout(&vol, 1.0, 0.0);
    }

    #[test]
    fn big_endian_header_and_payload() {
        let mut fx = Fixture::new(&[3, 2, 2, 2], DT_FLOAT32);
        fx.big_endian = true;
        let vol = decode_nifti1(&fx.build(code), Path::new("b.nii")).unwrap();
        assert_eq!(vol.data.shape(), &[2, 3, 2, 2]);
        check_layout(&vol, 1.0, 0.0);
    }

    #[test]
    fn three_dimensional_is_single_frame() {
        let vol = decode_nifti1(&Fixture::new(&[2, 3, 4], DT_FLOAT32).build(code), Path::new("v.nii")).unwrap();
        assert_eq!(vol.data.shape(), &[1, 2, 3, 4]);
        check_layout(&vol, 1.0, 0.0);
    }

    #[test]
    fn int16_scaling_and_vox_offset() {
        let mut fx = Fixture::new(&[2, 2, 2, 2], DT_INT16);
        fx.slope = 0.5;
        fx.inter = -3.0;
        fx.vox_offset = 400.0;
        let vol = decode_nifti1(&fx.build(code), Path::new("i.nii")).unwrap();
        check_layout(&vol, 0.5, -3.0);

        fx.slope = 0.0;
        let vol = decode_nifti1(&fx.build(code), Path::new("i.nii")).unwrap();
        check_layout(&vol, 1.0, 0.0);
    }

    #[test]
    fn rejects_malformed_headers() {
        let good = Fixture::new(&[2, 2, 2], DT_FLOAT32).build(code);
        let p = Path::new("x.nii");

        let mut bad = good.clone();
        bad[345] = b'i';
        assert!(matches!(decode_nifti1(&bad, p), Err(Error::Format { offset: 344, .. })));

        let bytes = Fixture::new(&[2, 2, 2], 64).build(code);
        assert!(matches!(decode_nifti1(&bytes, p), Err(Error::Format { offset: 70, .. })));

        let bytes = Fixture::new(&[2, 2], DT_FLOAT32).build(code);
        assert!(matches!(decode_nifti1(&bytes, p), Err(Error::Format { offset: 40, .. })));

        let mut bad = good.clone();
        bad[0] = 0;
        assert!(matches!(decode_nifti1(&bad, p), Err(Error::Format { offset: 0, .. })));

        let truncated = &good[..good.len() - 1];
        assert!(decode_nifti1(truncated, p).is_err());
    }

    #[test]
    fn reads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nii");
        std::fs::write(&path, Fixture::new(&[2, 2, 2, 3], DT_FLOAT32).build(code)).unwrap();
        let vol = read_nifti1(&path).unwrap();
        assert_eq!(vol.data.shape(), &[3, 2, 2, 2]);
    }
}
