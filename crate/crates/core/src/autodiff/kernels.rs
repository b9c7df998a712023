//! Numeric kernels behind the spatial tape operations: 3x3x3 convolution
//! by chunked im2col + GEMM, and 2x2x2 max pooling.

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const KERNEL_EDGE: usize = 3;
const KERNEL_TAPS: usize = KERNEL_EDGE * KERNEL_EDGE * KERNEL_EDGE;
/// Upper bound on im2col buffer elements per chunk.
const COLS_BUDGET: usize = 1 << 21;

/// Spatial padding mode for 3x3x3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Padding {
    /// One voxel of zeros on every face; output dims equal input dims.
    #[default]
    Same,
    /// No padding; each spatial dim shrinks by two.
    Valid,
}

impl Padding {
    pub fn pad(self) -> usize {
        match self {
            Padding::Same => 1,
            Padding::Valid => 0,
        }
    }

    pub fn output_dim(self, d: usize) -> Option<usize> {
        (d + 2 * self.pad()).checked_sub(KERNEL_EDGE - 1).filter(|&o| o > 0)
    }

    pub fn name(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }
}

impl std::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(Error::Config(format!(
                "padding must be `same` or `valid`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], kernel_shape: &[usize], bias_len: usize, padding: Padding) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv3d input must be (C, X, Y, Z), got {input_shape:?}"
            )));
        }
        if kernel_shape.len() != 5 || kernel_shape[2..] != [KERNEL_EDGE; 3] {
            return Err(Error::Shape(format!(
                "conv3d kernel must be (C_out, C_in, 3, 3, 3), got {kernel_shape:?}"
            )));
        }
        let (c_out, c_in) = (kernel_shape[0], kernel_shape[1]);
        if c_in != input_shape[0] {
            return Err(Error::Shape(format!(
                "conv3d kernel expects {c_in} input channels, input has {}",
                input_shape[0]
            )));
        }
        if bias_len != c_out {
            return Err(Error::Shape(format!(
                "conv3d bias has {bias_len} entries for {c_out} filters"
            )));
        }
        let input = [input_shape[1], input_shape[2], input_shape[3]];
        let mut output = [0; 3];
        for (o, &d) in output.iter_mut().zip(input.iter()) {
            *o = padding.output_dim(d).ok_or_else(|| {
                Error::Shape(format!(
                    "spatial dims {input:?} too small for a valid 3x3x3 convolution"
                ))
            })?;
        }
        Ok(ConvGeometry {
            c_in,
            c_out,
            input,
            output,
            padding,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    fn rows(&self) -> usize {
        self.c_in * KERNEL_TAPS
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn chunk_len(&self) -> usize {
        (COLS_BUDGET / self.rows()).max(64).min(self.out_voxels())
    }

    /// Input-space origin of the receptive field of each output voxel.
    fn fill_coords(&self, start: usize, n: usize, coords: &mut Vec<[isize; 3]>) {
        let [_, oy, oz] = self.output;
        let pad = self.padding.pad() as isize;
        coords.clear();
        coords.extend((start..start + n).map(|v| {
            [
                (v / (oy * oz)) as isize - pad,
                ((v / oz) % oy) as isize - pad,
                (v % oz) as isize - pad,
            ]
        }));
    }

    /// Fills `cols` (rows x n, row-major) for output voxels `start..start+n`.
    fn im2col<T: Real>(&self, input: &[T], start: usize, n: usize, cols: &mut [T], coords: &mut Vec<[isize; 3]>) {
        self.fill_coords(start, n, coords);
        let [ix, iy, iz] = self.input.map(|d| d as isize);
        let plane = (iy * iz) as usize;
        for ci in 0..self.c_in {
            let chan = &input[ci * self.in_voxels()..(ci + 1) * self.in_voxels()];
            for kx in 0..3isize {
                for ky in 0..3isize {
                    for kz in 0..3isize {
                        let r = ci * KERNEL_TAPS + ((kx * 3 + ky) * 3 + kz) as usize;
                        let row = &mut cols[r * n..(r + 1) * n];
                        for (dst, c) in row.iter_mut().zip(coords.iter()) {
                            let (x, y, z) = (c[0] + kx, c[1] + ky, c[2] + kz);
                            *dst = if x >= 0 && x < ix && y >= 0 && y < iy && z >= 0 && z < iz {
                                chan[x as usize * plane + (y * iz + z) as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, dcols: &[T], n: usize, coords: &[[isize; 3]], dinput: &mut [T]) {
        let [ix, iy, iz] = self.input.map(|d| d as isize);
        let plane = (iy * iz) as usize;
        let in_vox = self.in_voxels();
        for ci in 0..self.c_in {
            let chan = &mut dinput[ci * in_vox..(ci + 1) * in_vox];
            for kx in 0..3isize {
                for ky in 0..3isize {
                    for kz in 0..3isize {
                        let r = ci * KERNEL_TAPS + ((kx * 3 + ky) * 3 + kz) as usize;
                        let row = &dcols[r * n..(r + 1) * n];
                        for (&g, c) in row.iter().zip(coords.iter()) {
                            let (x, y, z) = (c[0] + kx, c[1] + ky, c[2] + kz);
                            if x >= 0 && x < ix && y >= 0 && y < iy && z >= 0 && z < iz {
                                chan[x as usize * plane + (y * iz + z) as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Cross-correlation (no kernel flip) plus per-filter bias.
    pub fn forward<T: Real>(&self, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
        let total = self.out_voxels();
        let rows = self.rows();
        let chunk = self.chunk_len();
        let mut out = vec![T::zero(); self.c_out * total];
        let mut cols = vec![T::zero(); rows * chunk];
        let mut coords = Vec::with_capacity(chunk);
        let mut start = 0;
        while start < total {
            let n = chunk.min(total - start);
            self.im2col(input, start, n, &mut cols[..rows * n], &mut coords);
            T::gemm(
                self.c_out,
                rows,
                n,
                T::one(),
                kernel,
                rows as isize,
                1,
                &cols[..rows * n],
                n as isize,
                1,
                T::zero(),
                &mut out[start..],
                total as isize,
                1,
            );
            start += n;
        }
        for (co, &b) in bias.iter().enumerate() {
            for v in &mut out[co * total..(co + 1) * total] {
                *v += b;
            }
        }
        out
    }

    /// Accumulates input, kernel and bias gradients. Any of the three may be
    /// skipped by passing `None`.
    pub fn backward<T: Real>(
        &self,
        input: &[T],
        kernel: &[T],
        grad_out: &[T],
        mut dinput: Option<&mut [T]>,
        mut dkernel: Option<&mut [T]>,
        dbias: Option<&mut [T]>,
    ) {
        let total = self.out_voxels();
        let rows = self.rows();
        if let Some(db) = dbias {
            for (co, d) in db.iter_mut().enumerate() {
                *d += grad_out[co * total..(co + 1) * total].iter().copied().sum::<T>();
            }
        }
        if dinput.is_none() && dkernel.is_none() {
            return;
        }
        let chunk = self.chunk_len();
        let mut cols = vec![T::zero(); rows * chunk];
        let mut dcols = if dinput.is_some() {
            vec![T::zero(); rows * chunk]
        } else {
            Vec::new()
        };
        let mut coords = Vec::with_capacity(chunk);
        let mut start = 0;
        while start < total {
            let n = chunk.min(total - start);
            let g = &grad_out[start..];
            if let Some(dk) = dkernel.as_deref_mut() {
                self.im2col(input, start, n, &mut cols[..rows * n], &mut coords);
                // dK (c_out x rows) += G (c_out x n) . cols^T (n x rows)
                T::gemm(
                    self.c_out,
                    n,
                    rows,
                    T::one(),
                    g,
                    total as isize,
                    1,
                    &cols[..rows * n],
                    1,
                    n as isize,
                    T::one(),
                    dk,
                    rows as isize,
                    1,
                );
            } else {
                self.fill_coords(start, n, &mut coords);
            }
            if let Some(di) = dinput.as_deref_mut() {
                // dcols (rows x n) = K^T (rows x c_out) . G (c_out x n)
                T::gemm(
                    rows,
                    self.c_out,
                    n,
                    T::one(),
                    kernel,
                    1,
                    rows as isize,
                    g,
                    total as isize,
                    1,
                    T::zero(),
                    &mut dcols[..rows * n],
                    n as isize,
                    1,
                );
                self.col2im(&dcols[..rows * n], n, &coords, di);
            }
            start += n;
        }
    }
}

/// 2x2x2 max pooling with stride 2; trailing odd slices are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl PoolGeometry {
    pub fn new(input_shape: &[usize]) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "maxpool3d input must be (C, X, Y, Z), got {input_shape:?}"
            )));
        }
        let input = [input_shape[1], input_shape[2], input_shape[3]];
        if input.iter().any(|&d| d < 2) {
            return Err(Error::Shape(format!(
                "maxpool3d needs every spatial dim >= 2, got {input:?}"
            )));
        }
        Ok(PoolGeometry {
            channels: input_shape[0],
            input,
            output: input.map(|d| d / 2),
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.channels, self.output[0], self.output[1], self.output[2]]
    }

    /// Returns pooled values and, per output element, the flat input index of
    /// its maximum (first in scan order on ties).
    pub fn forward<T: Real>(&self, input: &[T]) -> (Vec<T>, Vec<usize>) {
        let [_, iy, iz] = self.input;
        let [ox, oy, oz] = self.output;
        let in_vox: usize = self.input.iter().product();
        let n = self.channels * ox * oy * oz;
        let mut values = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        for c in 0..self.channels {
            let base = c * in_vox;
            for x in 0..ox {
                for y in 0..oy {
                    for z in 0..oz {
                        let mut best_idx = base + ((2 * x) * iy + 2 * y) * iz + 2 * z;
                        let mut best = input[best_idx];
                        for dx in 0..2 {
                            for dy in 0..2 {
                                for dz in 0..2 {
                                    let idx = base + ((2 * x + dx) * iy + 2 * y + dy) * iz + 2 * z + dz;
                                    if input[idx] > best {
                                        best = input[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        values.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        (values, argmax)
    }
}
