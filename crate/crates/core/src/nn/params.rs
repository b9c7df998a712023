//! Named parameter store for a model.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::arch::{ArchitectureSpec, InputShape};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvKernel,
    ConvBias,
    LstmInput,
    LstmRecurrent,
    LstmBias,
    DenseWeight,
    DenseBias,
}

impl ParamKind {
    /// Convolutional kernels and fully connected weight matrices; never
    /// biases or LSTM weights.
    pub fn l2_eligible(self) -> bool {
        matches!(self, ParamKind::ConvKernel | ParamKind::DenseWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub path: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered map from parameter path to tensor. Insertion order is the
/// canonical order used by gradients, optimizer state and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    params: Vec<Param<T>>,
}

/// Indices into [`ModelParameters`] grouped by layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    /// `(kernel, bias)` per conv layer, grouped by block.
    pub conv: Vec<Vec<(usize, usize)>>,
    /// `(input, recurrent, bias)` per LSTM layer.
    pub lstm: Vec<(usize, usize, usize)>,
    pub head: (usize, usize),
}

fn glorot<T: Real, R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Tensor<T>> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, bound, rng)
}

fn uniform<T: Real, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Result<Tensor<T>> {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
    Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect())
}

impl<T: Real> ModelParameters<T> {
    pub fn new() -> Self {
        ModelParameters { params: Vec::new() }
    }

    pub fn push(&mut self, path: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<usize> {
        let path = path.into();
        if self.index_of(&path).is_some() {
            return Err(Error::Contract(format!("duplicate parameter path `{path}`")));
        }
        self.params.push(Param { path, kind, value });
        Ok(self.params.len() - 1)
    }

    /// Fresh parameters: Glorot-uniform conv and dense weights, uniform
    /// ±1/sqrt(hidden) LSTM weights, zero biases except a +1 forget-gate bias.
    pub fn init<R: Rng>(spec: &ArchitectureSpec, input: &InputShape, rng: &mut R) -> Result<(Self, Layout)> {
        spec.validate()?;
        let mut p = Self::new();
        let mut conv = Vec::new();
        let mut c_in = 1;
        for (b, block) in spec.conv_blocks.iter().enumerate() {
            let mut layers = Vec::new();
            for l in 0..block.layers {
                let c_out = block.filters;
                let shape = [c_out, c_in, 3, 3, 3];
                let k = p.push(
                    format!("conv-block/{b}/layer/{l}/kernel"),
                    ParamKind::ConvKernel,
                    glorot(&shape, c_in * 27, c_out * 27, rng)?,
                )?;
                let bias = p.push(
                    format!("conv-block/{b}/layer/{l}/bias"),
                    ParamKind::ConvBias,
                    Tensor::zeros(&[c_out])?,
                )?;
                layers.push((k, bias));
                c_in = c_out;
            }
            conv.push(layers);
        }
        let h = spec.lstm_hidden;
        let mut d_in = spec.lstm_input_dim(input)?;
        let bound = 1.0 / (h as f64).sqrt();
        let mut lstm = Vec::new();
        for i in 0..spec.lstm_layers {
            let w = p.push(format!("lstm/{i}/input"), ParamKind::LstmInput, uniform(&[4 * h, d_in], bound, rng)?)?;
            let u = p.push(format!("lstm/{i}/recurrent"), ParamKind::LstmRecurrent, uniform(&[4 * h, h], bound, rng)?)?;
            let mut bias = vec![T::zero(); 4 * h];
            for v in &mut bias[h..2 * h] {
                *v = T::one();
            }
            let b = p.push(format!("lstm/{i}/bias"), ParamKind::LstmBias, Tensor::from_vec(&[4 * h], bias)?)?;
            lstm.push((w, u, b));
            d_in = h;
        }
        let c = spec.num_classes;
        let hw = p.push("head/weight", ParamKind::DenseWeight, glorot(&[c, h], h, c, rng)?)?;
        let hb = p.push("head/bias", ParamKind::DenseBias, Tensor::zeros(&[c])?)?;
        Ok((p, Layout { conv, lstm, head: (hw, hb) }))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn index_of(&self, path: &str) -> Option<usize> {
        self.params.iter().position(|p| p.path == path)
    }

    pub fn by_path(&self, path: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.path == path)
    }

    pub fn set_value(&mut self, i: usize, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[i];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{}` has shape {:?}, got {:?}",
                slot.path,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.params[i].value
    }

    /// Total number of scalars allocated.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter on `tape`: as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    path: p.path.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Real> Default for ModelParameters<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One flat gradient buffer per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T> {
    pub buffers: Vec<Vec<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(params: &ModelParameters<T>) -> Self {
        ParamGrads {
            buffers: params.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads<T>) -> Result<()> {
        if self.buffers.len() != other.buffers.len() {
            return Err(Error::Contract(format!(
                "gradient sets hold {} and {} tensors",
                self.buffers.len(),
                other.buffers.len()
            )));
        }
        for (i, (a, b)) in self.buffers.iter_mut().zip(&other.buffers).enumerate() {
            if a.len() != b.len() {
                return Err(Error::Contract(format!(
                    "gradient {i} has {} vs {} elements",
                    a.len(),
                    b.len()
                )));
            }
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: T) {
        for buf in &mut self.buffers {
            for x in buf.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.buffers.iter().flatten().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.buffers
            .iter()
            .flatten()
            .map(|x| x.as_f64().abs())
            .fold(0.0, f64::max)
    }
}
