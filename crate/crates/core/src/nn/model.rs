//! Full classifiers: optional time-distributed CNN, LSTM stack, dense head.

use rand::Rng;

use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::arch::{ArchKind, ArchitectureSpec, FlattenScope, InputShape};
use crate::nn::layers::{cross_entropy_loss, dense_forward, dropout_mask, lstm_layer_forward_masked, LstmVars, Mode};
use crate::nn::params::{Layout, ModelParameters};
use crate::tensor::{Real, Tensor};

/// An architecture together with its parameters and input geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ArchitectureSpec,
    pub input: InputShape,
    pub layout: Layout,
    pub params: ModelParameters<T>,
    /// Flat grid indices fed to a masked pure LSTM, in scan order.
    mask_index: Option<Vec<usize>>,
}

impl<T: Real> Model<T> {
    /// Freshly initialized model. `mask_index` lists in-mask voxels and is
    /// required for a pure LSTM with `flatten_scope = mask`.
    pub fn new<R: Rng>(spec: ArchitectureSpec, grid: [usize; 3], mask_index: Option<Vec<usize>>, rng: &mut R) -> Result<Self> {
        let input = InputShape {
            grid,
            mask_voxels: mask_index.as_ref().map(Vec::len),
        };
        let (params, layout) = ModelParameters::init(&spec, &input, rng)?;
        let model = Model {
            spec,
            input,
            layout,
            params,
            mask_index,
        };
        model.check_mask()?;
        Ok(model)
    }

    /// Reassembles a model from stored parameters; shapes are validated
    /// against a freshly derived layout.
    pub fn from_parts(spec: ArchitectureSpec, grid: [usize; 3], mask_index: Option<Vec<usize>>, params: ModelParameters<T>) -> Result<Self> {
        let mut probe = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let reference = Model::<T>::new(spec.clone(), grid, mask_index, &mut probe)?;
        if reference.params.len() != params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (want, got) in reference.params.iter().zip(params.iter()) {
            if want.path != got.path || want.value.shape() != got.value.shape() {
                return Err(Error::Data(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    got.path,
                    got.value.shape(),
                    want.path,
                    want.value.shape()
                )));
            }
        }
        Ok(Model { params, ..reference })
    }

    fn check_mask(&self) -> Result<()> {
        if let Some(idx) = &self.mask_index {
            let n: usize = self.input.grid.iter().product();
            if idx.iter().any(|&i| i >= n) {
                return Err(Error::Shape("mask index outside the grid".into()));
            }
        }
        Ok(())
    }

    pub fn mask_index(&self) -> Option<&[usize]> {
        self.mask_index.as_deref()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    /// Per-frame feature vector that enters the LSTM stack.
    fn frame_features(&self, tape: &mut Tape<T>, vars: &[Var], frame: Tensor<T>) -> Result<Var> {
        let [x, y, z] = self.input.grid;
        match self.spec.kind {
            ArchKind::Rcnn => {
                let mut h = tape.constant(frame.reshape(&[1, x, y, z])?);
                for block in &self.layout.conv {
                    for &(k, b) in block {
                        h = tape.conv3d(h, vars[k], vars[b], self.spec.padding)?;
                        h = tape.relu(h);
                    }
                    h = tape.maxpool3d(h)?;
                }
                let n = tape.value(h).len();
                tape.reshape(h, &[n])
            }
            ArchKind::PureLstm => match (self.spec.flatten_scope, &self.mask_index) {
                (FlattenScope::Grid, _) => Ok(tape.constant(frame.reshape(&[x * y * z])?)),
                (FlattenScope::Mask, Some(idx)) => {
                    let data = frame.data();
                    let v = idx.iter().map(|&i| data[i]).collect::<Vec<_>>();
                    Ok(tape.constant(Tensor::from_vec(&[idx.len()], v)?))
                }
                (FlattenScope::Mask, None) => Err(Error::Config("masked lstm input without a mask".into())),
            },
        }
    }

    /// Class log-probabilities for one `(T, X, Y, Z)` window. `vars` come
    /// from [`Model::bind`] on the same tape.
    pub fn forward<R: Rng>(&self, tape: &mut Tape<T>, vars: &[Var], window: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Var> {
        let s = window.shape();
        if s.len() != 4 || s[1..] != self.input.grid {
            return Err(Error::Shape(format!(
                "window {s:?} does not match model grid {:?}",
                self.input.grid
            )));
        }
        if vars.len() != self.params.len() {
            return Err(Error::Contract("parameter bindings do not match the model".into()));
        }
        let steps = s[0];
        let mut seq = Vec::with_capacity(steps);
        for t in 0..steps {
            let frame = window.slice_outer(t, 1)?;
            seq.push(self.frame_features(tape, vars, frame)?);
        }

        let rate = self.spec.dropout;
        let train = mode == Mode::Train && rate > 0.0;
        let n_layers = self.layout.lstm.len();
        for (l, &(w, u, b)) in self.layout.lstm.iter().enumerate() {
            let p = LstmVars {
                input: vars[w],
                recurrent: vars[u],
                bias: vars[b],
            };
            let d_in = tape.shape(p.input)[1];
            let input_mask = if train {
                Some(tape.constant(dropout_mask(d_in, rate, rng)?))
            } else {
                None
            };
            let output_mask = if train && l + 1 == n_layers {
                Some(tape.constant(dropout_mask(self.spec.lstm_hidden, rate, rng)?))
            } else {
                None
            };
            seq = lstm_layer_forward_masked(tape, &seq, &p, input_mask, output_mask)?;
        }
        let last = *seq.last().expect("non-empty sequence");
        let (hw, hb) = self.layout.head;
        let logits = dense_forward(tape, last, vars[hw], vars[hb])?;
        tape.log_softmax(logits)
    }

    /// Inference-mode log-probabilities without recording gradients.
    pub fn predict_log_probs(&self, window: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::inference();
        let vars = self.bind(&mut tape, false);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.forward(&mut tape, &vars, window, Mode::Inference, &mut rng)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Functional form of [`Model::forward`].
pub fn model_forward<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    vars: &[Var],
    window: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    model.forward(tape, vars, window, mode, rng)
}

/// Most probable class; exact ties go to the highest class index.
pub fn predicted_class<T: Real>(log_probs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in log_probs.iter().enumerate() {
        if v >= log_probs[best] {
            best = i;
        }
    }
    best
}

/// Result of one training sample's forward/backward pass.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub loss: f64,
    pub predicted: usize,
}

/// Forward and backward for one labelled window, accumulating parameter
/// gradients into `acc`.
pub fn accumulate_sample_gradient<T: Real, R: Rng>(
    model: &Model<T>,
    window: &Tensor<T>,
    label: usize,
    mode: Mode,
    rng: &mut R,
    acc: &mut crate::nn::params::ParamGrads<T>,
) -> Result<SampleOutcome> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let lp = model.forward(&mut tape, &vars, window, mode, rng)?;
    let predicted = predicted_class(tape.value(lp).data());
    let loss = cross_entropy_loss(&mut tape, lp, label)?;
    let loss_value = tape.value(loss).item()?.as_f64();
    let grads = tape.backward(loss)?;
    for (buf, v) in acc.buffers.iter_mut().zip(&vars) {
        if let Some(g) = grads.raw(*v) {
            for (a, &b) in buf.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok(SampleOutcome {
        loss: loss_value,
        predicted,
    })
}
