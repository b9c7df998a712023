//! Layer functions recorded on a [`Tape`].

use rand::Rng;

use crate::autodiff::kernels::Padding;
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Dropout around LSTM layers. Masks are drawn once per sample and reused
/// across all time steps of that sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutPlan {
    pub rate: f64,
    pub mode: Mode,
}

impl DropoutPlan {
    pub fn new(rate: f64, mode: Mode) -> Result<Self> {
        check_rate(rate)?;
        Ok(DropoutPlan { rate, mode })
    }

    pub fn active(&self) -> bool {
        self.mode == Mode::Train && self.rate > 0.0
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")))
    }
}

/// Inverted-dropout mask: zeros with probability `rate`, survivors `1/(1-rate)`.
pub fn dropout_mask<T: Real, R: Rng>(len: usize, rate: f64, rng: &mut R) -> Result<Tensor<T>> {
    check_rate(rate)?;
    let keep = T::of(1.0 / (1.0 - rate));
    Tensor::from_vec(
        &[len],
        (0..len)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect(),
    )
}

pub fn dropout_apply<T: Real, R: Rng>(tape: &mut Tape<T>, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    check_rate(rate)?;
    if mode == Mode::Inference || rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let mask = dropout_mask::<T, R>(tape.value(x).len(), rate, rng)?.reshape(&shape)?;
    let m = tape.constant(mask);
    tape.mul(x, m)
}

pub fn conv3d_forward<T: Real>(tape: &mut Tape<T>, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
    tape.conv3d(input, kernel, bias, padding)
}

pub fn maxpool3d_forward<T: Real>(tape: &mut Tape<T>, input: Var) -> Result<Var> {
    tape.maxpool3d(input)
}

/// `W x + b` for a vector `x`.
pub fn dense_forward<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (ws, xs) = (tape.shape(w).to_vec(), tape.shape(x).to_vec());
    if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] || tape.shape(b) != [ws[0]] {
        return Err(Error::Shape(format!(
            "dense layer: weight {ws:?}, input {xs:?}, bias {:?}",
            tape.shape(b)
        )));
    }
    let col = tape.reshape(x, &[xs[0], 1])?;
    let y = tape.matmul(w, col)?;
    let y = tape.reshape(y, &[ws[0]])?;
    tape.add(y, b)
}

/// Gate-stacked LSTM weights: rows are the i, f, g, o gates in that order.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    /// `(4h, d_in)`
    pub input: Var,
    /// `(4h, h)`
    pub recurrent: Var,
    /// `(4h)`
    pub bias: Var,
}

impl LstmVars {
    fn dims<T: Real>(&self, tape: &Tape<T>) -> Result<(usize, usize)> {
        let w = tape.shape(self.input);
        let u = tape.shape(self.recurrent);
        if w.len() != 2 || u.len() != 2 || !w[0].is_multiple_of(4) {
            return Err(Error::Shape(format!("lstm weights {w:?} / {u:?}")));
        }
        let h = w[0] / 4;
        if u != [4 * h, h] || tape.shape(self.bias) != [4 * h] {
            return Err(Error::Shape(format!(
                "lstm recurrent {u:?} / bias {:?} inconsistent with hidden size {h}",
                tape.shape(self.bias)
            )));
        }
        Ok((w[1], h))
    }
}

/// One LSTM step: returns `(h, c)`.
pub fn lstm_step<T: Real>(tape: &mut Tape<T>, x: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let (d_in, h) = p.dims(tape)?;
    if tape.shape(x) != [d_in] || tape.shape(h_prev) != [h] || tape.shape(c_prev) != [h] {
        return Err(Error::Shape(format!(
            "lstm step expects x ({d_in}), h ({h}), c ({h}); got {:?}, {:?}, {:?}",
            tape.shape(x),
            tape.shape(h_prev),
            tape.shape(c_prev)
        )));
    }
    let xc = tape.reshape(x, &[d_in, 1])?;
    let hc = tape.reshape(h_prev, &[h, 1])?;
    let zx = tape.matmul(p.input, xc)?;
    let zh = tape.matmul(p.recurrent, hc)?;
    let z = tape.add(zx, zh)?;
    let z = tape.reshape(z, &[4 * h])?;
    let z = tape.add(z, p.bias)?;
    let gate = |tape: &mut Tape<T>, k: usize| tape.slice(z, k * h, &[h]);
    let i = gate(tape, 0)?;
    let f = gate(tape, 1)?;
    let g = gate(tape, 2)?;
    let o = gate(tape, 3)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c))
}

/// Runs an LSTM layer over a sequence from zero initial state, applying
/// optional per-sample masks to every input and every output step.
pub fn lstm_layer_forward_masked<T: Real>(
    tape: &mut Tape<T>,
    xs: &[Var],
    p: &LstmVars,
    input_mask: Option<Var>,
    output_mask: Option<Var>,
) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(Error::Contract("lstm layer over an empty sequence".into()));
    }
    let (_, h) = p.dims(tape)?;
    let mut h_prev = tape.constant(Tensor::zeros(&[h])?);
    let mut c_prev = tape.constant(Tensor::zeros(&[h])?);
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let x = match input_mask {
            Some(m) => tape.mul(x, m)?,
            None => x,
        };
        let (h_new, c_new) = lstm_step(tape, x, h_prev, c_prev, p)?;
        out.push(match output_mask {
            Some(m) => tape.mul(h_new, m)?,
            None => h_new,
        });
        h_prev = h_new;
        c_prev = c_new;
    }
    Ok(out)
}

/// LSTM layer with dropout at its input and output boundaries per `plan`.
pub fn lstm_layer_forward<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    xs: &[Var],
    p: &LstmVars,
    plan: &DropoutPlan,
    rng: &mut R,
) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(Error::Contract("lstm layer over an empty sequence".into()));
    }
    let (d_in, h) = p.dims(tape)?;
    let (im, om) = if plan.active() {
        let im = dropout_mask::<T, R>(d_in, plan.rate, rng)?;
        let om = dropout_mask::<T, R>(h, plan.rate, rng)?;
        (Some(tape.constant(im)), Some(tape.constant(om)))
    } else {
        (None, None)
    };
    lstm_layer_forward_masked(tape, xs, p, im, om)
}

/// Negative log-likelihood of `label` under `log_probs`.
pub fn cross_entropy_loss<T: Real>(tape: &mut Tape<T>, log_probs: Var, label: usize) -> Result<Var> {
    let n = tape.value(log_probs).len();
    if label >= n {
        return Err(Error::Data(format!("label {label} out of range for {n} classes")));
    }
    let lp = tape.pick(log_probs, label)?;
    Ok(tape.scale(lp, -T::one()))
}
