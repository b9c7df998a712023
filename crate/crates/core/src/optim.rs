//! Adam with bias correction, plus L2 regularization of conv and dense
//! weights.

use crate::error::{Error, Result};
use crate::nn::params::{ModelParameters, ParamGrads};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Penalty weight λ applied to conv kernels and dense weights.
    pub l2_lambda: f64,
    /// Gradient multiplier for the penalty: 2 for `λ‖θ‖²`, 1 for `λ‖θ‖²/2`.
    pub l2_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l2_lambda: 1e-4,
            l2_factor: 2.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.l2_lambda >= 0.0
            && self.l2_factor >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Adds `l2_factor * λ * θ` to the gradient of every parameter whose kind is
/// L2-eligible.
pub fn apply_l2<T: Real>(grads: &mut ParamGrads<T>, params: &ModelParameters<T>, cfg: &OptimizerConfig) {
    if cfg.l2_lambda == 0.0 {
        return;
    }
    let c = T::of(cfg.l2_factor * cfg.l2_lambda);
    for (g, p) in grads.buffers.iter_mut().zip(params.iter()) {
        if !p.kind.l2_eligible() {
            continue;
        }
        for (gi, &w) in g.iter_mut().zip(p.value.data()) {
            *gi += c * w;
        }
    }
}

/// One Adam update. Fails without touching anything if the gradients are
/// misshapen or contain non-finite values.
pub fn adam_step<T: Real>(
    params: &mut ModelParameters<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.buffers.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients / {} moments for {} parameters",
            grads.buffers.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, (g, p)) in grads.buffers.iter().zip(params.iter()).enumerate() {
        if g.len() != p.value.len() || state.m[i].len() != g.len() {
            return Err(Error::Contract(format!(
                "gradient for `{}` has {} elements, parameter has {}",
                p.path,
                g.len(),
                p.value.len()
            )));
        }
        if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient {} at element {bad} of `{}` (step {})",
                g[bad],
                p.path,
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powi(t));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.epsilon);
    for (i, g) in grads.buffers.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let theta = params.value_mut(i).data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] = theta[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamKind;
    use crate::tensor::Tensor;

    fn single(value: f64, kind: ParamKind) -> ModelParameters<f64> {
        let mut p = ModelParameters::new();
        p.push("w", kind, Tensor::from_vec(&[1], vec![value]).unwrap()).unwrap();
        p
    }

    fn grad(g: f64) -> ParamGrads<f64> {
        ParamGrads { buffers: vec![vec![g]] }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = OptimizerConfig::default();
        let mut p = single(0.3, ParamKind::LstmInput);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &grad(1.0), &mut s, &cfg).unwrap();
        let expected = 0.3 - 1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p.get(0).value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = OptimizerConfig::default();
        let mut p = single(0.7, ParamKind::DenseWeight);
        let mut s = AdamState::new(&p);
        for _ in 0..20 {
            adam_step(&mut p, &grad(0.0), &mut s, &cfg).unwrap();
        }
        assert_eq!(p.get(0).value.data()[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let cfg = OptimizerConfig::default();
        let mut p = single(0.7, ParamKind::DenseWeight);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &grad(f64::NAN), &mut s, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
        assert_eq!(s.step, 0);
        assert_eq!(p.get(0).value.data()[0], 0.7);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let cfg = OptimizerConfig::default();
        let mut p = single(0.7, ParamKind::DenseWeight);
        let mut s = AdamState::new(&p);
        let bad = ParamGrads { buffers: vec![vec![1.0, 2.0]] };
        assert!(matches!(adam_step(&mut p, &bad, &mut s, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn l2_examples() {
        let mut cfg = OptimizerConfig::default();
        let p = single(1.0, ParamKind::DenseWeight);
        let mut g = grad(0.0);
        apply_l2(&mut g, &p, &cfg);
        assert!((g.buffers[0][0] - 2e-4).abs() < 1e-18);

        let zero = single(0.0, ParamKind::ConvKernel);
        let mut g = grad(0.5);
        apply_l2(&mut g, &zero, &cfg);
        assert_eq!(g.buffers[0][0], 0.5);

        cfg.l2_lambda = 0.0;
        let mut g = grad(0.5);
        apply_l2(&mut g, &p, &cfg);
        assert_eq!(g.buffers[0][0], 0.5);

        cfg.l2_lambda = 1e-4;
        for kind in [ParamKind::LstmInput, ParamKind::LstmRecurrent, ParamKind::ConvBias, ParamKind::DenseBias] {
            let mut g = grad(0.0);
            apply_l2(&mut g, &single(1.0, kind), &cfg);
            assert_eq!(g.buffers[0][0], 0.0);
        }
    }

    #[test]
    fn constant_gradient_scale_invariance() {
        let cfg = OptimizerConfig::default();
        let step_for = |g: f64| {
            let mut p = single(0.0, ParamKind::LstmInput);
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &grad(g), &mut s, &cfg).unwrap();
            p.get(0).value.data()[0]
        };
        let (a, b) = (step_for(0.3), step_for(3.0));
        assert!(((a - b) / a).abs() < 1e-6);
        assert!(a.abs() <= cfg.learning_rate * (1.0 + 1e-6));
    }

    #[test]
    fn decay_without_data_gradient() {
        let cfg = OptimizerConfig { learning_rate: 1e-2, ..Default::default() };
        let mut p = single(0.5, ParamKind::ConvKernel);
        let mut s = AdamState::new(&p);
        let mut last = 0.5f64;
        for _ in 0..30 {
            let mut g = grad(0.0);
            apply_l2(&mut g, &p, &cfg);
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
            let now = p.get(0).value.data()[0].abs();
            assert!(now < last);
            last = now;
        }
    }
}
