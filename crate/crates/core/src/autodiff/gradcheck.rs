//! Central finite-difference checking of tape gradients (64-bit only).

use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error between analytic and numeric derivatives, floored so that
/// two exact zeros compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-12, analytic.abs() + numeric.abs())
}

/// Worst element found by a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOutcome {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks `f` against central differences with respect to every element of
/// every input. `f` must build a scalar on the tape from the supplied input
/// variables; it is called once with gradients enabled and twice per element
/// on inference tapes.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut outcome = CheckOutcome {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for j in 0..inputs[which].len() {
            let x0 = inputs[which].data()[j];
            probe[which].data_mut()[j] = x0 + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[j] = x0 - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            if err > outcome.max_rel_error || !err.is_finite() {
                outcome = CheckOutcome {
                    max_rel_error: if err.is_finite() { err } else { f64::INFINITY },
                    worst: (which, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(outcome)
}

/// Single-input form: maximum relative error of the gradient of `f` at `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let outcome = check_gradients(|t, v| f(t, v[0]), std::slice::from_ref(x), step)?;
    Ok(outcome.max_rel_error)
}

/// Moves elements lying within `margin` of zero out to `±margin`, keeping
/// test points away from the relu kink (zero goes to `+margin`).
pub fn away_from_kinks(x: &Tensor<f64>, margin: f64) -> Tensor<f64> {
    x.map(|v| {
        if v.abs() >= margin {
            v
        } else if v < 0.0 {
            v - margin
        } else {
            v + margin
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f64> {
        Tensor::from_vec(&[2, 3], vec![0.3, -1.2, 0.7, 2.0, -0.1, 0.05]).unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let err = finite_difference_check(|t, x| Ok(t.sum(x)), &sample(), 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_sum_within_tolerance() {
        let err = finite_difference_check(
            |t, x| {
                let s = t.sigmoid(x);
                Ok(t.sum(s))
            },
            &sample(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relu_checked_away_from_kink() {
        let x = away_from_kinks(&sample(), 0.1);
        assert!(x.data().iter().all(|v| v.abs() >= 0.1));
        let err = finite_difference_check(
            |t, x| {
                let r = t.relu(x);
                Ok(t.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(finite_difference_check(|t, x| Ok(t.sum(x)), &sample(), 0.0).is_err());
    }
}
