//! The finite-difference suite behind `voxflow gradcheck`: one case per
//! differentiable tape operation plus composite layers and whole models,
//! all in 64-bit on tiny shapes.

use std::cell::RefCell;
use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{away_from_kinks, check_gradients, CheckOutcome};
use crate::autodiff::kernels::Padding;
use crate::autodiff::tape::{OpKind, Tape, Var};
use crate::error::Result;
use crate::nn::arch::{ArchitectureSpec, FlattenScope};
use crate::nn::layers::{cross_entropy_loss, dense_forward, lstm_layer_forward_masked, LstmVars, Mode};
use crate::nn::model::Model;
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    /// The operation the case targets; `None` for composite cases.
    pub op: Option<OpKind>,
    pub shapes: String,
    pub seed: u64,
    pub tolerance: f64,
    pub outcome: CheckOutcome,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.outcome.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    /// Every operation recorded on any tape built by the suite.
    pub exercised: BTreeSet<OpKind>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed) && self.missing_ops().is_empty()
    }

    /// Differentiable operations without a dedicated case.
    pub fn missing_ops(&self) -> Vec<OpKind> {
        let targeted: BTreeSet<OpKind> = self.cases.iter().filter_map(|c| c.op).collect();
        OpKind::DIFFERENTIABLE.iter().copied().filter(|k| !targeted.contains(k)).collect()
    }

    /// Worst relative error per targeted operation.
    pub fn per_op(&self) -> Vec<(OpKind, f64)> {
        OpKind::DIFFERENTIABLE
            .iter()
            .filter_map(|&k| {
                self.cases
                    .iter()
                    .filter(|c| c.op == Some(k))
                    .map(|c| c.outcome.max_rel_error)
                    .reduce(f64::max)
                    .map(|e| (k, e))
            })
            .collect()
    }
}

fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
    Tensor::from_vec(shape, data).expect("shape and data agree")
}

/// Distinct values in a shuffled order, so max-pool windows have no ties.
fn distinct_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    data.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::from_vec(shape, data).expect("shape and data agree")
}

/// `sum(y * w)` with a fixed random `w`, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand_tensor(tape.shape(y), seed ^ 0x77, 1.0));
    let yw = tape.mul(y, w)?;
    Ok(tape.sum(yw))
}

type CaseFn<'a> = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a>;

struct Case<'a> {
    name: &'static str,
    op: Option<OpKind>,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
    tolerance: f64,
    f: CaseFn<'a>,
}

fn op_case<'a>(name: &'static str, op: OpKind, seed: u64, inputs: Vec<Tensor<f64>>, f: CaseFn<'a>) -> Case<'a> {
    Case { name, op: Some(op), inputs, seed, tolerance: OP_TOLERANCE, f }
}

fn tiny_model(spec: ArchitectureSpec, grid: [usize; 3], seed: u64) -> Result<Model<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(spec, grid, None, &mut rng)
}

/// Runs every case. `corrupt` deliberately breaks one backward rule (a
/// negative control for the checker itself).
pub fn run_gradient_suite(corrupt: Option<OpKind>) -> Result<SuiteReport> {
    let mut rcnn = ArchitectureSpec::rcnn(&[(2, 3), (1, 3)]);
    rcnn.lstm_hidden = 3;
    let mut lstm = ArchitectureSpec::lstm();
    lstm.lstm_hidden = 3;
    lstm.flatten_scope = FlattenScope::Grid;
    let models = [
        ("model-rcnn", tiny_model(rcnn, [6, 6, 4], 35)?, [3, 6, 6, 4], 35u64),
        ("model-lstm", tiny_model(lstm, [3, 2, 2], 36)?, [4, 3, 2, 2], 36u64),
    ];
    let t = rand_tensor;
    let mut cases: Vec<Case> = vec![
        op_case("add", OpKind::Add, 1, vec![t(&[3, 4], 1, 1.0), t(&[3, 4], 2, 1.0)], Box::new(|tp, v| {
            let y = tp.add(v[0], v[1])?;
            project(tp, y, 1)
        })),
        op_case("sub", OpKind::Sub, 3, vec![t(&[3, 4], 3, 1.0), t(&[3, 4], 4, 1.0)], Box::new(|tp, v| {
            let y = tp.sub(v[0], v[1])?;
            project(tp, y, 3)
        })),
        op_case("mul", OpKind::Mul, 5, vec![t(&[2, 5], 5, 1.0), t(&[2, 5], 6, 1.0)], Box::new(|tp, v| {
            let y = tp.mul(v[0], v[1])?;
            let y = tp.tanh(y);
            Ok(tp.sum(y))
        })),
        op_case("scale", OpKind::Scale, 7, vec![t(&[6], 7, 1.0)], Box::new(|tp, v| {
            let y = tp.scale(v[0], -1.7);
            project(tp, y, 7)
        })),
        op_case("sigmoid", OpKind::Sigmoid, 8, vec![t(&[7], 8, 3.0)], Box::new(|tp, v| {
            let y = tp.sigmoid(v[0]);
            project(tp, y, 8)
        })),
        op_case("tanh", OpKind::Tanh, 9, vec![t(&[7], 9, 2.0)], Box::new(|tp, v| {
            let y = tp.tanh(v[0]);
            project(tp, y, 9)
        })),
        op_case("relu", OpKind::Relu, 10, vec![away_from_kinks(&t(&[9], 10, 1.0), 0.1)], Box::new(|tp, v| {
            let y = tp.relu(v[0]);
            project(tp, y, 10)
        })),
        op_case("matmul", OpKind::MatMul, 11, vec![t(&[3, 4], 11, 1.0), t(&[4, 2], 12, 1.0)], Box::new(|tp, v| {
            let y = tp.matmul(v[0], v[1])?;
            project(tp, y, 11)
        })),
        op_case("sum", OpKind::Sum, 13, vec![t(&[2, 3], 13, 1.0)], Box::new(|tp, v| {
            let s = tp.sum(v[0]);
            Ok(tp.tanh(s))
        })),
        op_case("reshape", OpKind::Reshape, 14, vec![t(&[3, 4], 14, 1.0)], Box::new(|tp, v| {
            let y = tp.reshape(v[0], &[2, 6])?;
            project(tp, y, 14)
        })),
        op_case("slice", OpKind::Slice, 15, vec![t(&[10], 15, 1.0)], Box::new(|tp, v| {
            let y = tp.slice(v[0], 3, &[4])?;
            project(tp, y, 15)
        })),
        op_case(
            "conv3d-same",
            OpKind::Conv3d,
            16,
            vec![t(&[2, 4, 4, 3], 16, 1.0), t(&[3, 2, 3, 3, 3], 17, 0.5), t(&[3], 18, 0.5)],
            Box::new(|tp, v| {
                let y = tp.conv3d(v[0], v[1], v[2], Padding::Same)?;
                project(tp, y, 16)
            }),
        ),
        op_case(
            "conv3d-valid",
            OpKind::Conv3d,
            19,
            vec![t(&[1, 5, 4, 4], 19, 1.0), t(&[2, 1, 3, 3, 3], 20, 0.5), t(&[2], 21, 0.5)],
            Box::new(|tp, v| {
                let y = tp.conv3d(v[0], v[1], v[2], Padding::Valid)?;
                project(tp, y, 19)
            }),
        ),
        op_case("maxpool3d", OpKind::MaxPool3d, 22, vec![distinct_tensor(&[2, 4, 4, 5], 22)], Box::new(|tp, v| {
            let y = tp.maxpool3d(v[0])?;
            project(tp, y, 22)
        })),
        op_case("log_softmax", OpKind::LogSoftmax, 23, vec![t(&[5], 23, 2.0)], Box::new(|tp, v| {
            let y = tp.log_softmax(v[0])?;
            project(tp, y, 23)
        })),
        op_case("pick", OpKind::Pick, 24, vec![t(&[4], 24, 1.0)], Box::new(|tp, v| {
            let y = tp.tanh(v[0]);
            let p = tp.pick(y, 2)?;
            Ok(tp.scale(p, 3.0))
        })),
        Case {
            name: "dense",
            op: None,
            inputs: vec![t(&[4], 25, 1.0), t(&[3, 4], 26, 1.0), t(&[3], 27, 1.0)],
            seed: 25,
            tolerance: OP_TOLERANCE,
            f: Box::new(|tp, v| {
                let y = dense_forward(tp, v[0], v[1], v[2])?;
                project(tp, y, 25)
            }),
        },
        Case {
            name: "lstm-3-step",
            op: None,
            inputs: vec![
                t(&[8, 3], 28, 0.8),
                t(&[8, 2], 29, 0.8),
                t(&[8], 30, 0.5),
                t(&[3], 31, 1.0),
                t(&[3], 32, 1.0),
                t(&[3], 33, 1.0),
            ],
            seed: 28,
            tolerance: OP_TOLERANCE,
            f: Box::new(|tp, v| {
                let p = LstmVars { input: v[0], recurrent: v[1], bias: v[2] };
                let hs = lstm_layer_forward_masked(tp, &v[3..6], &p, None, None)?;
                project(tp, hs[2], 28)
            }),
        },
        Case {
            name: "cross-entropy",
            op: None,
            inputs: vec![t(&[2], 34, 2.0)],
            seed: 34,
            tolerance: OP_TOLERANCE,
            f: Box::new(|tp, v| {
                let lp = tp.log_softmax(v[0])?;
                cross_entropy_loss(tp, lp, 1)
            }),
        },
    ];

    for (name, model, shape, seed) in &models {
        let window = rand_tensor(shape, seed + 100, 1.0);
        cases.push(Case {
            name,
            op: None,
            inputs: model.params.iter().map(|p| p.value.clone()).collect(),
            seed: *seed,
            tolerance: MODEL_TOLERANCE,
            f: Box::new(move |tp, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let lp = model.forward(tp, v, &window, Mode::Inference, &mut rng)?;
                cross_entropy_loss(tp, lp, 1)
            }),
        });
    }

    let exercised = RefCell::new(BTreeSet::new());
    let mut results = Vec::with_capacity(cases.len());
    for case in &cases {
        let outcome = check_gradients(
            |tape, vars| {
                if let Some(k) = corrupt {
                    tape.corrupt_backward(k);
                }
                let out = (case.f)(tape, vars)?;
                exercised.borrow_mut().extend(tape.recorded_kinds());
                Ok(out)
            },
            &case.inputs,
            FD_STEP,
        )?;
        let shapes = case
            .inputs
            .iter()
            .take(3)
            .map(|x| format!("{:?}", x.shape()))
            .collect::<Vec<_>>()
            .join(" ");
        let shapes = if case.inputs.len() > 3 { format!("{shapes} +{} more", case.inputs.len() - 3) } else { shapes };
        results.push(CaseResult {
            name: case.name.to_string(),
            op: case.op,
            shapes,
            seed: case.seed,
            tolerance: case.tolerance,
            outcome,
        });
    }
    Ok(SuiteReport { cases: results, exercised: exercised.into_inner() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes_with_full_coverage() {
        let r = run_gradient_suite(None).unwrap();
        for c in &r.cases {
            assert!(c.passed(), "{} failed: {:?}", c.name, c.outcome);
        }
        assert!(r.missing_ops().is_empty());
        for k in OpKind::DIFFERENTIABLE {
            assert!(r.exercised.contains(k), "{k} never recorded");
        }
        assert_eq!(r.per_op().len(), OpKind::DIFFERENTIABLE.len());
    }

    #[test]
    fn corrupted_rule_is_caught_and_named() {
        let r = run_gradient_suite(Some(OpKind::Tanh)).unwrap();
        assert!(!r.passed());
        let tanh = r.cases.iter().find(|c| c.op == Some(OpKind::Tanh)).unwrap();
        assert!(!tanh.passed());
        let relu = r.cases.iter().find(|c| c.op == Some(OpKind::Relu)).unwrap();
        assert!(relu.passed());
    }
}
