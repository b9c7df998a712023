//! Reverse-mode differentiation tape.
//!
//! Every operation appends one node holding its forward value and the data
//! its backward rule needs. Node ids are handed out in recording order, so
//! the node list is already topologically sorted and a single reverse sweep
//! visits each recorded operation exactly once.

use std::collections::BTreeSet;
use std::fmt;

use crate::autodiff::kernels::{ConvGeometry, Padding, PoolGeometry};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Relu,
    MatMul,
    Sum,
    Reshape,
    Slice,
    Conv3d,
    MaxPool3d,
    LogSoftmax,
    Pick,
}

impl OpKind {
    /// Every operation with a backward rule.
    pub const DIFFERENTIABLE: &'static [OpKind] = &[
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::MatMul,
        OpKind::Sum,
        OpKind::Reshape,
        OpKind::Slice,
        OpKind::Conv3d,
        OpKind::MaxPool3d,
        OpKind::LogSoftmax,
        OpKind::Pick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::MatMul => "matmul",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
            OpKind::Slice => "slice",
            OpKind::Conv3d => "conv3d",
            OpKind::MaxPool3d => "maxpool3d",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Pick => "pick",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::DIFFERENTIABLE
            .iter()
            .chain([OpKind::Leaf, OpKind::Constant].iter())
            .copied()
            .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Binary elementwise operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Unary elementwise operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Binary(BinaryOp, Var, Var),
    Scale(Var, T),
    Unary(UnaryOp, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Sum(Var),
    Reshape(Var),
    Slice { src: Var, start: usize },
    Conv3d { input: Var, kernel: Var, bias: Var, geom: ConvGeometry },
    MaxPool3d { input: Var, argmax: Vec<usize> },
    LogSoftmax(Var),
    Pick { src: Var, index: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Binary(BinaryOp::Add, ..) => OpKind::Add,
            Op::Binary(BinaryOp::Sub, ..) => OpKind::Sub,
            Op::Binary(BinaryOp::Mul, ..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Unary(UnaryOp::Sigmoid, _) => OpKind::Sigmoid,
            Op::Unary(UnaryOp::Tanh, _) => OpKind::Tanh,
            Op::Unary(UnaryOp::Relu, _) => OpKind::Relu,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Sum(_) => OpKind::Sum,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Slice { .. } => OpKind::Slice,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::MaxPool3d { .. } => OpKind::MaxPool3d,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Pick { .. } => OpKind::Pick,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recorder for one forward/backward pass. Confined to a single
/// thread; parallel training uses one tape per worker.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            fault: None,
        }
    }

    /// A tape that records values only; nothing on it requires gradients and
    /// backward data is not retained.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            fault: None,
        }
    }

    /// Test hook: scales the upstream gradient of every `kind` operation by
    /// 1.5 during backward, producing a deliberately wrong rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Kinds of every operation recorded so far.
    pub fn recorded_kinds(&self) -> BTreeSet<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if self.grad_enabled || matches!(op, Op::Leaf | Op::Constant) {
            op
        } else {
            // Keep the kind for bookkeeping but drop saved backward data.
            match op {
                Op::MaxPool3d { input, .. } => Op::MaxPool3d {
                    input,
                    argmax: Vec::new(),
                },
                other => other,
            }
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(ta.shape(), data)?
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::Shape(format!(
                "{op:?} of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Multiplication by a constant scalar.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let out = match op {
            UnaryOp::Sigmoid => self.value(a).map(sigmoid),
            UnaryOp::Tanh => self.value(a).map(|x| x.tanh()),
            UnaryOp::Relu => self.value(a).map(|x| if x > T::zero() { x } else { T::zero() }),
        };
        let rg = self.rg(a);
        self.push(out, Op::Unary(op, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    /// Rank-2 matrix product `(m x k) . (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Sum of all elements, as a shape-`[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Contiguous run of elements `start..start + product(shape)` of the
    /// row-major storage, viewed with the given shape.
    pub fn slice(&mut self, a: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let n: usize = shape.iter().product();
        if n == 0 || start + n > src.len() {
            return Err(Error::Shape(format!(
                "slice {start}..{} of a {}-element tensor",
                start + n,
                src.len()
            )));
        }
        let out = Tensor::from_vec(shape, src.data()[start..start + n].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Slice { src: a, start }, rg))
    }

    /// 3x3x3 convolution, stride 1, of a `(C_in, X, Y, Z)` input.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let bias_shape = self.shape(bias);
        if bias_shape.len() != 1 {
            return Err(Error::Shape(format!("conv3d bias must be rank-1, got {bias_shape:?}")));
        }
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), bias_shape[0], padding)?;
        let out = geom.forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let out = Tensor::from_vec(&geom.output_shape(), out)?;
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(out, Op::Conv3d { input, kernel, bias, geom }, rg))
    }

    /// 2x2x2 max pooling, stride 2, of a `(C, X, Y, Z)` input.
    pub fn maxpool3d(&mut self, input: Var) -> Result<Var> {
        let geom = PoolGeometry::new(self.shape(input))?;
        let (values, argmax) = geom.forward(self.value(input).data());
        let out = Tensor::from_vec(&geom.output_shape(), values)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool3d { input, argmax }, rg))
    }

    /// Log-softmax over all elements of a rank-1 tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 1 {
            return Err(Error::Shape(format!(
                "log_softmax expects a vector, got {:?}",
                x.shape()
            )));
        }
        let max = x.data().iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + x.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let out = x.map(|v| v - lse);
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Single element `a[index]` (flat index) as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let x = self.value(a);
        if index >= x.len() {
            return Err(Error::Shape(format!(
                "pick index {index} out of range for {:?}",
                x.shape()
            )));
        }
        let out = Tensor::scalar(x.data()[index]);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Pick { src: a, index }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let loss_len = self.value(loss).len();
        if loss_len != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                for v in &mut g {
                    *v *= T::of(1.5);
                }
            }
            self.apply_rule(i, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf))
            .collect::<Vec<_>>();
        for (slot, is_leaf) in grads.iter_mut().zip(leaves) {
            if !is_leaf {
                *slot = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn apply_rule(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (la, lb) = (ta.len(), tb.len());
                let n = g.len();
                // factor the second operand contributes to da, and vice versa
                let db_sign = if *op == BinaryOp::Sub { -T::one() } else { T::one() };
                if let Some(da) = self.slot(*a, grads) {
                    for j in 0..n {
                        let factor = match op {
                            BinaryOp::Mul => tb.data()[if lb == 1 { 0 } else { j }],
                            _ => T::one(),
                        };
                        da[if la == 1 { 0 } else { j }] += g[j] * factor;
                    }
                }
                if let Some(db) = self.slot(*b, grads) {
                    for j in 0..n {
                        let factor = match op {
                            BinaryOp::Mul => ta.data()[if la == 1 { 0 } else { j }],
                            _ => db_sign,
                        };
                        db[if lb == 1 { 0 } else { j }] += g[j] * factor;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(*a, grads) {
                    for (d, &gj) in da.iter_mut().zip(g) {
                        *d += gj * *c;
                    }
                }
            }
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                if let Some(da) = self.slot(*a, grads) {
                    for j in 0..g.len() {
                        let local = match op {
                            UnaryOp::Sigmoid => y[j] * (T::one() - y[j]),
                            UnaryOp::Tanh => T::one() - y[j] * y[j],
                            UnaryOp::Relu => {
                                if x[j] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        da[j] += g[j] * local;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                if let Some(da) = self.slot(*a, grads) {
                    // dA (m x k) += G (m x n) . B^T (n x k)
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv, 1, n as isize, T::one(), da, k as isize, 1);
                }
                if let Some(db) = self.slot(*b, grads) {
                    // dB (k x n) += A^T (k x m) . G (m x n)
                    T::gemm(k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1);
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(*a, grads) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.slot(*a, grads) {
                    for (d, &gj) in da.iter_mut().zip(g) {
                        *d += gj;
                    }
                }
            }
            Op::Slice { src, start } => {
                if let Some(ds) = self.slot(*src, grads) {
                    for (d, &gj) in ds[*start..*start + g.len()].iter_mut().zip(g) {
                        *d += gj;
                    }
                }
            }
            Op::Conv3d { input, kernel, bias, geom } => {
                let iv = self.value(*input).data();
                let kv = self.value(*kernel).data();
                // Three disjoint slots; take them out to satisfy the borrow checker.
                let mut di = self.take_slot(*input, grads);
                let mut dk = self.take_slot(*kernel, grads);
                let mut db = self.take_slot(*bias, grads);
                geom.backward(iv, kv, g, di.as_deref_mut(), dk.as_deref_mut(), db.as_deref_mut());
                for (v, s) in [(*input, di), (*kernel, dk), (*bias, db)] {
                    if s.is_some() {
                        grads[v.0] = s;
                    }
                }
            }
            Op::MaxPool3d { input, argmax } => {
                if let Some(di) = self.slot(*input, grads) {
                    for (&idx, &gj) in argmax.iter().zip(g) {
                        di[idx] += gj;
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if let Some(da) = self.slot(*a, grads) {
                    let total: T = g.iter().copied().sum();
                    for j in 0..g.len() {
                        da[j] += g[j] - y[j].exp() * total;
                    }
                }
            }
            Op::Pick { src, index } => {
                if let Some(ds) = self.slot(*src, grads) {
                    ds[*index] += g[0];
                }
            }
        }
    }

    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<T>>]) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn take_slot(&self, v: Var, grads: &mut [Option<Vec<T>>]) -> Option<Vec<T>> {
        self.slot(v, grads)?;
        grads[v.0].take()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf; zeros when the loss does not depend
    /// on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape).expect("gradient shape"),
        }
    }

    /// Raw gradient buffer, if any contribution reached the leaf.
    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}
