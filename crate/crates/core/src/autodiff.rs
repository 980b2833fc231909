//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to a [`Tape`]; node inputs always refer to
//! earlier nodes, so the insertion order is a topological order and the
//! backward pass is a single reverse sweep.
//!
//! ```
//! use drivesim::autodiff::Tape;
//! use drivesim::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```
//!
//! Kinked operations (`relu`, `min`, `max`, `clamp`) use the left
//! subgradient at the kink; ties in reductions resolve to the lowest index.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Broadcast),
    Sub(Broadcast),
    Mul(Broadcast),
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    MatMul { m: usize, k: usize, n: usize },
    Transpose { rows: usize, cols: usize },
    ConcatCols { widths: Vec<usize> },
    ConcatRows,
    Gather { rows: Vec<usize> },
    SliceCols { start: usize, len: usize },
    Reshape,
    Tanh,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Square,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SumRows,
    MaxRows { argmax: Vec<usize> },
    Min { arg: usize },
    Max { arg: usize },
    Norm2,
    Clamp { lo: f64, hi: f64 },
    Huber { delta: f64 },
    WrapAngle,
    StraightThrough { soft: Vec<f64> },
    Jacobian { jac: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(_) => "add",
            Op::Sub(_) => "sub",
            Op::Mul(_) => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::ConcatCols { .. } => "concat",
            Op::ConcatRows => "concat_rows",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape => "reshape",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumRows => "sum_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::Min { .. } => "min",
            Op::Max { .. } => "max",
            Op::Norm2 => "norm2",
            Op::Clamp { .. } => "clamp",
            Op::Huber { .. } => "huber",
            Op::WrapAngle => "wrap_angle",
            Op::StraightThrough { .. } => "straight_through_onehot",
            Op::Jacobian { .. } => "jacobian",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of its shape when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        detail: format!("{a:?} vs {b:?}"),
    }
}

fn softmax_rows(x: &Tensor) -> Vec<f64> {
    let cols = x.cols();
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}

/// Wraps an angle to `(-π, π]` through `atan2(sin, cos)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    if w <= -std::f64::consts::PI {
        w + 2.0 * std::f64::consts::PI
    } else {
        w
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<usize>) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, vec![])
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, vec![])
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb == [1] {
            Ok(Broadcast::Scalar)
        } else if sb.len() == 1 && sa.len() == 2 && sb[0] == sa[1] {
            Ok(Broadcast::Row)
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Broadcast) -> Op,
    ) -> Result<Var> {
        let kind = self.broadcast_kind(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Broadcast::Same => vb[i],
                    Broadcast::Scalar => vb[0],
                    Broadcast::Row => vb[i % cols],
                };
                f(x, y)
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, mk(kind), vec![a.0, b.0]))
    }

    /// Elementwise `a + b`; `b` may be a scalar or a row vector broadcast over rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise division of equal shapes.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err("div", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::Div, vec![a.0, b.0]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, vec![a.0])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg, |x| -x)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar, |x| x + s)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin, f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos, f64::cos)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt, f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp { lo, hi }, |x| x.max(lo).min(hi))
    }

    /// Elementwise Huber loss with transition point `delta`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        self.unary(a, Op::Huber { delta }, move |x| {
            if x.abs() <= delta {
                0.5 * x * x
            } else {
                delta * (x.abs() - 0.5 * delta)
            }
        })
    }

    /// Wraps angles to `(-π, π]`; gradient is the identity.
    pub fn wrap_angle(&mut self, a: Var) -> Var {
        self.unary(a, Op::WrapAngle, wrap_angle)
    }

    /// Matrix product. A 1-D left operand of length `k` is treated as `[1, k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k) = match sa {
            [k] => (1, *k),
            [m, k] => (*m, *k),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let n = match sb {
            [kb, n] if *kb == k => *n,
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = da[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        let shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { m, k, n }, vec![a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = match v.shape() {
            [r, c] => (*r, *c),
            s => return Err(shape_err("transpose", s, &[])),
        };
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = v.data()[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        Ok(self.push(value, Op::Transpose { rows, cols }, vec![a.0]))
    }

    /// Concatenates along the last axis. All inputs share the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        let two_d = first.shape().len() == 2;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows || (v.shape().len() == 2) != two_d {
                return Err(shape_err("concat", first.shape(), v.shape()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if two_d { vec![rows, total] } else { vec![total] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::ConcatCols { widths },
            parts.iter().map(|p| p.0).collect(),
        ))
    }

    /// Stacks inputs along the first axis. Vectors become rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols || v.shape().len() > 2 {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), v.shape()));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::ConcatRows, parts.iter().map(|p| p.0).collect()))
    }

    /// Selects rows of a matrix, or elements of a vector.
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (nrows, width) = if v.shape().len() == 1 {
            (v.len(), 1)
        } else {
            (v.rows(), v.cols())
        };
        if rows.is_empty() || rows.iter().any(|&r| r >= nrows) {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("indices {rows:?} out of range for {:?}", v.shape()),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&v.data()[r * width..(r + 1) * width]);
        }
        let shape = if v.shape().len() == 1 {
            vec![rows.len()]
        } else {
            vec![rows.len(), width]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Gather {
                rows: rows.to_vec(),
            },
            vec![a.0],
        ))
    }

    /// Columns `start..start+len` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let cols = v.cols();
        if len == 0 || start + len > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("{start}..{} of {:?}", start + len, v.shape()),
            });
        }
        let mut out = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SliceCols { start, len }, vec![a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape, vec![a.0]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::new(v.shape().to_vec(), softmax_rows(v)).expect("same shape");
        self.push(value, Op::Softmax, vec![a.0])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let mut out = vec![0.0; v.len()];
        for (src, dst) in v.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + src.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::LogSoftmax, vec![a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean, vec![a.0])
    }

    /// Sums a matrix over its rows, giving a vector of column sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let mut out = vec![0.0; cols];
        for r in 0..v.rows() {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        self.push(Tensor::vector(out), Op::SumRows, vec![a.0])
    }

    /// Columnwise maximum over rows (max-pooling).
    pub fn max_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let mut best = v.row(0).to_vec();
        let mut argmax = vec![0; cols];
        for r in 1..v.rows() {
            for (c, x) in v.row(r).iter().enumerate() {
                if *x > best[c] {
                    best[c] = *x;
                    argmax[c] = r;
                }
            }
        }
        self.push(Tensor::vector(best), Op::MaxRows { argmax }, vec![a.0])
    }

    /// Minimum over all elements.
    pub fn min(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let mut arg = 0;
        for (i, x) in d.iter().enumerate() {
            if *x < d[arg] {
                arg = i;
            }
        }
        let value = Tensor::scalar(d[arg]);
        self.push(value, Op::Min { arg }, vec![a.0])
    }

    /// Maximum over all elements.
    pub fn max(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let mut arg = 0;
        for (i, x) in d.iter().enumerate() {
            if *x > d[arg] {
                arg = i;
            }
        }
        let value = Tensor::scalar(d[arg]);
        self.push(value, Op::Max { arg }, vec![a.0])
    }

    /// Euclidean norm of all elements.
    pub fn norm2(&mut self, a: Var) -> Var {
        let n = self.value(a).norm();
        self.push(Tensor::scalar(n), Op::Norm2, vec![a.0])
    }

    /// Hard one-hot at the argmax of `logits + noise`, with the gradient of
    /// `softmax(logits + noise)` on the way back (straight-through estimator).
    pub fn straight_through_onehot(&mut self, logits: Var, noise: Option<&[f64]>) -> Result<Var> {
        let v = self.value(logits);
        if v.rows() != 1 {
            return Err(Error::Shape {
                op: "straight_through_onehot",
                detail: format!("expected a vector of logits, got {:?}", v.shape()),
            });
        }
        let mut perturbed = v.data().to_vec();
        if let Some(n) = noise {
            if n.len() != perturbed.len() {
                return Err(shape_err("straight_through_onehot", v.shape(), &[n.len()]));
            }
            for (p, e) in perturbed.iter_mut().zip(n) {
                *p += e;
            }
        }
        let mut arg = 0;
        for (i, x) in perturbed.iter().enumerate() {
            if *x > perturbed[arg] {
                arg = i;
            }
        }
        let soft = softmax_rows(&Tensor::vector(perturbed));
        let mut hard = vec![0.0; soft.len()];
        hard[arg] = 1.0;
        let value = Tensor::new(v.shape().to_vec(), hard)?;
        Ok(self.push(value, Op::StraightThrough { soft }, vec![logits.0]))
    }

    /// Records an externally evaluated function through its local Jacobian.
    ///
    /// `jac` is row-major with one row per output element and one column per
    /// input element, inputs laid out back to back in argument order.
    pub fn jacobian_op(&mut self, inputs: &[Var], value: Tensor, jac: Vec<f64>) -> Result<Var> {
        let in_len: usize = inputs.iter().map(|v| self.value(*v).len()).sum();
        if jac.len() != in_len * value.len() {
            return Err(Error::Shape {
                op: "jacobian",
                detail: format!(
                    "jacobian has {} entries, expected {}x{}",
                    jac.len(),
                    value.len(),
                    in_len
                ),
            });
        }
        Ok(self.push(value, Op::Jacobian { jac }, inputs.iter().map(|v| v.0).collect()))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let seed = Tensor::new(shape.to_vec(), vec![1.0])?;
        self.backward_from(loss, seed)
    }

    /// Backpropagates a vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_from(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err("backward", self.value(out).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.local_backward(node, &g);
            grads[idx] = Some(g);
            for (input, cg) in node.inputs.iter().zip(contributions) {
                let Some(cg) = cg else { continue };
                if !self.nodes[*input].requires_grad {
                    continue;
                }
                match &mut grads[*input] {
                    Some(acc) => acc.axpy(1.0, &cg),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Vec<Option<Tensor>> {
        let val = |i: usize| &self.nodes[node.inputs[i]].value;
        let like = |i: usize, data: Vec<f64>| {
            Some(Tensor::new(val(i).shape().to_vec(), data).expect("gradient shape"))
        };
        let gd = g.data();
        let out = node.value.data();
        let elementwise = |f: &dyn Fn(usize, f64) -> f64| -> Vec<Option<Tensor>> {
            let x = val(0).data();
            vec![like(0, (0..x.len()).map(|i| gd[i] * f(i, x[i])).collect())]
        };
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(kind) | Op::Sub(kind) => {
                let sign = if matches!(node.op, Op::Add(_)) { 1.0 } else { -1.0 };
                let gb = reduce_broadcast(gd, *kind, val(1).len(), val(0).cols());
                vec![
                    like(0, gd.to_vec()),
                    like(1, gb.into_iter().map(|x| sign * x).collect()),
                ]
            }
            Op::Mul(kind) => {
                let (a, b) = (val(0).data(), val(1).data());
                let cols = val(0).cols();
                let bidx = |i: usize| match kind {
                    Broadcast::Same => i,
                    Broadcast::Scalar => 0,
                    Broadcast::Row => i % cols,
                };
                let ga = (0..a.len()).map(|i| gd[i] * b[bidx(i)]).collect();
                let prod: Vec<f64> = (0..a.len()).map(|i| gd[i] * a[i]).collect();
                let gb = reduce_broadcast(&prod, *kind, b.len(), cols);
                vec![like(0, ga), like(1, gb)]
            }
            Op::Div => {
                let (a, b) = (val(0).data(), val(1).data());
                let ga = (0..a.len()).map(|i| gd[i] / b[i]).collect();
                let gb = (0..a.len()).map(|i| -gd[i] * a[i] / (b[i] * b[i])).collect();
                vec![like(0, ga), like(1, gb)]
            }
            Op::Neg => vec![like(0, gd.iter().map(|x| -x).collect())],
            Op::Scale(s) => vec![like(0, gd.iter().map(|x| s * x).collect())],
            Op::AddScalar | Op::Reshape | Op::WrapAngle => vec![like(0, gd.to_vec())],
            Op::MatMul { m, k, n } => {
                let (a, b) = (val(0).data(), val(1).data());
                let (m, k, n) = (*m, *k, *n);
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let aip = a[i * k + p];
                        if aip != 0.0 {
                            for (gbv, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *gbv += aip * gv;
                            }
                        }
                    }
                }
                vec![like(0, ga), like(1, gb)]
            }
            Op::Transpose { rows, cols } => {
                let mut ga = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        ga[i * cols + j] = gd[j * rows + i];
                    }
                }
                vec![like(0, ga)]
            }
            Op::ConcatCols { widths } => {
                let total: usize = widths.iter().sum();
                let rows = gd.len() / total;
                let mut offset = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (idx, &w) in widths.iter().enumerate() {
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    res.push(like(idx, part));
                }
                res
            }
            Op::ConcatRows => {
                let mut offset = 0;
                (0..node.inputs.len())
                    .map(|idx| {
                        let len = val(idx).len();
                        let part = gd[offset..offset + len].to_vec();
                        offset += len;
                        like(idx, part)
                    })
                    .collect()
            }
            Op::Gather { rows } => {
                let src = val(0);
                let width = if src.shape().len() == 1 { 1 } else { src.cols() };
                let mut ga = vec![0.0; src.len()];
                for (j, &r) in rows.iter().enumerate() {
                    for c in 0..width {
                        ga[r * width + c] += gd[j * width + c];
                    }
                }
                vec![like(0, ga)]
            }
            Op::SliceCols { start, len } => {
                let src = val(0);
                let cols = src.cols();
                let mut ga = vec![0.0; src.len()];
                for r in 0..src.rows() {
                    ga[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                vec![like(0, ga)]
            }
            Op::Tanh => elementwise(&|i, _| 1.0 - out[i] * out[i]),
            Op::Relu => elementwise(&|_, x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Sigmoid => elementwise(&|i, _| out[i] * (1.0 - out[i])),
            Op::Exp => elementwise(&|i, _| out[i]),
            Op::Log => elementwise(&|_, x| 1.0 / x),
            Op::Sin => elementwise(&|_, x| x.cos()),
            Op::Cos => elementwise(&|_, x| -x.sin()),
            Op::Sqrt => elementwise(&|i, _| 0.5 / out[i]),
            Op::Square => elementwise(&|_, x| 2.0 * x),
            Op::Clamp { lo, hi } => {
                elementwise(&|_, x| if x > *lo && x <= *hi { 1.0 } else { 0.0 })
            }
            Op::Huber { delta } => elementwise(&|_, x| {
                if x.abs() <= *delta {
                    x
                } else {
                    delta * x.signum()
                }
            }),
            Op::Softmax => {
                let cols = node.value.cols();
                let mut ga = vec![0.0; gd.len()];
                for r in 0..gd.len() / cols {
                    let s = &out[r * cols..(r + 1) * cols];
                    let gg = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = s.iter().zip(gg).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        ga[r * cols + c] = s[c] * (gg[c] - dot);
                    }
                }
                vec![like(0, ga)]
            }
            Op::LogSoftmax => {
                let cols = node.value.cols();
                let mut ga = vec![0.0; gd.len()];
                for r in 0..gd.len() / cols {
                    let gg = &gd[r * cols..(r + 1) * cols];
                    let total: f64 = gg.iter().sum();
                    for c in 0..cols {
                        ga[r * cols + c] = gg[c] - out[r * cols + c].exp() * total;
                    }
                }
                vec![like(0, ga)]
            }
            Op::Sum => vec![like(0, vec![gd[0]; val(0).len()])],
            Op::Mean => {
                let n = val(0).len();
                vec![like(0, vec![gd[0] / n as f64; n])]
            }
            Op::SumRows => {
                let src = val(0);
                let cols = src.cols();
                let ga = (0..src.len()).map(|i| gd[i % cols]).collect();
                vec![like(0, ga)]
            }
            Op::MaxRows { argmax } => {
                let src = val(0);
                let cols = src.cols();
                let mut ga = vec![0.0; src.len()];
                for (c, &r) in argmax.iter().enumerate() {
                    ga[r * cols + c] = gd[c];
                }
                vec![like(0, ga)]
            }
            Op::Min { arg } | Op::Max { arg } => {
                let mut ga = vec![0.0; val(0).len()];
                ga[*arg] = gd[0];
                vec![like(0, ga)]
            }
            Op::Norm2 => {
                let n = out[0];
                let x = val(0).data();
                let ga = if n > 0.0 {
                    x.iter().map(|xi| gd[0] * xi / n).collect()
                } else {
                    vec![0.0; x.len()]
                };
                vec![like(0, ga)]
            }
            Op::StraightThrough { soft } => {
                let dot: f64 = soft.iter().zip(gd).map(|(a, b)| a * b).sum();
                let ga = soft.iter().zip(gd).map(|(s, g)| s * (g - dot)).collect();
                vec![like(0, ga)]
            }
            Op::Jacobian { jac } => {
                let in_len: usize = (0..node.inputs.len()).map(|i| val(i).len()).sum();
                let mut flat = vec![0.0; in_len];
                for (o, &go) in gd.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    for (f, j) in flat.iter_mut().zip(&jac[o * in_len..(o + 1) * in_len]) {
                        *f += go * j;
                    }
                }
                let mut offset = 0;
                (0..node.inputs.len())
                    .map(|i| {
                        let len = val(i).len();
                        let part = flat[offset..offset + len].to_vec();
                        offset += len;
                        like(i, part)
                    })
                    .collect()
            }
        }
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn reduce_broadcast(g: &[f64], kind: Broadcast, len: usize, cols: usize) -> Vec<f64> {
    match kind {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().sum()],
        Broadcast::Row => {
            let mut out = vec![0.0; len];
            for (i, x) in g.iter().enumerate() {
                out[i % cols] += x;
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn add_elementwise() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i3 = t.constant(Tensor::eye(3));
        let data: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect();
        let a = t.constant(Tensor::matrix(3, 2, data.clone()).unwrap());
        let c = t.matmul(i3, a).unwrap();
        assert_eq!(t.value(c).data(), data.as_slice());
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0; 3]));
        let s = t.softmax(a);
        assert!(close(t.value(s).data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s = t.square(x);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn tanh_at_zero_passes_input() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let x = t.constant(Tensor::matrix(3, 1, vec![0.5, -1.5, 2.0]).unwrap());
        let wx = t.matmul(w, x).unwrap();
        let y = t.tanh(wx);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
        let m = t.constant(Tensor::zeros(&[2, 2]));
        assert!(t.matmul(m, b).unwrap_err().to_string().contains("matmul"));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_node_accumulates() {
        // y = x*x + x, consumed twice: dy/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let sq = t.mul(x, x).unwrap();
        let y = t.add(sq, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 7.0);
    }

    #[test]
    fn kinks_take_left_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 1.0, -1.0]));
        let r = t.relu(x);
        let c = t.clamp(x, -1.0, 1.0);
        let s = t.sum(r);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0]);
        let s2 = t.sum(c);
        let g2 = t.backward(s2).unwrap();
        // at the upper bound the left derivative is 1, at the lower bound 0
        assert_eq!(g2.wrt(x).data(), &[1.0, 1.0, 0.0]);
        let m = t.min(x);
        let g3 = t.backward(m).unwrap();
        assert_eq!(g3.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn straight_through_dominant_logit() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::vector(vec![10.0, 0.0, 0.0]));
        let h = t.straight_through_onehot(l, None).unwrap();
        assert_eq!(t.value(h).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_through_rejects_matrix() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::zeros(&[2, 3]));
        assert!(t.straight_through_onehot(l, None).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).item(), 2.0);
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }
}
