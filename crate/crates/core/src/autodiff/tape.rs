use std::cell::RefCell;

use super::tensor::{gemm, Tensor};
use super::AutodiffError;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { src: usize, start: usize },
    Sigmoid(usize),
    Tanh(usize),
    Elu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    MaskedSum(usize, Tensor),
    Reverse(usize, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Record of the primitive operations of one forward pass.
///
/// Nodes are appended in execution order, so every node's parents precede
/// it and the reverse sweep in [`Tape::backward`] is a valid topological
/// order. A tape is meant to be rebuilt for every minibatch.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not require gradients or the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros of the right shape when
    /// the loss does not depend on `var`.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.tape.shape_of(var.index).as_slice()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf that receives a gradient in [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    fn shape_of(&self, index: usize) -> Vec<usize> {
        self.nodes.borrow()[index].value.shape().to_vec()
    }

    fn requires(&self, index: usize) -> bool {
        self.nodes.borrow()[index].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutodiffError> {
        assert!(std::ptr::eq(self, loss.tape), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.index];
        if root.value.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(root.value.shape(), 1.0));

        for idx in (0..=loss.index).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            propagate(&nodes, idx, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], index: usize, delta: Tensor) {
    if !nodes[index].requires_grad {
        return;
    }
    match &mut grads[index] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[idx];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[*a].requires_grad {
                let mut da = vec![0.0; m * k];
                gemm(g.data(), false, bv.data(), true, &mut da, m, n, k, false);
                accumulate(grads, nodes, *a, Tensor::matrix(m, k, da));
            }
            if nodes[*b].requires_grad {
                let mut db = vec![0.0; k * n];
                gemm(av.data(), true, g.data(), false, &mut db, k, m, n, false);
                accumulate(grads, nodes, *b, Tensor::matrix(k, n, db));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|v| -v));
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if nodes[*b].requires_grad {
                let cols = g.cols();
                let mut db = vec![0.0; cols];
                for r in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                let shape = nodes[*b].value.shape().to_vec();
                accumulate(grads, nodes, *b, Tensor::new(shape, db).expect("bias shape"));
            }
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, zip_with(g, bv, |x, y| x * y));
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, zip_with(g, av, |x, y| x * y));
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.map(|v| v * c)),
        Op::Concat(parts) => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                if nodes[p].requires_grad {
                    let mut d = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + pc]);
                    }
                    let shape = nodes[p].value.shape().to_vec();
                    accumulate(grads, nodes, p, Tensor::new(shape, d).expect("concat part"));
                }
                offset += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                if nodes[p].requires_grad {
                    let shape = nodes[p].value.shape().to_vec();
                    let d = g.data()[offset..offset + n].to_vec();
                    accumulate(grads, nodes, p, Tensor::new(shape, d).expect("concat_rows part"));
                }
                offset += n;
            }
        }
        Op::SliceCols { src, start } => {
            if nodes[*src].requires_grad {
                let sv = &nodes[*src].value;
                let (rows, cols, width) = (sv.rows(), sv.cols(), g.cols());
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(g.row(r));
                }
                accumulate(grads, nodes, *src, Tensor::new(sv.shape().to_vec(), d).expect("slice"));
            }
        }
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, zip_with(g, out, |gv, y| gv * y * (1.0 - y))),
        Op::Tanh(a) => accumulate(grads, nodes, *a, zip_with(g, out, |gv, y| gv * (1.0 - y * y))),
        Op::Elu(a) => {
            let xv = &nodes[*a].value;
            let d = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(out.data())
                .map(|((gv, x), y)| if *x > 0.0 { *gv } else { gv * (y + 1.0) })
                .collect();
            accumulate(grads, nodes, *a, Tensor::new(g.shape().to_vec(), d).expect("elu"));
        }
        Op::Softmax(a) => {
            let cols = out.cols();
            let mut d = vec![0.0; out.len()];
            for r in 0..out.rows() {
                let y = out.row(r);
                let gr = g.row(r);
                let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                for c in 0..cols {
                    d[r * cols + c] = y[c] * (gr[c] - dot);
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(out.shape().to_vec(), d).expect("softmax"));
        }
        Op::LogSoftmax(a) => {
            let cols = out.cols();
            let mut d = vec![0.0; out.len()];
            for r in 0..out.rows() {
                let y = out.row(r);
                let gr = g.row(r);
                let total: f64 = gr.iter().sum();
                for c in 0..cols {
                    d[r * cols + c] = gr[c] - y[c].exp() * total;
                }
            }
            accumulate(grads, nodes, *a, Tensor::new(out.shape().to_vec(), d).expect("log_softmax"));
        }
        Op::Log(a) => {
            let xv = &nodes[*a].value;
            accumulate(grads, nodes, *a, zip_with(g, xv, |gv, x| gv / x));
        }
        Op::Square(a) => {
            let xv = &nodes[*a].value;
            accumulate(grads, nodes, *a, zip_with(g, xv, |gv, x| 2.0 * gv * x));
        }
        Op::Sum(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            accumulate(grads, nodes, *a, Tensor::full(&shape, g.item()));
        }
        Op::Mean(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            let n = nodes[*a].value.len().max(1) as f64;
            accumulate(grads, nodes, *a, Tensor::full(&shape, g.item() / n));
        }
        Op::MaskedSum(a, mask) => {
            let gv = g.item();
            accumulate(grads, nodes, *a, mask.map(|m| m * gv));
        }
        Op::Reverse(a, lambda) => accumulate(grads, nodes, *a, g.map(|v| -lambda * v)),
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_with shapes")
}

fn mismatch(op: &'static str, left: &Tensor, right: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.index].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.index].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.index)
    }

    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.index)
    }

    fn same_tape(&self, other: Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = self.with_value(f);
        let rg = self.requires_grad();
        self.tape.push(op, value, rg)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        check: impl FnOnce(&Tensor, &Tensor) -> bool,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Tensor,
    ) -> Result<Var<'t>, AutodiffError> {
        self.same_tape(other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.index].value, &nodes[other.index].value);
            if !check(a, b) {
                return Err(mismatch(name, a, b));
            }
            f(a, b)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(op, value, rg))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(
            other,
            "matmul",
            |a, b| a.shape().len() == 2 && b.shape().len() == 2 && a.cols() == b.rows(),
            Op::MatMul(self.index, other.index),
            |a, b| {
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut c = vec![0.0; m * n];
                gemm(a.data(), false, b.data(), false, &mut c, m, k, n, false);
                Tensor::matrix(m, n, c)
            },
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(
            other,
            "add",
            |a, b| a.shape() == b.shape(),
            Op::Add(self.index, other.index),
            |a, b| zip_with(a, b, |x, y| x + y),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(
            other,
            "sub",
            |a, b| a.shape() == b.shape(),
            Op::Sub(self.index, other.index),
            |a, b| zip_with(a, b, |x, y| x - y),
        )
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(
            other,
            "mul",
            |a, b| a.shape() == b.shape(),
            Op::Mul(self.index, other.index),
            |a, b| zip_with(a, b, |x, y| x * y),
        )
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of a `[m, n]` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(
            row,
            "add_row",
            |a, b| a.shape().len() == 2 && b.len() == a.cols() && b.rows() == 1,
            Op::AddRow(self.index, row.index),
            |a, b| {
                let cols = a.cols();
                let mut data = a.data().to_vec();
                for chunk in data.chunks_mut(cols) {
                    for (x, y) in chunk.iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                Tensor::new(a.shape().to_vec(), data).expect("add_row")
            },
        )
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(Op::Scale(self.index, factor), |a| a.map(|v| v * factor))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
        let first = *parts.first().expect("concat of zero tensors");
        let value = {
            let nodes = first.tape.nodes.borrow();
            let rows = nodes[first.index].value.rows();
            for p in parts {
                first.same_tape(*p);
                let v = &nodes[p.index].value;
                if v.shape().len() != 2 || v.rows() != rows {
                    return Err(mismatch("concat", &nodes[first.index].value, v));
                }
            }
            let total: usize = parts.iter().map(|p| nodes[p.index].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.index].value.row(r));
                }
            }
            Tensor::matrix(rows, total, data)
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first
            .tape
            .push(Op::Concat(parts.iter().map(|p| p.index).collect()), value, rg))
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
        let first = *parts.first().expect("concat_rows of zero tensors");
        let value = {
            let nodes = first.tape.nodes.borrow();
            let cols = nodes[first.index].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                first.same_tape(*p);
                let v = &nodes[p.index].value;
                if v.shape().len() != 2 || v.cols() != cols {
                    return Err(mismatch("concat_rows", &nodes[first.index].value, v));
                }
                data.extend_from_slice(v.data());
                rows += v.rows();
            }
            Tensor::matrix(rows, cols, data)
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first
            .tape
            .push(Op::ConcatRows(parts.iter().map(|p| p.index).collect()), value, rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>, AutodiffError> {
        let value = self.with_value(|a| {
            if a.shape().len() != 2 || start > end || end > a.cols() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "slice_cols",
                    left: a.shape().to_vec(),
                    right: vec![start, end],
                });
            }
            let mut data = Vec::with_capacity(a.rows() * (end - start));
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row(r)[start..end]);
            }
            Ok(Tensor::matrix(a.rows(), end - start, data))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(Op::SliceCols { src: self.index, start }, value, rg))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.index), |a| a.map(sigmoid))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.index), |a| a.map(f64::tanh))
    }

    /// Exponential linear unit with `alpha = 1`.
    pub fn elu(self) -> Var<'t> {
        self.unary(Op::Elu(self.index), |a| a.map(elu))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        self.unary(Op::Softmax(self.index), |a| {
            let mut out = a.clone();
            let cols = a.cols();
            for row in out.data_mut().chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            out
        })
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        self.unary(Op::LogSoftmax(self.index), |a| {
            let mut out = a.clone();
            let cols = a.cols();
            for row in out.data_mut().chunks_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        })
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.index), |a| a.map(f64::ln))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.index), |a| a.map(|v| v * v))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.index), |a| Tensor::scalar(a.data().iter().sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.index), |a| {
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len().max(1) as f64)
        })
    }

    /// `sum(self * mask)` with a constant mask (or weight) tensor.
    pub fn masked_sum(self, mask: &Tensor) -> Result<Var<'t>, AutodiffError> {
        let value = self.with_value(|a| {
            if a.shape() != mask.shape() {
                return Err(mismatch("masked_sum", a, mask));
            }
            Ok(Tensor::scalar(
                a.data().iter().zip(mask.data()).map(|(x, m)| x * m).sum(),
            ))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(Op::MaskedSum(self.index, mask.clone()), value, rg))
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda` backward.
    pub fn reverse_grad(self, lambda: f64) -> Var<'t> {
        self.unary(Op::Reverse(self.index, lambda), Tensor::clone)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec())
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let tape = Tape::new();
        let p = tape.constant(row(&[0.0; 4])).softmax().value();
        assert_eq!(p.data(), &[0.25; 4]);
    }

    #[test]
    fn elu_of_minus_one() {
        let tape = Tape::new();
        let y = tape.constant(row(&[-1.0, 2.0])).elu().value();
        assert!((y.data()[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((y.data()[0] + 0.6321).abs() < 1e-4);
        assert_eq!(y.data()[1], 2.0);
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let eye = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let a = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]);
        let out = tape.constant(eye).matmul(tape.constant(a.clone())).unwrap();
        assert_eq!(out.value(), a);
    }

    #[test]
    fn shape_errors_name_primitive_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(a.add(c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, 2.0]));
        let loss = x.square().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, 2.0]));
        let c = tape.constant(row(&[3.0, 4.0]));
        let _unused = x.scale(2.0);
        let loss = c.square().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get_or_zeros(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x.square()),
            Err(AutodiffError::NotScalar { .. })
        ));
    }

    #[test]
    fn gradient_reversal_examples() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.5, -2.0]));
        let y = x.reverse_grad(1.0);
        assert_eq!(y.value().data(), &[1.5, -2.0]);
        // upstream gradient g = [3, -1]
        let loss = y.masked_sum(&row(&[3.0, -1.0])).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-3.0, 1.0]);

        let tape = Tape::new();
        let x = tape.param(row(&[1.5, -2.0]));
        let loss = x.reverse_grad(0.0).masked_sum(&row(&[3.0, -1.0])).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softmax_cross_entropy_matches_log_probability() {
        let tape = Tape::new();
        let logits = tape.constant(row(&[0.3, -1.2, 2.0, 0.1]));
        let p = logits.softmax().value();
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ce = logits
            .log_softmax()
            .masked_sum(&row(&[0.0, 0.0, 1.0, 0.0]))
            .unwrap()
            .scale(-1.0)
            .item();
        assert!((ce + p.data()[2].ln()).abs() < 1e-12);
    }

    #[test]
    fn concat_rows_routes_gradients() {
        let tape = Tape::new();
        let a = tape.param(row(&[1.0, 2.0]));
        let b = tape.param(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let s = Var::concat_rows(&[a, b]).unwrap();
        assert_eq!(s.shape(), vec![3, 2]);
        let loss = s.masked_sum(&Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.])).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.param(row(&[3.0]));
        let y = x.mul(x).unwrap().add(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }
}
