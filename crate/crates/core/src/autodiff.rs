//! Reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Tape`] is an arena of nodes in creation order. Every operation appends
//! its output after its inputs, so the arena order is a topological order and
//! the backward pass is a single reverse sweep. Vectors are `1×n` matrices.
//!
//! The only broadcast is [`Tape::add_row`], which adds a `1×n` bias row to every
//! row of an `m×n` matrix.

use crate::error::{Error, Result};
use crate::tensor::{real, Matrix, Real};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Relu,
    SoftmaxRows,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix<T>,
    },
    Sum(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Transpose(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ShiftRows(Var, usize),
    Standardize { x: Var, inv_std: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    grad: Option<Matrix<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording arena for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err<T: Real>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> Error {
    Error::Dimension {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, delta: Matrix<T>) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (parameters, or inputs under a gradient check).
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient; all zeros when nothing has flowed into `v`.
    pub fn grad(&self, v: Var) -> Matrix<T> {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(dim_err("matmul", av, bv));
        }
        let out = av.matmul(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            let name = match kind {
                ElementwiseKind::Add => "add",
                ElementwiseKind::Sub => "sub",
                ElementwiseKind::Mul => "mul",
            };
            return Err(dim_err(name, av, bv));
        }
        let (out, op) = match kind {
            ElementwiseKind::Add => (av.zip_map(bv, |x, y| x + y), Op::Add(a, b)),
            ElementwiseKind::Sub => (av.zip_map(bv, |x, y| x - y), Op::Sub(a, b)),
            ElementwiseKind::Mul => (av.zip_map(bv, |x, y| x * y), Op::Mul(a, b)),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, a, b)
    }

    /// `a + 1ᵀ·bias`: adds the `1×n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(dim_err("add_row", av, bv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *o = *o + b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    /// `scale·a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let out = self.value(a).map(|x| x * scale + shift);
        let rg = self.rg(a);
        self.push(out, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Var {
        self.affine(a, scale, T::zero())
    }

    pub fn activation(&mut self, kind: ActivationKind, x: Var) -> Result<Var> {
        Ok(match kind {
            ActivationKind::Sigmoid => self.sigmoid(x),
            ActivationKind::Tanh => self.tanh(x),
            ActivationKind::Relu => self.relu(x),
            ActivationKind::SoftmaxRows => self.softmax_rows(x),
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if labels.is_empty() || labels.len() != lv.rows() {
            return Err(Error::Validation(format!(
                "cross entropy needs one label per logit row ({} labels, {} rows)",
                labels.len(),
                lv.rows()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= lv.cols()) {
            return Err(Error::Validation(format!(
                "label {l} at row {i} outside [0, {}]",
                lv.cols() - 1
            )));
        }
        let probs = softmax_rows(lv);
        let mut total = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            // (max - z_l) + ln(1 + Σ_{j≠argmax} e^{z_j - max}) stays accurate when saturated
            let row = lv.row(r);
            let mut arg = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = j;
                }
            }
            let m = row[arg];
            let rest = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .fold(T::zero(), |a, (_, &b)| a + (b - m).exp());
            total = total + ((m - row[l]) + rest.ln_1p());
        }
        let loss = total / real::<T>(labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(x), rg)
    }

    /// Column means, `m×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::Contract("mean over an empty window".into()));
        }
        let n: T = real(xv.rows() as f64);
        let mut out = Matrix::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, &v) in out.as_mut_slice().iter_mut().zip(xv.row(r)) {
                *o = *o + v;
            }
        }
        out.as_mut_slice().iter_mut().for_each(|o| *o = *o / n);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    /// Column maxima, `m×n → 1×n`; ties resolve to the lowest row index.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::Contract("max over an empty window".into()));
        }
        let mut out = Matrix::zeros(1, xv.cols());
        let mut arg = vec![0usize; xv.cols()];
        for c in 0..xv.cols() {
            let mut best = xv.get(0, c);
            for r in 1..xv.rows() {
                let v = xv.get(r, c);
                if v > best {
                    best = v;
                    arg[c] = r;
                }
            }
            out.set(0, c, best);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxRows(x, arg), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() || len == 0 {
            return Err(Error::Contract(format!(
                "row slice {start}..{} of a {}-row tensor",
                start + len,
                xv.rows()
            )));
        }
        let out = xv.slice_rows(start, len);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.slice_rows(x, r, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(dim_err("concat_rows", self.value(first), pv));
            }
            data.extend_from_slice(pv.as_slice());
            rows += pv.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(dim_err("concat_cols", self.value(first), pv));
            }
            cols += pv.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Delays the sequence by `k` rows: `out[t] = x[t-k]`, zero for `t < k`.
    pub fn shift_rows(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for t in k..xv.rows() {
            out.row_mut(t).copy_from_slice(xv.row(t - k));
        }
        let rg = self.rg(x);
        self.push(out, Op::ShiftRows(x, k), rg)
    }

    /// Per-column standardization over rows: `(x - mean) / sqrt(var + eps)`.
    pub fn standardize_cols(&mut self, x: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::Contract("standardize over an empty window".into()));
        }
        let n: T = real(xv.rows() as f64);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.cols());
        for c in 0..xv.cols() {
            let mean = (0..xv.rows()).fold(T::zero(), |a, r| a + xv.get(r, c)) / n;
            let var = (0..xv.rows()).fold(T::zero(), |a, r| {
                let d = xv.get(r, c) - mean;
                a + d * d
            }) / n;
            let inv = T::one() / (var + eps).sqrt();
            for r in 0..xv.rows() {
                out.set(r, c, (xv.get(r, c) - mean) * inv);
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Standardize { x, inv_std }, rg))
    }

    /// Fills `grad` on every node reachable from the scalar `loss`, then frees the tape.
    ///
    /// Gradients add onto whatever is already stored; call [`Tape::zero_grad`]
    /// to reset them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "tape already consumed by a previous backward pass".into(),
            ));
        }
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = self.nodes.iter_mut().map(|n| n.grad.take()).collect();
        // seed contribution is added on top of any previous gradient
        let mut pending: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, _) = pending.split_at_mut(i);
            self.propagate(i, &g, lo);
            accumulate(&mut grads[i], g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = g;
            node.op = Op::Leaf;
        }
        self.consumed = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix<T>, acc: &mut [Option<Matrix<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[i].value;
        let mut send = |v: Var, delta: Matrix<T>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut acc[v.0], delta);
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                send(*a, g.matmul_t(val(*b)));
                send(*b, val(*a).t_matmul(g));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |x, y| x * y));
                send(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone());
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                send(*bias, gb);
            }
            Op::Affine(a, s) => send(*a, g.map(|x| x * *s)),
            Op::Sigmoid(a) => send(*a, g.zip_map(out, |x, y| x * y * (T::one() - y))),
            Op::Tanh(a) => send(*a, g.zip_map(out, |x, y| x * (T::one() - y * y))),
            Op::Relu(a) => send(
                *a,
                g.zip_map(out, |x, y| if y > T::zero() { x } else { T::zero() }),
            ),
            Op::SoftmaxRows(a) => {
                let mut dx = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), out.row(r));
                    let dot = gr.iter().zip(yr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for (d, (&gv, &yv)) in dx.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *d = yv * (gv - dot);
                    }
                }
                send(*a, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g.get(0, 0) / real::<T>(labels.len() as f64);
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    let v = d.get(r, l);
                    d.set(r, l, v - T::one());
                }
                send(*logits, d.map(|x| x * scale));
            }
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                send(*a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::MeanRows(a) => {
                let [r, c] = val(*a).shape();
                let n: T = real(r as f64);
                let mut d = Matrix::zeros(r, c);
                for t in 0..r {
                    for (o, &v) in d.row_mut(t).iter_mut().zip(g.row(0)) {
                        *o = v / n;
                    }
                }
                send(*a, d);
            }
            Op::MaxRows(a, arg) => {
                let [r, c] = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for (col, &row) in arg.iter().enumerate() {
                    d.set(row, col, g.get(0, col));
                }
                send(*a, d);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::SliceRows(a, start) => {
                let [r, c] = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for t in 0..g.rows() {
                    d.row_mut(start + t).copy_from_slice(g.row(t));
                }
                send(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    send(p, g.slice_rows(start, rows));
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let [rows, cols] = val(p).shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    send(p, d);
                    offset += cols;
                }
            }
            Op::ShiftRows(a, k) => {
                let [r, c] = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for t in 0..r.saturating_sub(*k) {
                    d.row_mut(t).copy_from_slice(g.row(t + k));
                }
                send(*a, d);
            }
            Op::Standardize { x, inv_std } => {
                let [r, c] = val(*x).shape();
                let n: T = real(r as f64);
                let mut d = Matrix::zeros(r, c);
                for col in 0..c {
                    let sum_g = (0..r).fold(T::zero(), |a, t| a + g.get(t, col));
                    let sum_gy = (0..r).fold(T::zero(), |a, t| a + g.get(t, col) * out.get(t, col));
                    for t in 0..r {
                        let v = inv_std[col] / n
                            * (n * g.get(t, col) - sum_g - out.get(t, col) * sum_gy);
                        d.set(t, col, v);
                    }
                }
                send(*x, d);
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_f64(rows, cols, v)
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(m(2, 2, &[1., 0., 0., 1.]));
        let b = t.leaf(m(2, 1, &[3., 4.]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).as_slice(), &[3., 4.]);

        let a = t.leaf(m(1, 2, &[1., 2.]));
        let b = t.leaf(m(2, 1, &[3., 4.]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).as_slice(), &[11.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Matrix::zeros(2, 3));
        let b = t.leaf(Matrix::zeros(2, 3));
        match t.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, [2, 3]);
                assert_eq!(right, [2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(m(1, 2, &[1., 2.]));
        let b = t.leaf(m(1, 2, &[3., 4.]));
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).as_slice(), &[4., 6.]);
        let z = t.constant(m(1, 2, &[0., 0.]));
        let p = t.mul(a, z).unwrap();
        assert_eq!(t.value(p).as_slice(), &[0., 0.]);
        let bad = t.leaf(Matrix::zeros(2, 1));
        assert!(matches!(t.sub(a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mul_backward_is_opposite_operand() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(m(1, 3, &[1., -2., 3.]));
        let b = t.leaf(m(1, 3, &[0.5, 4., -1.]));
        let p = t.mul(a, b).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).as_slice(), t.value(b).as_slice());
        assert_eq!(t.grad(b).as_slice(), t.value(a).as_slice());
    }

    #[test]
    fn activation_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(1, 1, &[0.]));
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).get(0, 0), 0.5);
        let y = t.leaf(m(1, 3, &[0., 0., 0.]));
        let sm = t.softmax_rows(y);
        for &v in t.value(sm).as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let th = t.tanh(x);
        t.backward(th).unwrap();
        assert_eq!(t.grad(x).get(0, 0), 1.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::<f64>::new();
        let z = t.leaf(m(1, 2, &[0., 0.]));
        let l = t.cross_entropy(z, &[0]).unwrap();
        assert!((t.value(l).get(0, 0) - std::f64::consts::LN_2).abs() < 1e-15);

        let z = t.leaf(m(1, 2, &[10., -10.]));
        let l = t.cross_entropy(z, &[0]).unwrap();
        // -ln σ(20) = ln(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        assert!((t.value(l).get(0, 0) - expected).abs() < 1e-12 * expected);
        assert!((expected - 2.06e-9).abs() < 1e-11);

        assert!(matches!(t.cross_entropy(z, &[2]), Err(Error::Validation(_))));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert!(t.grad(x).as_slice().iter().all(|&g| g == 1.0));

        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(1, 2, &[1., 2.]));
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).as_slice(), &[2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(1, 2, &[1., 2.]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
        let l = t.sum(x);
        t.backward(l).unwrap();
        assert!(t.is_consumed());
        assert!(matches!(t.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_starts_zero_and_resets() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(1, 2, &[1., 2.]));
        assert!(t.grad(x).as_slice().iter().all(|&g| g == 0.0));
        let l = t.sum(x);
        t.backward(l).unwrap();
        t.zero_grad();
        assert!(t.grad(x).as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn max_rows_routes_to_lowest_index() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(3, 2, &[1., 5., 3., 5., 3., 2.]));
        let mx = t.max_rows(x).unwrap();
        assert_eq!(t.value(mx).as_slice(), &[3., 5.]);
        let l = t.sum(mx);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).as_slice(), &[0., 1., 1., 0., 0., 0.]);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(2, 3, &[1e4, -1e4, 0., 9999., 1e4, -1e4]));
        let s = t.softmax_rows(x);
        for r in 0..2 {
            let total: f64 = t.value(s).row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shift_rows_delays_sequence() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(3, 1, &[1., 2., 3.]));
        let s = t.shift_rows(x, 2);
        assert_eq!(t.value(s).as_slice(), &[0., 0., 1.]);
    }
}
