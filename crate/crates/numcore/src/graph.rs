//! Per-pass differentiation tape.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value and a description of how it was produced. [`Graph::backward`]
//! walks the nodes in reverse insertion order, which is a valid reverse
//! topological order because inputs are always inserted before their users.
//! Graphs are built fresh for every step and dropped afterwards.

use std::collections::HashMap;

use crate::error::{NumError, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{gemm, Precision, Tensor};

/// Probability floor used by [`Graph::cross_entropy`].
pub const CE_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SelectCols(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy(Var, usize),
    Norm(Box<NormCache>),
}

#[derive(Debug)]
struct NormCache {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Batch statistics were used, so the normalizer depends on `x`.
    batch: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-feature mean and (biased) variance of one batch-normalized input.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    precision: Precision,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            precision,
            ..Self::default()
        }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
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

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable input not backed by a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a stored parameter, once per graph.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `w * x + b` with `b` broadcast across the columns of `w * x`.
    pub fn linear(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let wx = self.matmul(w, x)?;
        match b {
            Some(b) => self.add_broadcast(wx, b),
            None => Ok(wx),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumError::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.rows(), ta.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.rows(), t.cols(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds `b` to every column (`b` is `m x 1`), every row (`1 x n`) or
    /// every element (`1 x 1`) of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let sb = self.shape(b);
        let ta = self.value(a);
        let tb = self.value(b);
        let mut out = ta.data().to_vec();
        match sb {
            s if s == (m, n) => {
                for (o, &y) in out.iter_mut().zip(tb.data()) {
                    *o += y;
                }
            }
            (r, 1) if r == m => {
                for i in 0..m {
                    let bi = tb.data()[i];
                    for o in &mut out[i * n..(i + 1) * n] {
                        *o += bi;
                    }
                }
            }
            (1, c) if c == n => {
                for i in 0..m {
                    for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                        *o += y;
                    }
                }
            }
            (1, 1) => {
                let y = tb.data()[0];
                for o in &mut out {
                    *o += y;
                }
            }
            _ => {
                return Err(NumError::Shape {
                    op: "add_broadcast",
                    left: (m, n),
                    right: sb,
                })
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::AddBroadcast(a, b), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Softmax along `axis`: 0 normalizes every column, 1 every row.
    /// Each slice is shifted by its maximum before exponentiation.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_tensor(self.value(a), axis)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Stacks inputs vertically; all must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumError::EmptyAxis)?;
        let cols = self.shape(first).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(NumError::Shape {
                    op: "concat_rows",
                    left: self.shape(first),
                    right: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Places inputs side by side; all must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumError::EmptyAxis)?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(NumError::Shape {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: s,
                });
            }
            cols += s.1;
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + c]
                    .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(rows, cols, data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if len == 0 || start + len > t.rows() {
            return Err(NumError::Index {
                op: "slice_rows",
                index: start + len,
                extent: t.rows(),
            });
        }
        let c = t.cols();
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(len, c, data), Op::SliceRows(a, start), rg))
    }

    /// Gathers columns by index; indices may repeat. Used for embedding lookup.
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.shape();
        if idx.is_empty() {
            return Err(NumError::EmptyAxis);
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumError::Index {
                op: "select_cols",
                index: bad,
                extent: n,
            });
        }
        let k = idx.len();
        let mut data = vec![0.0; m * k];
        for r in 0..m {
            let row = &t.data()[r * n..(r + 1) * n];
            for (j, &c) in idx.iter().enumerate() {
                data[r * k + j] = row[c];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(m, k, data),
            Op::SelectCols(a, idx.to_vec()),
            rg,
        ))
    }

    /// Repeats a column vector `n` times.
    pub fn repeat_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        if self.shape(a).1 != 1 {
            return Err(NumError::Shape {
                op: "repeat_cols",
                left: self.shape(a),
                right: (self.shape(a).0, 1),
            });
        }
        self.select_cols(a, &vec![0; n])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_of(&mut self, scalars: &[Var]) -> Result<Var> {
        let first = *scalars.first().ok_or(NumError::EmptyAxis)?;
        let mut acc = first;
        for &s in &scalars[1..] {
            acc = self.add(acc, s)?;
        }
        Ok(self.scale(acc, 1.0 / scalars.len() as f64))
    }

    /// `-ln(max(p[label], CE_FLOOR))` for a probability vector `p`.
    pub fn cross_entropy(&mut self, p: Var, label: usize) -> Result<Var> {
        let t = self.value(p);
        if label >= t.len() {
            return Err(NumError::LabelOutOfRange {
                label,
                classes: t.len(),
            });
        }
        let sum = t.sum();
        let tol = match self.precision {
            Precision::F64 => 1e-6,
            Precision::F32 => 1e-6_f64.max(t.len() as f64 * 1.2e-7),
        };
        if (sum - 1.0).abs() > tol || t.data().iter().any(|&x| x < 0.0) {
            return Err(NumError::NotADistribution { sum });
        }
        // the floor must not hide a NaN from divergence checks
        let loss = if t.data().iter().any(|x| x.is_nan()) {
            f64::NAN
        } else {
            -t.data()[label].max(CE_FLOOR).ln()
        };
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(p, label), rg))
    }

    /// Batch normalization over the columns of `x` (features are rows, samples
    /// are columns) using the batch's own statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let t = self.value(x);
        let (d, b) = t.shape();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..d {
            let row = &t.data()[i * b..(i + 1) * b];
            let mu = row.iter().sum::<f64>() / b as f64;
            mean[i] = mu;
            var[i] = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / b as f64;
        }
        let stats = BatchStats { mean, var };
        let out = self.norm_with(x, gamma, beta, &stats, eps, true)?;
        Ok((out, stats))
    }

    /// Normalization with fixed (running) statistics.
    pub fn fixed_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BatchStats,
        eps: f64,
    ) -> Result<Var> {
        self.norm_with(x, gamma, beta, stats, eps, false)
    }

    fn norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BatchStats,
        eps: f64,
        batch: bool,
    ) -> Result<Var> {
        let (d, b) = self.shape(x);
        for v in [gamma, beta] {
            if self.shape(v) != (d, 1) {
                return Err(NumError::Shape {
                    op: "batch_norm",
                    left: (d, b),
                    right: self.shape(v),
                });
            }
        }
        if stats.mean.len() != d || stats.var.len() != d {
            return Err(NumError::Shape {
                op: "batch_norm",
                left: (d, b),
                right: (stats.mean.len(), 1),
            });
        }
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let t = self.value(x);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; d * b];
        let mut out = vec![0.0; d * b];
        for i in 0..d {
            for j in 0..b {
                let k = i * b + j;
                xhat[k] = (t.data()[k] - stats.mean[i]) * inv_std[i];
                out[k] = g[i] * xhat[k] + bt[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(d, b, out),
            Op::Norm(Box::new(NormCache {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            })),
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(NumError::NotScalar { shape });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds the gradient of every parameter in
    /// this graph into the store. Parameters the loss does not depend on get
    /// an explicit zero gradient.
    pub fn backward_into(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.backward(loss)?;
        let mut params: Vec<_> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        for (id, v) in params {
            if !store.get(id).trainable {
                continue;
            }
            let g = grads
                .wrt(self, v)
                .unwrap_or_else(|| {
                    let (r, c) = self.shape(v);
                    Tensor::zeros(r, c)
                });
            store.accumulate_grad(id, &g)?;
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = ta.shape();
                let n = tb.cols();
                if self.rg(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(gy, m, n, false, tb.data(), n, true, ga);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(ta.data(), m, k, true, gy, n, false, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(slot(grads, v, gy.len()), gy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(slot(grads, *a, gy.len()), gy);
                }
                if self.rg(*b) {
                    for (g, d) in slot(grads, *b, gy.len()).iter_mut().zip(gy) {
                        *g -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = slot(grads, *a, gy.len());
                    for ((g, d), o) in ga.iter_mut().zip(gy).zip(tb.data()) {
                        *g += d * o;
                    }
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, gy.len());
                    for ((g, d), o) in gb.iter_mut().zip(gy).zip(ta.data()) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (g, d) in slot(grads, *a, gy.len()).iter_mut().zip(gy) {
                    *g += d * c;
                }
            }
            Op::AddBroadcast(a, b) => {
                let (m, n) = y.shape();
                if self.rg(*a) {
                    add_into(slot(grads, *a, gy.len()), gy);
                }
                if self.rg(*b) {
                    let sb = self.shape(*b);
                    let gb = slot(grads, *b, sb.0 * sb.1);
                    if sb == (m, n) {
                        add_into(gb, gy);
                    } else if sb == (m, 1) {
                        for i in 0..m {
                            gb[i] += gy[i * n..(i + 1) * n].iter().sum::<f64>();
                        }
                    } else if sb == (1, n) {
                        for i in 0..m {
                            add_into(gb, &gy[i * n..(i + 1) * n]);
                        }
                    } else {
                        gb[0] += gy.iter().sum::<f64>();
                    }
                }
            }
            Op::Tanh(a) => {
                for ((g, d), t) in slot(grads, *a, gy.len()).iter_mut().zip(gy).zip(y.data()) {
                    *g += d * (1.0 - t * t);
                }
            }
            Op::Sigmoid(a) => {
                for ((g, d), s) in slot(grads, *a, gy.len()).iter_mut().zip(gy).zip(y.data()) {
                    *g += d * s * (1.0 - s);
                }
            }
            Op::Softmax(a, axis) => {
                let (m, n) = y.shape();
                let ga = slot(grads, *a, m * n);
                let yd = y.data();
                if *axis == 0 {
                    for j in 0..n {
                        let dot: f64 = (0..m).map(|i| gy[i * n + j] * yd[i * n + j]).sum();
                        for i in 0..m {
                            let k = i * n + j;
                            ga[k] += yd[k] * (gy[k] - dot);
                        }
                    }
                } else {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = gy[r.clone()].iter().zip(&yd[r.clone()]).map(|(a, b)| a * b).sum();
                        for k in r {
                            ga[k] += yd[k] * (gy[k] - dot);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = y.shape();
                let ga = slot(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[j * m + i] += gy[i * n + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        add_into(slot(grads, p, len), &gy[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = y.shape();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    if self.rg(p) {
                        let gp = slot(grads, p, rows * c);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &gy[r * cols + offset..r * cols + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let len = self.value(*a).len();
                let c = y.cols();
                let ga = slot(grads, *a, len);
                add_into(&mut ga[start * c..start * c + gy.len()], gy);
            }
            Op::SelectCols(a, idx) => {
                let (m, n) = self.shape(*a);
                let k = idx.len();
                let ga = slot(grads, *a, m * n);
                for r in 0..m {
                    for (j, &c) in idx.iter().enumerate() {
                        ga[r * n + c] += gy[r * k + j];
                    }
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                for g in slot(grads, *a, len).iter_mut() {
                    *g += gy[0];
                }
            }
            Op::CrossEntropy(p, label) => {
                let t = self.value(*p);
                let pl = t.data()[*label];
                let gp = slot(grads, *p, t.len());
                if pl > CE_FLOOR {
                    gp[*label] -= gy[0] / pl;
                }
            }
            Op::Norm(cache) => {
                let (d, b) = y.shape();
                let gamma = self.value(cache.gamma).data();
                if self.rg(cache.gamma) {
                    let gg = slot(grads, cache.gamma, d);
                    for i in 0..d {
                        gg[i] += (0..b).map(|j| gy[i * b + j] * cache.xhat[i * b + j]).sum::<f64>();
                    }
                }
                if self.rg(cache.beta) {
                    let gb = slot(grads, cache.beta, d);
                    for (i, g) in gb.iter_mut().enumerate().take(d) {
                        *g += gy[i * b..(i + 1) * b].iter().sum::<f64>();
                    }
                }
                if self.rg(cache.x) {
                    let gx = slot(grads, cache.x, d * b);
                    #[allow(clippy::needless_range_loop)]
                    for i in 0..d {
                        let r = i * b..(i + 1) * b;
                        let scale = gamma[i] * cache.inv_std[i];
                        if cache.batch {
                            let bn = b as f64;
                            let sum_dy: f64 = gy[r.clone()].iter().sum();
                            let sum_dy_xhat: f64 = gy[r.clone()]
                                .iter()
                                .zip(&cache.xhat[r.clone()])
                                .map(|(a, b)| a * b)
                                .sum();
                            for k in r {
                                gx[k] += scale
                                    * (gy[k] - sum_dy / bn - cache.xhat[k] * sum_dy_xhat / bn);
                            }
                        } else {
                            for k in r {
                                gx[k] += scale * gy[k];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if the loss does not reach it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        let (r, c) = graph.shape(v);
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(r, c, g.clone()))
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softmax of a plain tensor along `axis` (see [`Graph::softmax`]).
pub fn softmax_tensor(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (m, n) = t.shape();
    if m == 0 || n == 0 {
        return Err(NumError::EmptyAxis);
    }
    let d = t.data();
    let mut out = vec![0.0; m * n];
    match axis {
        0 => {
            for j in 0..n {
                let max = (0..m).map(|i| d[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in 0..m {
                    let e = (d[i * n + j] - max).exp();
                    out[i * n + j] = e;
                    z += e;
                }
                for i in 0..m {
                    out[i * n + j] /= z;
                }
            }
        }
        1 => {
            for i in 0..m {
                let row = &d[i * n..(i + 1) * n];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let o = &mut out[i * n..(i + 1) * n];
                let mut z = 0.0;
                for (oj, &x) in o.iter_mut().zip(row) {
                    *oj = (x - max).exp();
                    z += *oj;
                }
                for oj in o.iter_mut() {
                    *oj /= z;
                }
            }
        }
        other => return Err(NumError::Axis(other)),
    }
    Ok(Tensor::from_parts(m, n, out))
}
