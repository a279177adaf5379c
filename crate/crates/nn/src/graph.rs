//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly (values are computed on
//! construction) and [`Graph::backward`] replays the tape in reverse. Nodes
//! created from constants never receive gradients, and no gradient is
//! propagated into a subgraph that does not depend on a trainable leaf.

use std::rc::Rc;

use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys each query position may attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    /// Standard causal mask: position `i` sees positions `0..=i`.
    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            for j in 0..=i {
                allowed[i * len + j] = true;
            }
        }
        Self { len, allowed }
    }

    /// A shared causal prefix of `prefix` positions followed by `branches`
    /// sibling positions. Each sibling attends to the whole prefix and to
    /// itself only, so one pass evaluates `branches` alternative
    /// continuations of the same prefix.
    pub fn prefix_branches(prefix: usize, branches: usize) -> Self {
        let len = prefix + branches;
        let mut allowed = vec![false; len * len];
        for i in 0..prefix {
            for j in 0..=i {
                allowed[i * len + j] = true;
            }
        }
        for b in 0..branches {
            let i = prefix + b;
            for j in 0..prefix {
                allowed[i * len + j] = true;
            }
            allowed[i * len + i] = true;
        }
        Self { len, allowed }
    }

    /// Arbitrary visibility pattern. Every row must at least see itself.
    pub fn from_fn(len: usize, visible: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            for j in 0..len {
                allowed[i * len + j] = visible(i, j);
            }
            assert!(allowed[i * len + i], "row {i} cannot see itself");
        }
        Self { len, allowed }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len + key]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Rc<AttnMask>,
        probs: Vec<Tensor>,
    },
    Gather {
        table: Var,
        indices: Rc<Vec<usize>>,
    },
    PickPerRow {
        x: Var,
        indices: Rc<Vec<usize>>,
    },
    RowSlice {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    LogMeanExp(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// Adds a `[1, n]` row to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(bv.cols(), xv.cols(), "bias width differs from input");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddBias(x, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes differ");
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_and_grad(x).0);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with learned gain and bias (`[1, n]` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let gv = self.value(gain);
        let bv = self.value(bias);
        assert_eq!(gv.cols(), cols, "layer norm gain width");
        assert_eq!(bv.cols(), cols, "layer norm bias width");
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let n = cols as f64;
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries, keys and values (`[T, d]` each, `d` divisible by `heads`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Rc<AttnMask>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = qv.shape();
        assert_eq!(kv.shape(), (t, d), "key shape");
        assert_eq!(vv.shape(), (t, d), "value shape");
        assert_eq!(mask.len(), t, "mask length");
        assert!(heads > 0 && d % heads == 0, "heads must divide model width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(t, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Tensor::zeros(t, t);
            for i in 0..t {
                let qi = &qv.row(i)[off..off + dh];
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..t {
                    if mask.allows(i, j) {
                        let s = dot(qi, &kv.row(j)[off..off + dh]) * scale;
                        p.set(i, j, s);
                        maxv = maxv.max(s);
                    }
                }
                let mut z = 0.0;
                for j in 0..t {
                    if mask.allows(i, j) {
                        let e = (p.get(i, j) - maxv).exp();
                        p.set(i, j, e);
                        z += e;
                    } else {
                        p.set(i, j, 0.0);
                    }
                }
                for j in 0..t {
                    let pij = p.get(i, j) / z;
                    p.set(i, j, pij);
                    if pij != 0.0 {
                        let vj = &vv.row(j)[off..off + dh];
                        let orow = &mut out.row_mut(i)[off..off + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
            }
            probs.push(p);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            ng,
        )
    }

    /// Row lookup: output row `r` is `table[indices[r]]`.
    pub fn gather(&mut self, table: Var, indices: Rc<Vec<usize>>) -> Var {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut out = Tensor::zeros(indices.len(), cols);
        for (r, &idx) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(idx));
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather { table, indices }, ng)
    }

    /// Column `indices[r]` of each row `r`, as an `[m, 1]` column.
    pub fn pick_per_row(&mut self, x: Var, indices: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), indices.len(), "one index per row");
        let data = indices.iter().enumerate().map(|(r, &c)| xv.get(r, c)).collect();
        let out = Tensor::from_vec(indices.len(), 1, data).expect("column");
        let ng = self.ng(x);
        self.push(out, Op::PickPerRow { x, indices }, ng)
    }

    /// Rows `start..start+len`.
    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "row slice out of range");
        let cols = xv.cols();
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_vec(len, cols, data).expect("slice");
        let ng = self.ng(x);
        self.push(out, Op::RowSlice { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows widths differ");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Tensor::from_vec(rows, cols, data).expect("concat");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols heights differ");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum() / av.len() as f64);
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// `ln(mean(exp(x)))` over all elements.
    pub fn log_mean_exp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let lse = log_sum_exp(av.data());
        let out = Tensor::scalar(lse - (av.len() as f64).ln());
        let ng = self.ng(a);
        self.push(out, Op::LogMeanExp(a), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*bias) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *bias, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, zip_map(g, self.value(*b), |gi, bi| gi * bi));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, zip_map(g, self.value(*a), |gi, ai| gi * ai));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Square(a) => self.acc(grads, *a, zip_map(g, self.value(*a), |gi, x| 2.0 * x * gi)),
            Op::Exp(a) => self.acc(grads, *a, zip_map(g, &node.value, |gi, y| gi * y)),
            Op::Log(a) => self.acc(grads, *a, zip_map(g, self.value(*a), |gi, x| gi / x)),
            Op::Tanh(a) => self.acc(grads, *a, zip_map(g, &node.value, |gi, y| gi * (1.0 - y * y))),
            Op::Sigmoid(a) => self.acc(grads, *a, zip_map(g, &node.value, |gi, y| gi * y * (1.0 - y))),
            Op::Gelu(a) => self.acc(grads, *a, zip_map(g, self.value(*a), |gi, x| gi * gelu_and_grad(x).1)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = y.get(r, c) * (g.get(r, c) - s);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = g.get(r, c) - y.get(r, c).exp() * s;
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain);
                if self.ng(*gain) {
                    let mut dg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    self.acc(grads, *gain, dg);
                }
                if self.ng(*bias) {
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for (o, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *bias, db);
                }
                if self.ng(*x) {
                    let n = cols as f64;
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = g.get(r, c) * gv.data()[c];
                            dxhat[c] = d;
                            sum_d += d;
                            sum_dx += d * xhat.get(r, c);
                        }
                        let inv = inv_std[r];
                        for c in 0..cols {
                            let v = inv / n * (n * dxhat[c] - sum_d - xhat.get(r, c) * sum_dx);
                            dx.set(r, c, v);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (t, d) = qv.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(t, d);
                let mut dk = Tensor::zeros(t, d);
                let mut dv = Tensor::zeros(t, d);
                let mut dp = vec![0.0; t];
                for (h, p) in probs.iter().enumerate() {
                    let off = h * dh;
                    for i in 0..t {
                        let gi = &g.row(i)[off..off + dh];
                        let mut weighted = 0.0;
                        for j in 0..t {
                            let pij = p.get(i, j);
                            if !mask.allows(i, j) {
                                dp[j] = 0.0;
                                continue;
                            }
                            dp[j] = dot(gi, &vv.row(j)[off..off + dh]);
                            weighted += pij * dp[j];
                            if pij != 0.0 {
                                let dvj = &mut dv.row_mut(j)[off..off + dh];
                                for (o, &x) in dvj.iter_mut().zip(gi) {
                                    *o += pij * x;
                                }
                            }
                        }
                        for j in 0..t {
                            if !mask.allows(i, j) {
                                continue;
                            }
                            let ds = p.get(i, j) * (dp[j] - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            {
                                let kj = &kv.row(j)[off..off + dh];
                                let dqi = &mut dq.row_mut(i)[off..off + dh];
                                for (o, &x) in dqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                            }
                            let qi = &qv.row(i)[off..off + dh];
                            let dkj = &mut dk.row_mut(j)[off..off + dh];
                            for (o, &x) in dkj.iter_mut().zip(qi) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::Gather { table, indices } => {
                if self.ng(*table) {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &idx) in indices.iter().enumerate() {
                        for (o, v) in dt.row_mut(idx).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *table, dt);
                }
            }
            Op::PickPerRow { x, indices } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &c) in indices.iter().enumerate() {
                    dx.set(r, c, g.get(r, 0));
                }
                self.acc(grads, *x, dx);
            }
            Op::RowSlice { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let cols = xv.cols();
                dx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut row = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        let data = g.data()[row * cols..(row + rows) * cols].to_vec();
                        self.acc(grads, p, Tensor::from_vec(rows, cols, data).expect("split"));
                    }
                    row += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.ng(p) {
                        let mut dp = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        self.acc(grads, p, dp);
                    }
                    off += pc;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::LogMeanExp(a) => {
                let av = self.value(*a);
                let mut w = av.clone();
                softmax_in_place(w.data_mut());
                w.scale_in_place(g.item());
                self.acc(grads, *a, w);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu_and_grad(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, input: Tensor) {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("gradient").clone();
        let h = 1e-6;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let f = |t: Tensor| {
                let mut g = Graph::new();
                let x = g.param(t);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-7);
            assert!((a - fd).abs() / denom < 1e-5, "coordinate {i}: analytic {a} vs fd {fd}");
        }
    }

    fn input(rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|i| ((i as f64) * 0.731 + 0.2).sin()).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn elementwise_ops_have_exact_gradients() {
        check(
            |g, x| {
                let a = g.tanh(x);
                let b = g.sigmoid(a);
                let c = g.gelu(b);
                let d = g.exp(c);
                let e = g.log(d);
                let f = g.square(e);
                let s = g.scale(f, 0.3);
                let t = g.add_scalar(s, 2.0);
                g.sum(t)
            },
            input(3, 4),
        );
    }

    #[test]
    fn softmax_family_has_exact_gradients() {
        check(
            |g, x| {
                let s = g.softmax_rows(x);
                let l = g.log_softmax_rows(x);
                let m = g.mul(s, l);
                let w = g.constant(input(3, 4).map(|v| v + 1.5));
                let mw = g.mul(m, w);
                g.sum(mw)
            },
            input(3, 4),
        );
        check(|g, x| g.log_mean_exp(x), input(2, 5));
    }

    #[test]
    fn layer_norm_has_exact_gradients() {
        check(
            |g, x| {
                let gain = g.constant(Tensor::row_vector(&[1.2, 0.7, -0.4, 0.9]));
                let bias = g.constant(Tensor::row_vector(&[0.1, 0.0, 0.3, -0.2]));
                let y = g.layer_norm(x, gain, bias);
                let w = g.constant(input(3, 4));
                let yw = g.mul(y, w);
                g.sum(yw)
            },
            input(3, 4),
        );
    }

    #[test]
    fn attention_has_exact_gradients_under_both_masks() {
        for mask in [AttnMask::causal(4), AttnMask::prefix_branches(2, 2)] {
            let mask = Rc::new(mask);
            check(
                |g, x| {
                    let wk = g.constant(input(6, 6).map(|v| v * 0.5));
                    let k = g.matmul(x, wk);
                    let vv = g.tanh(x);
                    let o = g.attention(x, k, vv, 2, mask.clone());
                    let w = g.constant(input(4, 6));
                    let ow = g.mul(o, w);
                    g.sum(ow)
                },
                input(4, 6),
            );
        }
    }

    #[test]
    fn structural_ops_have_exact_gradients() {
        check(
            |g, x| {
                let top = g.row_slice(x, 0, 2);
                let bottom = g.row_slice(x, 2, 2);
                let rows = g.concat_rows(&[bottom, top, x]);
                let cols = g.concat_cols(&[rows, rows]);
                let picked = g.pick_per_row(cols, Rc::new(vec![0, 3, 5, 1, 2, 4, 5, 0]));
                let table = g.gather(x, Rc::new(vec![3, 3, 0]));
                let tm = g.mean(table);
                let ps = g.sum(picked);
                let w = g.constant(Tensor::row_vector(&[0.5, -1.0, 2.0]));
                let biased = g.add_bias(x, w);
                let bs = g.square(biased);
                let bsum = g.sum(bs);
                let a = g.add(ps, tm);
                g.sub(a, bsum)
            },
            input(4, 3),
        );
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let m = AttnMask::causal(3);
        assert!(m.allows(2, 0) && m.allows(1, 1));
        assert!(!m.allows(0, 1) && !m.allows(1, 2));
        let b = AttnMask::prefix_branches(2, 3);
        assert!(b.allows(3, 0) && b.allows(3, 1) && b.allows(3, 3));
        assert!(!b.allows(3, 2) && !b.allows(4, 3));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(input(2, 2));
        let p = g.param(input(2, 2));
        let m = g.matmul(c, p);
        let l = g.sum(m);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
