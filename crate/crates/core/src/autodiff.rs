//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar replays the tape in reverse and returns the
//! gradient of every reachable node that requires one.

use std::rc::Rc;

use crate::error::{FalconError, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Floor applied to probabilities before taking logarithms in the KL term.
pub const KL_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        mask: Rc<[bool]>,
        probs: Vec<f64>,
    },
    LstmCell {
        pre: Var,
        c_prev: Var,
        gates: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        p: Var,
        q: Var,
    },
    SmoothL1 {
        a: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
}

/// Layout of a batched attention call: rows are time-major (`t * batch + b`).
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
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

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(FalconError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn two_d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(FalconError::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(FalconError::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(cols) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = f(*v));
        value
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, tensor::sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::tanh);
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, tensor::gelu);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.two_d("slice_cols", x)?;
        if start >= end || end > cols {
            return Err(FalconError::dim("slice_cols", &[rows, cols], &[start, end]));
        }
        let w = end - start;
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let value = Tensor::new(vec![rows, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.two_d("concat_cols", xs[0])?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.two_d("concat_cols", x)?;
            if r != rows {
                return Err(FalconError::dim("concat_cols", self.shape(xs[0]), self.shape(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.two_d("slice_rows", x)?;
        if start >= end || end > rows {
            return Err(FalconError::dim("slice_rows", &[rows, cols], &[start, end]));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let value = Tensor::new(vec![end - start, cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.two_d("concat_rows", xs[0])?.1;
        let mut data = Vec::new();
        for &x in xs {
            let (_, c) = self.two_d("concat_rows", x)?;
            if c != cols {
                return Err(FalconError::dim("concat_rows", self.shape(xs[0]), self.shape(x)));
            }
            data.extend_from_slice(self.value(x).data());
        }
        let rows = data.len() / cols;
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(xs);
        Ok(self.push(value, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.two_d("gather", table)?;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(FalconError::Vocabulary {
                    token: id as u32,
                    vocab,
                });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(FalconError::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (y, mean, rstd) = tensor::layer_norm_rows(
            self.value(x).data(),
            cols,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).is_finite() {
            return Err(FalconError::Numeric("softmax input".into()));
        }
        let mut value = self.value(x).clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_mut(cols) {
            tensor::softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Multi-head scaled dot-product attention. `mask[i * seq + j]` allows
    /// query position `i` to read key position `j`; the same mask applies to
    /// every sequence in the batch.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape, mask: Rc<[bool]>) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, dim) = self.two_d("attention", q)?;
        let AttnShape { batch, seq, heads } = shape;
        if rows != batch * seq || dim % heads != 0 || mask.len() != seq * seq {
            return Err(FalconError::dim("attention", &[rows, dim], &[batch, seq, heads]));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * dim];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(i * batch + b) * dim + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if mask[i * seq + j] {
                            let kj = &kd[(j * batch + b) * dim + off..][..dh];
                            scores[j] = tensor::dot(qi, kj) * scale;
                            max = max.max(scores[j]);
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..seq {
                        if mask[i * seq + j] {
                            scores[j] = (scores[j] - max).exp();
                            sum += scores[j];
                        }
                    }
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let orow = &mut out[(i * batch + b) * dim + off..][..dh];
                    for j in 0..seq {
                        if mask[i * seq + j] {
                            let p = scores[j] / sum;
                            prow[j] = p;
                            let vj = &vd[(j * batch + b) * dim + off..][..dh];
                            for (o, &vv) in orow.iter_mut().zip(vj) {
                                *o += p * vv;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, dim], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                mask,
                probs,
            },
            rg,
        ))
    }

    /// LSTM cell nonlinearity. `pre` holds gate pre-activations
    /// `[input | forget | cell | output]` (`B × 4h`); the result is `[h | c]`
    /// (`B × 2h`).
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Var) -> Result<Var> {
        let (b, four_h) = self.two_d("lstm_cell", pre)?;
        let (bc, hd) = self.two_d("lstm_cell", c_prev)?;
        if b != bc || four_h != 4 * hd {
            return Err(FalconError::dim("lstm_cell", self.shape(pre), self.shape(c_prev)));
        }
        let mut out = vec![0.0; b * 2 * hd];
        let mut gates = Vec::with_capacity(b * 4 * hd);
        for r in 0..b {
            let pre_r = self.value(pre).row(r);
            let c_r = self.value(c_prev).row(r);
            let (h_out, c_out) = out[r * 2 * hd..(r + 1) * 2 * hd].split_at_mut(hd);
            gates.extend(tensor::lstm_cell_row(pre_r, c_r, h_out, c_out));
        }
        let value = Tensor::new(vec![b, 2 * hd], out)?;
        let rg = self.rg(&[pre, c_prev]);
        Ok(self.push(value, Op::LstmCell { pre, c_prev, gates }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.two_d("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(FalconError::dim("cross_entropy", &[rows, vocab], &[targets.len()]));
        }
        if !self.value(logits).is_finite() {
            return Err(FalconError::Numeric("cross_entropy logits".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(FalconError::Vocabulary { token: t as u32, vocab });
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let logp = tensor::log_softmax_row(row);
            loss -= logp[t];
            for (p, lp) in row.iter_mut().zip(&logp) {
                *p = lp.exp();
            }
        }
        let value = Tensor::scalar(loss / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `KL(p ‖ q)` summed over the last axis and averaged over rows, with both
    /// distributions floored at [`KL_EPS`] inside the logarithm.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_div", p, q)?;
        let rows = self.value(p).rows();
        let pd = self.value(p).data();
        let qd = self.value(q).data();
        if pd.iter().chain(qd).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FalconError::Numeric("kl_div probabilities".into()));
        }
        let total: f64 = pd
            .iter()
            .zip(qd)
            .map(|(&pv, &qv)| pv * (pv.max(KL_EPS).ln() - qv.max(KL_EPS).ln()))
            .sum();
        let value = Tensor::scalar(total / rows as f64);
        let rg = self.rg(&[p, q]);
        Ok(self.push(value, Op::KlDiv { p, q }, rg))
    }

    /// Mean Smooth-L1 (Huber, β = 1) between `a` and `b`.
    pub fn smooth_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.zip_with("smooth_l1", a, b, |x, y| x - y)?;
        let n = diff.numel() as f64;
        let total: f64 = diff
            .data()
            .iter()
            .map(|&d| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 })
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(total / n), Op::SmoothL1 { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(FalconError::dim("backward", self.shape(loss), &[1]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[1];
                acc(*a, &mut |ga| tensor::matmul_nt_acc(g, val(*b), m, nn, k, ga));
                acc(*b, &mut |gb| tensor::matmul_tn_acc(val(*a), g, m, k, nn, gb));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * av;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let cols = self.nodes[bias.0].value.numel();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b)),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                })
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                })
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * tensor::gelu_grad(xv[i]);
                    }
                })
            }
            Op::SliceCols { x, start } => {
                let cols = self.shape(*x)[1];
                let w = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + w], grow);
                    }
                })
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut off = 0;
                for &x in xs {
                    let w = self.shape(x)[1];
                    acc(x, &mut |gx| {
                        for (r, grow) in gx.chunks_mut(w).enumerate() {
                            add_into(grow, &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols();
                acc(*x, &mut |gx| add_into(&mut gx[start * cols..start * cols + g.len()], g))
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.nodes[x.0].value.numel();
                    acc(x, &mut |gx| add_into(gx, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Gather { table, ids } => {
                let dim = node.value.cols();
                acc(*table, &mut |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * dim..(id + 1) * dim], &g[i * dim..(i + 1) * dim]);
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let cols = node.value.cols();
                let xv = val(*x);
                let gam = val(*gamma);
                let xhat = |r: usize, c: usize| (xv[r * cols + c] - mean[r]) * rstd[r];
                acc(*gamma, &mut |gg| {
                    for r in 0..mean.len() {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat(r, c);
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
                acc(*x, &mut |gx| {
                    for r in 0..mean.len() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dxh = g[r * cols + c] * gam[c];
                            m1 += dxh;
                            m2 += dxh * xhat(r, c);
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let dxh = g[r * cols + c] * gam[c];
                            gx[r * cols + c] += rstd[r] * (dxh - m1 - xhat(r, c) * m2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                acc(*x, &mut |gx| {
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s = tensor::dot(yr, gr);
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                })
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                mask,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, mask, probs, g, grads),
            Op::LstmCell { pre, c_prev, gates } => {
                let (b, two_h) = (node.value.rows(), node.value.cols());
                let hd = two_h / 2;
                let cp = val(*c_prev);
                let out = node.value.data();
                let mut dpre = vec![0.0; b * 4 * hd];
                let mut dcp = vec![0.0; b * hd];
                for r in 0..b {
                    let gt = &gates[r * 4 * hd..(r + 1) * 4 * hd];
                    for j in 0..hd {
                        let (i, f, gg, o) = (gt[j], gt[hd + j], gt[2 * hd + j], gt[3 * hd + j]);
                        let c = out[r * two_h + hd + j];
                        let tc = c.tanh();
                        let dh = g[r * two_h + j];
                        let dc = g[r * two_h + hd + j] + dh * o * (1.0 - tc * tc);
                        let base = r * 4 * hd;
                        dpre[base + j] = dc * gg * i * (1.0 - i);
                        dpre[base + hd + j] = dc * cp[r * hd + j] * f * (1.0 - f);
                        dpre[base + 2 * hd + j] = dc * i * (1.0 - gg * gg);
                        dpre[base + 3 * hd + j] = dh * tc * o * (1.0 - o);
                        dcp[r * hd + j] = dc * f;
                    }
                }
                acc(*pre, &mut |gp| add_into(gp, &dpre));
                acc(*c_prev, &mut |gc| add_into(gc, &dcp));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.shape(*logits)[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..vocab {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * vocab + c] += scale * (probs[r * vocab + c] - onehot);
                        }
                    }
                })
            }
            Op::KlDiv { p, q } => {
                let rows = self.nodes[p.0].value.rows();
                let scale = g[0] / rows as f64;
                let (pd, qd) = (val(*p), val(*q));
                acc(*p, &mut |gp| {
                    for i in 0..gp.len() {
                        let dlogp = if pd[i] > KL_EPS { 1.0 } else { 0.0 };
                        gp[i] += scale * (pd[i].max(KL_EPS).ln() + dlogp - qd[i].max(KL_EPS).ln());
                    }
                });
                acc(*q, &mut |gq| {
                    for i in 0..gq.len() {
                        if qd[i] > KL_EPS {
                            gq[i] -= scale * pd[i] / qd[i];
                        }
                    }
                });
            }
            Op::SmoothL1 { a, b } => {
                let n = self.nodes[a.0].value.numel() as f64;
                let (av, bv) = (val(*a), val(*b));
                let d = |i: usize| (av[i] - bv[i]).clamp(-1.0, 1.0) * g[0] / n;
                acc(*a, &mut |ga| (0..ga.len()).for_each(|i| ga[i] += d(i)));
                acc(*b, &mut |gb| (0..gb.len()).for_each(|i| gb[i] -= d(i)));
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0] / n))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        mask: &[bool],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttnShape { batch, seq, heads } = shape;
        let dim = self.shape(q)[1];
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let row_i = (i * batch + b) * dim + off;
                    let go = &g[row_i..row_i + dh];
                    let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut s = 0.0;
                    for j in 0..seq {
                        if mask[i * seq + j] {
                            let row_j = (j * batch + b) * dim + off;
                            dp[j] = tensor::dot(go, &vd[row_j..row_j + dh]);
                            s += prow[j] * dp[j];
                            for (x, &gv) in dv[row_j..row_j + dh].iter_mut().zip(go) {
                                *x += prow[j] * gv;
                            }
                        }
                    }
                    for j in 0..seq {
                        if mask[i * seq + j] {
                            let row_j = (j * batch + b) * dim + off;
                            let ds = prow[j] * (dp[j] - s) * scale;
                            for c in 0..dh {
                                dq[row_i + c] += ds * kd[row_j + c];
                                dk[row_j + c] += ds * qd[row_i + c];
                            }
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; d.len()]);
                add_into(slot, &d);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
