//! Tape-free kernels for inference. Each one reproduces the arithmetic of the
//! corresponding [`Tape`](crate::autodiff::Tape) operation in the same order,
//! so inference results are bit-identical to training-time forwards.

use crate::tensor::{self, Tensor};

/// `x[rows × in] · w[in × out]`.
pub(crate) fn linear(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (inp, out) = (w.rows(), w.cols());
    let rows = x.len() / inp;
    let mut y = vec![0.0; rows * out];
    tensor::matmul_acc(x, w.data(), rows, inp, out, &mut y);
    y
}

pub(crate) fn add_bias(x: &mut [f64], b: &Tensor) {
    let cols = b.numel();
    for row in x.chunks_mut(cols) {
        for (v, bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
}

/// `x += y` elementwise.
pub(crate) fn add_assign(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

pub(crate) fn layer_norm(x: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    tensor::layer_norm_rows(x, gamma.numel(), gamma.data(), beta.data()).0
}

pub(crate) fn gelu_in_place(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = tensor::gelu(*v);
    }
}

/// Pre-norm GELU MLP with residual: `x + W2·gelu(W1·LN(x) + b1) + b2`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mlp_residual(
    x: &mut [f64],
    ln_g: &Tensor,
    ln_b: &Tensor,
    w1: &Tensor,
    b1: &Tensor,
    w2: &Tensor,
    b2: &Tensor,
) {
    let m = layer_norm(x, ln_g, ln_b);
    let mut u = linear(&m, w1);
    add_bias(&mut u, b1);
    gelu_in_place(&mut u);
    let mut d = linear(&u, w2);
    add_bias(&mut d, b2);
    add_assign(x, &d);
}

/// One head of scaled dot-product attention for a single query, reading the
/// given key/value rows in order. Accumulates into `out`.
pub(crate) fn attend_head<'a>(
    q: &[f64],
    kv: impl Iterator<Item = (&'a [f64], &'a [f64])> + Clone,
    scale: f64,
    out: &mut [f64],
) {
    let mut scores = Vec::new();
    let mut max = f64::NEG_INFINITY;
    for (k, _) in kv.clone() {
        let s = tensor::dot(q, k) * scale;
        max = max.max(s);
        scores.push(s);
    }
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for (s, (_, v)) in scores.iter().zip(kv) {
        let p = s / sum;
        for (o, &vv) in out.iter_mut().zip(v) {
            *o += p * vv;
        }
    }
}

/// Multi-head attention for one query row. `rows` yields `(k_row, v_row)`
/// pairs of full width in ascending position order.
pub(crate) fn attend_row<'a>(
    q: &[f64],
    heads: usize,
    rows: impl Iterator<Item = (&'a [f64], &'a [f64])> + Clone,
    out: &mut [f64],
) {
    let dh = q.len() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let kv = rows.clone().map(|(k, v)| (&k[r.clone()], &v[r.clone()]));
        attend_head(&q[r.clone()], kv, scale, &mut out[r.clone()]);
    }
}
