//! Forward and backward passes of the transformer primitives. Every forward
//! returns whatever its backward needs; backwards return input gradients and
//! push parameter gradients into a [`Grads`] map under the caller's prefix.

use super::mat::{matmul, matmul_at, matmul_bt, Mat};
use super::params::{Grads, ParameterSet};

pub const LN_EPS: f64 = 1e-6;

pub fn add_row_bias(x: &mut Mat, b: &[f64]) {
    for r in 0..x.rows {
        for (v, bb) in x.row_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

pub fn linear(x: &Mat, w: &[f64], b: Option<&[f64]>, out: usize) -> Mat {
    let mut y = matmul(x, w, out);
    if let Some(b) = b {
        add_row_bias(&mut y, b);
    }
    y
}

/// Returns `dx`; adds `dW = x^T dy` and `db = sum_rows(dy)` to `grads`.
pub fn linear_backward(
    x: &Mat,
    w: &[f64],
    dy: &Mat,
    grads: &mut Grads,
    w_name: &str,
    b_name: Option<&str>,
) -> Mat {
    grads.add(w_name, &matmul_at(x, dy));
    if let Some(b_name) = b_name {
        grads.add(b_name, &dy.sum_rows());
    }
    matmul_bt(dy, w, x.cols)
}

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Mat,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> (Mat, LnCache) {
    let d = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for (c, v) in row.iter().enumerate() {
            let h = (v - mean) * rs;
            xhat.data[r * x.cols + c] = h;
            y.data[r * x.cols + c] = g[c] * h + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward(
    cache: &LnCache,
    g: &[f64],
    dy: &Mat,
    grads: &mut Grads,
    prefix: &str,
) -> Mat {
    let cols = dy.cols;
    let d = cols as f64;
    let mut dg = vec![0.0; cols];
    let mut db = vec![0.0; cols];
    let mut dx = Mat::zeros(dy.rows, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..dy.rows {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        for c in 0..cols {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let rs = cache.rstd[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    grads.add(&format!("{prefix}.g"), &dg);
    grads.add(&format!("{prefix}.b"), &db);
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    /// One `n_q x n_k` row-stochastic matrix per head.
    pub probs: Vec<Mat>,
}

/// Scaled dot-product attention with `heads` heads over column blocks of
/// `q (n_q x d)`, `k`, `v (n_k x d)`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, AttnCache) {
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros(q.rows, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (q.cols_slice(h * dh, dh), k.cols_slice(h * dh, dh), v.cols_slice(h * dh, dh));
        let mut s = matmul_bt(&qh, &kh.data, kh.rows);
        for r in 0..s.rows {
            let row = s.row_mut(r);
            let mx = row
                .iter()
                .map(|x| x * scale)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x * scale - mx).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let oh = matmul(&s, &vh.data, dh);
        out.set_cols(h * dh, &oh);
        probs.push(s);
    }
    (out, AttnCache { probs })
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    cache: &AttnCache,
    dout: &Mat,
) -> (Mat, Mat, Mat) {
    let heads = cache.probs.len();
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(q.rows, d);
    let mut dk = Mat::zeros(k.rows, d);
    let mut dv = Mat::zeros(v.rows, d);
    for (h, p) in cache.probs.iter().enumerate() {
        let (qh, kh, vh) = (q.cols_slice(h * dh, dh), k.cols_slice(h * dh, dh), v.cols_slice(h * dh, dh));
        let doh = dout.cols_slice(h * dh, dh);
        let dvh = Mat::from_vec(p.cols, dh, matmul_at(p, &doh));
        let mut ds = matmul_bt(&doh, &vh.data, vh.rows);
        for r in 0..ds.rows {
            let pr = p.row(r);
            let dot: f64 = ds.row(r).iter().zip(pr).map(|(a, b)| a * b).sum();
            for (x, pv) in ds.row_mut(r).iter_mut().zip(pr) {
                *x = pv * (*x - dot) * scale;
            }
        }
        let dqh = matmul(&ds, &kh.data, dh);
        let dkh = Mat::from_vec(ds.cols, dh, matmul_at(&ds, &qh));
        dq.set_cols(h * dh, &dqh);
        dk.set_cols(h * dh, &dkh);
        dv.set_cols(h * dh, &dvh);
    }
    (dq, dk, dv)
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LnCache,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: AttnCache,
    ctx: Mat,
    ln2: LnCache,
    m: Mat,
    pre: Mat,
    act: Mat,
}

impl BlockCache {
    pub fn attention_probs(&self) -> &[Mat] {
        &self.attn.probs
    }
}

/// Pre-LN transformer block:
/// `h = x + Attn(LN1(x))`, `y = h + FC2(GELU(FC1(LN2(h))))`.
pub fn block_forward(p: &ParameterSet, prefix: &str, x: &Mat) -> (Mat, BlockCache) {
    let cfg = p.config();
    let d = cfg.d_model;
    let hidden = cfg.mlp_hidden();
    let t = |s: &str| p.tensor(&format!("{prefix}.{s}"));

    let (a, ln1) = layer_norm(x, t("ln1.g"), t("ln1.b"));
    // No key bias: it shifts every score in a row equally.
    let qkv = linear(&a, t("attn.qkv.w"), None, 3 * d);
    let (mut q, k, mut v) = (qkv.cols_slice(0, d), qkv.cols_slice(d, d), qkv.cols_slice(2 * d, d));
    add_row_bias(&mut q, t("attn.q.b"));
    add_row_bias(&mut v, t("attn.v.b"));
    let (ctx, attn) = attention(&q, &k, &v, cfg.n_heads);
    let mut h = linear(&ctx, t("attn.out.w"), Some(t("attn.out.b")), d);
    h.add_assign(x);

    let (m, ln2) = layer_norm(&h, t("ln2.g"), t("ln2.b"));
    let pre = linear(&m, t("mlp.fc1.w"), Some(t("mlp.fc1.b")), hidden);
    let act = Mat::from_vec(pre.rows, pre.cols, pre.data.iter().map(|&z| gelu(z)).collect());
    let mut y = linear(&act, t("mlp.fc2.w"), Some(t("mlp.fc2.b")), d);
    y.add_assign(&h);

    (
        y,
        BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            attn,
            ctx,
            ln2,
            m,
            pre,
            act,
        },
    )
}

pub fn block_backward(
    p: &ParameterSet,
    prefix: &str,
    c: &BlockCache,
    dy: &Mat,
    grads: &mut Grads,
) -> Mat {
    let n = |s: &str| format!("{prefix}.{s}");
    let t = |s: &str| p.tensor(&n(s));

    // MLP branch
    let dact = linear_backward(&c.act, t("mlp.fc2.w"), dy, grads, &n("mlp.fc2.w"), Some(&n("mlp.fc2.b")));
    let mut dpre = dact;
    for (g, z) in dpre.data.iter_mut().zip(&c.pre.data) {
        *g *= gelu_grad(*z);
    }
    let dm = linear_backward(&c.m, t("mlp.fc1.w"), &dpre, grads, &n("mlp.fc1.w"), Some(&n("mlp.fc1.b")));
    let mut dh = layer_norm_backward(&c.ln2, t("ln2.g"), &dm, grads, &n("ln2"));
    dh.add_assign(dy);

    // attention branch
    let dctx = linear_backward(&c.ctx, t("attn.out.w"), &dh, grads, &n("attn.out.w"), Some(&n("attn.out.b")));
    let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.attn, &dctx);
    let d = dq.cols;
    let mut dqkv = Mat::zeros(dq.rows, 3 * d);
    dqkv.set_cols(0, &dq);
    dqkv.set_cols(d, &dk);
    dqkv.set_cols(2 * d, &dv);
    grads.add(&n("attn.q.b"), &dq.sum_rows());
    grads.add(&n("attn.v.b"), &dv.sum_rows());
    let da = linear_backward(&c.a, t("attn.qkv.w"), &dqkv, grads, &n("attn.qkv.w"), None);
    let mut dx = layer_norm_backward(&c.ln1, t("ln1.g"), &da, grads, &n("ln1"));
    dx.add_assign(&dh);
    dx
}
