//! Token compression, the query resampler, the MLP connector, and the stage
//! alignment objective against a fixed language-side head.

use super::config::Compression;
use super::layers::{attention, attention_backward, gelu, gelu_grad, linear, linear_backward, AttnCache};
use super::mat::Mat;
use super::model::{encode_backward, encode_traced, EncodeTrace, LossTrace};
use super::params::{Grads, ParameterSet};
use super::ModelError;
use crate::geometry::{avg_pool_3d, pixel_shuffle_3d, pixel_unshuffle_3d, TokenGrid};

type Result<T> = std::result::Result<T, ModelError>;

const RS: &str = "connector.resampler";

#[derive(Debug, Clone)]
pub(crate) struct ResamplerTrace {
    x: Mat,
    queries: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: AttnCache,
}

fn require_resampler(params: &ParameterSet) -> Result<()> {
    if params.get(&format!("{RS}.queries")).is_none() {
        return Err(ModelError::Config(
            "parameter set has no resampler; build it with perceiver compression".into(),
        ));
    }
    Ok(())
}

fn resample_traced(params: &ParameterSet, x: &Mat) -> Result<(Mat, ResamplerTrace)> {
    require_resampler(params)?;
    let cfg = params.config();
    let d = cfg.d_model;
    if x.rows == 0 {
        return Err(ModelError::EmptyInput);
    }
    if x.cols != d {
        return Err(ModelError::DimMismatch {
            what: "resampler input dim",
            expected: d,
            got: x.cols,
        });
    }
    let t = |s: &str| params.tensor(&format!("{RS}.{s}"));
    let queries = Mat::from_vec(cfg.n_queries, d, t("queries").to_vec());
    let q = linear(&queries, t("q.w"), Some(t("q.b")), d);
    let k = linear(x, t("k.w"), None, d);
    let v = linear(x, t("v.w"), Some(t("v.b")), d);
    let (out, attn) = attention(&q, &k, &v, cfg.n_heads);
    Ok((
        out,
        ResamplerTrace {
            x: x.clone(),
            queries,
            q,
            k,
            v,
            attn,
        },
    ))
}

/// Cross-attention from the learned queries onto `x`; always returns
/// `n_queries` rows whatever the input length.
pub fn perceiver_resample(params: &ParameterSet, x: &Mat) -> Result<Mat> {
    resample_traced(params, x).map(|(out, _)| out)
}

fn resample_backward(params: &ParameterSet, t: &ResamplerTrace, dout: &Mat, grads: &mut Grads) -> Mat {
    let w = |s: &str| params.tensor(&format!("{RS}.{s}"));
    let n = |s: &str| format!("{RS}.{s}");
    let (dq, dk, dv) = attention_backward(&t.q, &t.k, &t.v, &t.attn, dout);
    let dqueries = linear_backward(&t.queries, w("q.w"), &dq, grads, &n("q.w"), Some(&n("q.b")));
    grads.add(&n("queries"), &dqueries.data);
    let mut dx = linear_backward(&t.x, w("k.w"), &dk, grads, &n("k.w"), None);
    dx.add_assign(&linear_backward(&t.x, w("v.w"), &dv, grads, &n("v.w"), Some(&n("v.b"))));
    dx
}

#[derive(Debug, Clone)]
pub(crate) enum CompressTrace {
    Shuffle,
    Pool,
    Resample(Box<ResamplerTrace>),
}

fn compress_traced(params: &ParameterSet, enc: &Mat) -> Result<(Mat, CompressTrace)> {
    let cfg = params.config();
    match cfg.compression {
        Compression::PixelShuffle | Compression::AvgPool => {
            if enc.rows != cfg.n_tokens() {
                return Err(ModelError::DimMismatch {
                    what: "token count",
                    expected: cfg.n_tokens(),
                    got: enc.rows,
                });
            }
            let grid = TokenGrid::new(cfg.grid_dims, enc.cols, enc.data.clone())?;
            let (out, tr) = if cfg.compression == Compression::PixelShuffle {
                (pixel_shuffle_3d(&grid)?, CompressTrace::Shuffle)
            } else {
                (avg_pool_3d(&grid)?, CompressTrace::Pool)
            };
            Ok((Mat::from_vec(out.n_tokens(), out.token_dim(), out.into_data()), tr))
        }
        Compression::Perceiver => {
            let (out, tr) = resample_traced(params, enc)?;
            Ok((out, CompressTrace::Resample(Box::new(tr))))
        }
    }
}

/// Reduces a full grid of encoder outputs with the config's compression.
pub fn compress(params: &ParameterSet, enc: &Mat) -> Result<Mat> {
    compress_traced(params, enc).map(|(m, _)| m)
}

fn compress_backward(params: &ParameterSet, t: &CompressTrace, dout: &Mat, grads: &mut Grads) -> Result<Mat> {
    let cfg = params.config();
    let [gx, gy, _] = cfg.grid_dims;
    match t {
        CompressTrace::Shuffle => {
            let half = [gx / 2, gy / 2, cfg.grid_dims[2] / 2];
            let g = TokenGrid::new(half, dout.cols, dout.data.clone())?;
            let back = pixel_unshuffle_3d(&g)?;
            Ok(Mat::from_vec(back.n_tokens(), back.token_dim(), back.into_data()))
        }
        CompressTrace::Pool => {
            let (hx, hy) = (gx / 2, gy / 2);
            let mut dx = Mat::zeros(cfg.n_tokens(), dout.cols);
            for i in 0..cfg.n_tokens() {
                let (x, y, z) = (i % gx, (i / gx) % gy, i / (gx * gy));
                let dst = x / 2 + hx * (y / 2 + hy * (z / 2));
                for (o, g) in dx.row_mut(i).iter_mut().zip(dout.row(dst)) {
                    *o = g / 8.0;
                }
            }
            Ok(dx)
        }
        CompressTrace::Resample(tr) => Ok(resample_backward(params, tr, dout, grads)),
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConnectorTrace {
    x: Mat,
    pre: Option<Mat>,
    act: Option<Mat>,
}

fn connector_traced(params: &ParameterSet, x: &Mat) -> Result<(Mat, ConnectorTrace)> {
    let cfg = params.config();
    if x.cols != cfg.connector_in() {
        return Err(ModelError::DimMismatch {
            what: "connector input dim",
            expected: cfg.connector_in(),
            got: x.cols,
        });
    }
    let h = linear(
        x,
        params.tensor("connector.fc1.w"),
        Some(params.tensor("connector.fc1.b")),
        cfg.d_llm,
    );
    if cfg.connector_depth == 1 {
        return Ok((
            h,
            ConnectorTrace {
                x: x.clone(),
                pre: None,
                act: None,
            },
        ));
    }
    let act = Mat::from_vec(h.rows, h.cols, h.data.iter().map(|&v| gelu(v)).collect());
    let out = linear(
        &act,
        params.tensor("connector.fc2.w"),
        Some(params.tensor("connector.fc2.b")),
        cfg.d_llm,
    );
    Ok((
        out,
        ConnectorTrace {
            x: x.clone(),
            pre: Some(h),
            act: Some(act),
        },
    ))
}

/// Per-token MLP into the language embedding width: one affine map at depth
/// 1, affine-GELU-affine at depth 2.
pub fn connector_forward(params: &ParameterSet, x: &Mat) -> Result<Mat> {
    connector_traced(params, x).map(|(m, _)| m)
}

fn connector_backward(params: &ParameterSet, t: &ConnectorTrace, dout: &Mat, grads: &mut Grads) -> Mat {
    let dh = match (&t.pre, &t.act) {
        (Some(pre), Some(act)) => {
            let mut da = linear_backward(
                act,
                params.tensor("connector.fc2.w"),
                dout,
                grads,
                "connector.fc2.w",
                Some("connector.fc2.b"),
            );
            for (g, z) in da.data.iter_mut().zip(&pre.data) {
                *g *= gelu_grad(*z);
            }
            da
        }
        _ => dout.clone(),
    };
    linear_backward(
        &t.x,
        params.tensor("connector.fc1.w"),
        &dh,
        grads,
        "connector.fc1.w",
        Some("connector.fc1.b"),
    )
}

#[derive(Debug, Clone)]
pub(crate) struct AlignTrace {
    enc: EncodeTrace,
    compress: CompressTrace,
    connector: ConnectorTrace,
    n_out: usize,
    pooled: Mat,
    residual: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AlignOutput {
    pub loss: f64,
    /// `lm_head` applied to the mean connector output.
    pub prediction: Vec<f64>,
    pub trace: LossTrace,
}

/// Proxy for language-model alignment: encode every token, compress, run the
/// connector, mean-pool, map through the fixed `lm_head`, and score the mean
/// squared error against `target`.
pub fn align_loss(params: &ParameterSet, tokens: &Mat, target: &[f64]) -> Result<AlignOutput> {
    let cfg = params.config();
    if target.len() != cfg.d_joint {
        return Err(ModelError::DimMismatch {
            what: "alignment target",
            expected: cfg.d_joint,
            got: target.len(),
        });
    }
    let all: Vec<usize> = (0..tokens.rows).collect();
    let (enc, enc_trace) = encode_traced(params, tokens, &all)?;
    let (comp, compress) = compress_traced(params, &enc)?;
    let (out, connector) = connector_traced(params, &comp)?;
    let pooled = Mat::from_vec(1, cfg.d_llm, out.mean_rows());
    let pred = linear(
        &pooled,
        params.tensor("lm_head.w"),
        Some(params.tensor("lm_head.b")),
        cfg.d_joint,
    );
    if !pred.all_finite() {
        return Err(ModelError::NonFinite {
            module: "connector",
            layer: 0,
        });
    }
    let residual: Vec<f64> = pred.data.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / cfg.d_joint as f64;
    let trace = LossTrace::align(
        params,
        AlignTrace {
            enc: enc_trace,
            compress,
            connector,
            n_out: out.rows,
            pooled,
            residual,
        },
    );
    Ok(AlignOutput {
        loss,
        prediction: pred.data,
        trace,
    })
}

pub(crate) fn align_backward(params: &ParameterSet, t: &AlignTrace, encoder_live: bool, grads: &mut Grads) {
    let dj = t.residual.len() as f64;
    let dy = Mat::from_vec(1, t.residual.len(), t.residual.iter().map(|r| 2.0 * r / dj).collect());
    let dpool = linear_backward(&t.pooled, params.tensor("lm_head.w"), &dy, grads, "lm_head.w", Some("lm_head.b"));
    let mut dout = Mat::zeros(t.n_out, dpool.cols);
    for r in 0..t.n_out {
        for (o, g) in dout.row_mut(r).iter_mut().zip(&dpool.data) {
            *o = g / t.n_out as f64;
        }
    }
    let dcomp = connector_backward(params, &t.connector, &dout, grads);
    let denc = compress_backward(params, &t.compress, &dcomp, grads)
        .expect("compression shapes were validated in the forward pass");
    if encoder_live {
        encode_backward(params, &t.enc, &denc, grads);
    }
}
