//! Encoder, masked reconstruction, contrastive alignment, and the loss traces
//! that carry forward state into the backward pass.

use super::connector::{self, AlignTrace};
use super::layers::{block_backward, block_forward, layer_norm, layer_norm_backward, linear, linear_backward, BlockCache, LnCache};
use super::mat::Mat;
use super::params::{Grads, ParameterSet};
use super::ModelError;
use crate::geometry::{patchify, pos_embed_3d, sample_mask, MaskSet, TokenGrid};
use crate::volume::Volume;

type Result<T> = std::result::Result<T, ModelError>;

pub fn tokens_from_grid(g: &TokenGrid<f32>) -> Mat {
    Mat::from_vec(
        g.n_tokens(),
        g.token_dim(),
        g.data().iter().map(|&v| v as f64).collect(),
    )
}

/// Patchifies `v` with the config's patch size; the grid must match too.
pub fn tokens_from_volume(params: &ParameterSet, v: &Volume) -> Result<Mat> {
    let cfg = params.config();
    let grid = patchify(v, cfg.patch_dims)?;
    if grid.grid_dims() != cfg.grid_dims {
        return Err(ModelError::DimMismatch {
            what: "token count",
            expected: cfg.n_tokens(),
            got: grid.n_tokens(),
        });
    }
    Ok(tokens_from_grid(&grid))
}

/// FNV-1a over tensor names and value bits; ties a trace to the exact
/// parameter values it was computed with.
pub(crate) fn fingerprint(params: &ParameterSet) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (name, p) in params.iter() {
        eat(name.as_bytes());
        for v in &p.data {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

fn check_finite(m: &Mat, module: &'static str, layer: usize) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { module, layer })
    }
}

#[derive(Debug, Clone)]
pub struct EncodeTrace {
    visible: Vec<usize>,
    input: Mat,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
}

impl EncodeTrace {
    /// Per-head attention matrices of encoder layer `layer`.
    pub fn attention_probs(&self, layer: usize) -> &[Mat] {
        self.blocks[layer].attention_probs()
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }
}

/// Embeds the `visible` rows of `tokens`, adds positional embeddings, and
/// runs the pre-LN blocks and final LN. Layer 0 of a `NonFinite` error is the
/// embedding; layer `l + 1` is block `l`.
pub fn encode_traced(
    params: &ParameterSet,
    tokens: &Mat,
    visible: &[usize],
) -> Result<(Mat, EncodeTrace)> {
    let cfg = params.config();
    if tokens.cols != cfg.token_dim() {
        return Err(ModelError::DimMismatch {
            what: "token dim",
            expected: cfg.token_dim(),
            got: tokens.cols,
        });
    }
    if tokens.rows != cfg.n_tokens() {
        return Err(ModelError::DimMismatch {
            what: "token count",
            expected: cfg.n_tokens(),
            got: tokens.rows,
        });
    }
    if visible.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if let Some(&bad) = visible.iter().find(|&&i| i >= tokens.rows) {
        return Err(ModelError::DimMismatch {
            what: "visible index bound",
            expected: tokens.rows,
            got: bad,
        });
    }
    let d = cfg.d_model;
    let pos = pos_embed_3d(cfg.grid_dims, d)?;
    let input = tokens.select_rows(visible);
    let mut x = linear(
        &input,
        params.tensor("encoder.patch_embed.w"),
        Some(params.tensor("encoder.patch_embed.b")),
        d,
    );
    for (r, &i) in visible.iter().enumerate() {
        for (v, p) in x.row_mut(r).iter_mut().zip(&pos[i * d..(i + 1) * d]) {
            *v += p;
        }
    }
    check_finite(&x, "encoder", 0)?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let (y, cache) = block_forward(params, &format!("encoder.blocks.{l}"), &x);
        check_finite(&y, "encoder", l + 1)?;
        blocks.push(cache);
        x = y;
    }
    let (out, ln_f) = layer_norm(
        &x,
        params.tensor("encoder.ln_f.g"),
        params.tensor("encoder.ln_f.b"),
    );
    Ok((
        out,
        EncodeTrace {
            visible: visible.to_vec(),
            input,
            blocks,
            ln_f,
        },
    ))
}

pub fn encode(params: &ParameterSet, tokens: &Mat, visible: &[usize]) -> Result<Mat> {
    encode_traced(params, tokens, visible).map(|(out, _)| out)
}

pub(crate) fn encode_backward(
    params: &ParameterSet,
    trace: &EncodeTrace,
    dout: &Mat,
    grads: &mut Grads,
) {
    let mut dx = layer_norm_backward(
        &trace.ln_f,
        params.tensor("encoder.ln_f.g"),
        dout,
        grads,
        "encoder.ln_f",
    );
    for l in (0..trace.blocks.len()).rev() {
        dx = block_backward(
            params,
            &format!("encoder.blocks.{l}"),
            &trace.blocks[l],
            &dx,
            grads,
        );
    }
    linear_backward(
        &trace.input,
        params.tensor("encoder.patch_embed.w"),
        &dx,
        grads,
        "encoder.patch_embed.w",
        Some("encoder.patch_embed.b"),
    );
}

#[derive(Debug, Clone)]
struct MaeTrace {
    targets: Mat,
    mask: MaskSet,
    enc: EncodeTrace,
    dec: BlockCache,
    dec_out: Mat,
    recon: Mat,
}

#[derive(Debug, Clone)]
struct FlipSample {
    enc: EncodeTrace,
    pooled: Mat,
    norm: f64,
    z: Vec<f64>,
}

#[derive(Debug, Clone)]
struct FlipTrace {
    samples: Vec<FlipSample>,
    dz: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum TraceKind {
    Mae(Box<MaeTrace>),
    Flip(Box<FlipTrace>),
    Align(Box<AlignTrace>),
}

/// Forward state of one loss evaluation, consumed by [`LossTrace::backward`].
#[derive(Debug, Clone)]
pub struct LossTrace {
    fingerprint: u64,
    kind: TraceKind,
}

impl LossTrace {
    pub(crate) fn align(params: &ParameterSet, t: AlignTrace) -> Self {
        Self {
            fingerprint: fingerprint(params),
            kind: TraceKind::Align(Box::new(t)),
        }
    }

    pub fn objective(&self) -> &'static str {
        match self.kind {
            TraceKind::Mae(_) => "mae",
            TraceKind::Flip(_) => "flip",
            TraceKind::Align(_) => "align",
        }
    }

    /// Gradients of the traced loss for every trainable tensor it touches.
    /// Frozen tensors never appear in the result.
    pub fn backward(&self, params: &ParameterSet) -> Result<Grads> {
        if fingerprint(params) != self.fingerprint {
            return Err(ModelError::TraceMismatch(
                "parameters differ from those used in the forward pass".into(),
            ));
        }
        let mut grads = Grads::default();
        let encoder_live = params.any_trainable("encoder");
        match &self.kind {
            TraceKind::Mae(t) => mae_backward(params, t, encoder_live, &mut grads),
            TraceKind::Flip(t) => flip_backward(params, t, encoder_live, &mut grads),
            TraceKind::Align(t) => connector::align_backward(params, t, encoder_live, &mut grads),
        }
        grads.retain_trainable(params);
        Ok(grads)
    }
}

#[derive(Debug, Clone)]
pub struct MaeOutput {
    pub loss: f64,
    /// Head output for every token, `n_tokens x token_dim`.
    pub reconstruction: Mat,
    pub mask: MaskSet,
    pub trace: LossTrace,
}

/// Masked reconstruction loss with a mask drawn from `seed`.
pub fn mae_loss(params: &ParameterSet, volume: &Volume, ratio: f64, seed: u64) -> Result<MaeOutput> {
    let tokens = tokens_from_volume(params, volume)?;
    mae_loss_tokens(params, &tokens, ratio, seed)
}

pub fn mae_loss_tokens(params: &ParameterSet, tokens: &Mat, ratio: f64, seed: u64) -> Result<MaeOutput> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ModelError::BadRatio(ratio));
    }
    let mask = sample_mask(tokens.rows, ratio, seed)?;
    mae_loss_masked(params, tokens, &mask)
}

/// Encodes the visible tokens, fills masked slots with the mask token plus
/// position, decodes with one block and a linear head, and scores the mean
/// squared error over masked tokens only.
pub fn mae_loss_masked(params: &ParameterSet, tokens: &Mat, mask: &MaskSet) -> Result<MaeOutput> {
    mae_loss_with_targets(params, tokens, tokens, mask)
}

/// As [`mae_loss_masked`] but scores against `targets` instead of the
/// input tokens. Only the masked rows of `targets` are read.
pub fn mae_loss_with_targets(
    params: &ParameterSet,
    tokens: &Mat,
    targets: &Mat,
    mask: &MaskSet,
) -> Result<MaeOutput> {
    if (targets.rows, targets.cols) != (tokens.rows, tokens.cols) {
        return Err(ModelError::DimMismatch {
            what: "target rows",
            expected: tokens.rows,
            got: targets.rows,
        });
    }
    let cfg = params.config();
    let visible = mask.visible();
    let n_masked = mask.masked_indices.len();
    if visible.is_empty() || n_masked == 0 || mask.n_tokens != tokens.rows {
        return Err(ModelError::DegenerateMask {
            visible: visible.len(),
            masked: n_masked,
        });
    }
    let (enc, enc_trace) = encode_traced(params, tokens, &visible)?;
    let d = cfg.d_model;
    let td = cfg.token_dim();
    let pos = pos_embed_3d(cfg.grid_dims, d)?;
    let mask_token = params.tensor("mae.mask_token");
    let mut dec_in = Mat::zeros(tokens.rows, d);
    for (r, &i) in visible.iter().enumerate() {
        dec_in.row_mut(i).copy_from_slice(enc.row(r));
    }
    for &i in &mask.masked_indices {
        for ((o, m), p) in dec_in.row_mut(i).iter_mut().zip(mask_token).zip(&pos[i * d..(i + 1) * d]) {
            *o = m + p;
        }
    }
    let (dec_out, dec) = block_forward(params, "mae.decoder", &dec_in);
    check_finite(&dec_out, "decoder", 0)?;
    let recon = linear(&dec_out, params.tensor("mae.head.w"), Some(params.tensor("mae.head.b")), td);
    check_finite(&recon, "head", 0)?;

    let mut sse = 0.0;
    for &i in &mask.masked_indices {
        for (r, t) in recon.row(i).iter().zip(targets.row(i)) {
            sse += (r - t) * (r - t);
        }
    }
    let loss = sse / (n_masked * td) as f64;
    let trace = LossTrace {
        fingerprint: fingerprint(params),
        kind: TraceKind::Mae(Box::new(MaeTrace {
            targets: targets.clone(),
            mask: mask.clone(),
            enc: enc_trace,
            dec,
            dec_out,
            recon: recon.clone(),
        })),
    };
    Ok(MaeOutput {
        loss,
        reconstruction: recon,
        mask: mask.clone(),
        trace,
    })
}

fn mae_backward(params: &ParameterSet, t: &MaeTrace, encoder_live: bool, grads: &mut Grads) {
    let td = t.recon.cols;
    let scale = 2.0 / (t.mask.masked_indices.len() * td) as f64;
    let mut dr = Mat::zeros(t.recon.rows, td);
    for &i in &t.mask.masked_indices {
        for ((g, r), y) in dr.row_mut(i).iter_mut().zip(t.recon.row(i)).zip(t.targets.row(i)) {
            *g = scale * (r - y);
        }
    }
    let ddec = linear_backward(
        &t.dec_out,
        params.tensor("mae.head.w"),
        &dr,
        grads,
        "mae.head.w",
        Some("mae.head.b"),
    );
    let ddec_in = block_backward(params, "mae.decoder", &t.dec, &ddec, grads);
    let mut dmask = vec![0.0; ddec_in.cols];
    for &i in &t.mask.masked_indices {
        for (a, g) in dmask.iter_mut().zip(ddec_in.row(i)) {
            *a += g;
        }
    }
    grads.add("mae.mask_token", &dmask);
    if encoder_live {
        let denc = ddec_in.select_rows(t.enc.visible());
        encode_backward(params, &t.enc, &denc, grads);
    }
}

/// Result of the symmetric InfoNCE objective on unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct InfoNce {
    pub loss: f64,
    /// `S = Z T^T / tau`.
    pub similarity: Mat,
    pub d_image: Vec<Vec<f64>>,
    pub d_text: Vec<Vec<f64>>,
}

fn log_softmax_target(vals: impl Iterator<Item = f64> + Clone, target: usize) -> (f64, Vec<f64>) {
    let mx = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.map(|v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    // -log p_target = log z - (s_target - mx)
    let nll = z.ln() - exps[target].ln();
    (nll, probs)
}

/// Symmetric cross-entropy over the similarity matrix with matched pairs on
/// the diagonal: `0.5 * (rows + columns)`, each averaged over the batch.
pub fn info_nce(image: &[Vec<f64>], text: &[Vec<f64>], tau: f64) -> InfoNce {
    let b = image.len();
    let mut s = Mat::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            s.data[i * b + j] = image[i].iter().zip(&text[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
        }
    }
    let mut ds = Mat::zeros(b, b);
    let w = 0.5 / b as f64;
    let mut loss = 0.0;
    for i in 0..b {
        let (nll, p) = log_softmax_target(s.row(i).iter().copied(), i);
        loss += w * nll;
        for j in 0..b {
            ds.data[i * b + j] += w * (p[j] - (i == j) as u8 as f64);
        }
    }
    for j in 0..b {
        let (nll, q) = log_softmax_target((0..b).map(|i| s.data[i * b + j]), j);
        loss += w * nll;
        for i in 0..b {
            ds.data[i * b + j] += w * (q[i] - (i == j) as u8 as f64);
        }
    }
    let dim = image.first().map_or(0, Vec::len);
    let mut d_image = vec![vec![0.0; dim]; b];
    let mut d_text = vec![vec![0.0; dim]; b];
    for i in 0..b {
        for j in 0..b {
            let g = ds.data[i * b + j] / tau;
            for c in 0..dim {
                d_image[i][c] += g * text[j][c];
                d_text[j][c] += g * image[i][c];
            }
        }
    }
    InfoNce {
        loss,
        similarity: s,
        d_image,
        d_text,
    }
}

pub fn l2_normalize(v: &[f64], what: &str) -> Result<(Vec<f64>, f64)> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        return Err(ModelError::ZeroNorm(what.to_string()));
    }
    Ok((v.iter().map(|x| x / norm).collect(), norm))
}

/// Seed of the mask for sample `i` of a batch drawn with `seed`.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone)]
pub struct FlipOutput {
    pub loss: f64,
    pub similarity: Mat,
    pub trace: LossTrace,
}

/// Contrastive loss between masked-view image embeddings and the given text
/// embeddings. Sample `i` is masked with `sample_seed(seed, i)`.
pub fn flip_loss(
    params: &ParameterSet,
    tokens: &[Mat],
    text: &[Vec<f64>],
    ratio: f64,
    tau: f64,
    seed: u64,
) -> Result<FlipOutput> {
    let cfg = params.config();
    let b = tokens.len();
    if b < 2 || text.len() != b {
        return Err(ModelError::BadBatch(format!(
            "need B >= 2 volumes with one text each, got {b} volumes and {} texts",
            text.len()
        )));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(ModelError::BadRatio(ratio));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ModelError::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut text_unit = Vec::with_capacity(b);
    for (j, t) in text.iter().enumerate() {
        if t.len() != cfg.d_joint {
            return Err(ModelError::DimMismatch {
                what: "text embedding",
                expected: cfg.d_joint,
                got: t.len(),
            });
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::BadBatch(format!("text embedding {j} is not finite")));
        }
        text_unit.push(l2_normalize(t, &format!("text {j}"))?.0);
    }

    let mut samples = Vec::with_capacity(b);
    for (i, tok) in tokens.iter().enumerate() {
        let mask = sample_mask(tok.rows, ratio, sample_seed(seed, i))?;
        let (enc, enc_trace) = encode_traced(params, tok, &mask.visible())?;
        let pooled = Mat::from_vec(1, cfg.d_model, enc.mean_rows());
        let u = linear(&pooled, params.tensor("flip.proj.w"), None, cfg.d_joint);
        let (z, norm) = l2_normalize(&u.data, &format!("image {i}"))?;
        samples.push(FlipSample {
            enc: enc_trace,
            pooled,
            norm,
            z,
        });
    }
    let image: Vec<Vec<f64>> = samples.iter().map(|s| s.z.clone()).collect();
    let nce = info_nce(&image, &text_unit, tau);
    let trace = LossTrace {
        fingerprint: fingerprint(params),
        kind: TraceKind::Flip(Box::new(FlipTrace {
            samples,
            dz: nce.d_image,
        })),
    };
    Ok(FlipOutput {
        loss: nce.loss,
        similarity: nce.similarity,
        trace,
    })
}

fn flip_backward(params: &ParameterSet, t: &FlipTrace, encoder_live: bool, grads: &mut Grads) {
    for (s, dz) in t.samples.iter().zip(&t.dz) {
        let dot: f64 = s.z.iter().zip(dz).map(|(a, b)| a * b).sum();
        let du: Vec<f64> = s
            .z
            .iter()
            .zip(dz)
            .map(|(z, g)| (g - z * dot) / s.norm)
            .collect();
        let du = Mat::from_vec(1, du.len(), du);
        let dpool = linear_backward(&s.pooled, params.tensor("flip.proj.w"), &du, grads, "flip.proj.w", None);
        if encoder_live {
            let n = s.enc.visible().len();
            let mut dout = Mat::zeros(n, dpool.cols);
            for r in 0..n {
                for (o, g) in dout.row_mut(r).iter_mut().zip(&dpool.data) {
                    *o = g / n as f64;
                }
            }
            encode_backward(params, &s.enc, &dout, grads);
        }
    }
}
