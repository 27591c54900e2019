//! Staged AdamW training with per-stage freeze sets and a linear schedule.

use super::connector::align_loss;
use super::mat::Mat;
use super::model::{flip_loss, mae_loss_tokens, sample_seed};
use super::params::{Grads, ParameterSet};
use super::ModelError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

pub const STAGE1_LR: f64 = 1e-4;
pub const STAGE2_LR: f64 = 1e-6;
pub const PRETRAIN_LR: f64 = 1e-3;
pub const WARMUP_RATIO: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Mae { ratio: f64 },
    Flip { ratio: f64, tau: f64 },
    /// Connector output, through the fixed head, regressed onto the text
    /// embedding.
    Align,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    /// Tensor names or dotted prefixes; everything else is frozen.
    pub trainable: Vec<String>,
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub objective: Objective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_ratio: WARMUP_RATIO,
        }
    }
}

impl AdamW {
    /// Linear warm-up over `ceil(warmup_ratio * total)` steps from 0 to
    /// `base`, then linear decay to 0 at `total`.
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        let warm = (self.warmup_ratio * total as f64).ceil() as usize;
        if step < warm {
            base * (step as f64 / warm as f64)
        } else if total > warm {
            base * ((total - step) as f64 / (total - warm) as f64)
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanKind {
    #[serde(rename = "1stage")]
    OneStage,
    #[serde(rename = "2stage-frozen")]
    TwoStageFrozen,
    #[serde(rename = "2stage-unfrozen", alias = "2stage")]
    TwoStageUnfrozen,
}

impl PlanKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanKind::OneStage => "1stage",
            PlanKind::TwoStageFrozen => "2stage-frozen",
            PlanKind::TwoStageUnfrozen => "2stage-unfrozen",
        }
    }
}

impl fmt::Display for PlanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlanKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1stage" => Ok(PlanKind::OneStage),
            "2stage-frozen" => Ok(PlanKind::TwoStageFrozen),
            "2stage" | "2stage-unfrozen" => Ok(PlanKind::TwoStageUnfrozen),
            _ => Err(format!(
                "unknown plan {s:?}; expected one of: 1stage, 2stage, 2stage-frozen, 2stage-unfrozen"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMethod {
    Mae,
    Flip,
    MaeThenFlip,
}

impl PretrainMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMethod::Mae => "mae",
            PretrainMethod::Flip => "flip",
            PretrainMethod::MaeThenFlip => "mae_then_flip",
        }
    }
}

impl fmt::Display for PretrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretrainMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mae" => Ok(PretrainMethod::Mae),
            "flip" => Ok(PretrainMethod::Flip),
            "mae_then_flip" => Ok(PretrainMethod::MaeThenFlip),
            _ => Err(format!(
                "unknown pretrain method {s:?}; expected one of: mae, flip, mae_then_flip"
            )),
        }
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl TrainPlan {
    /// Encoder pretraining. `mae_then_flip` carries the encoder from the
    /// reconstruction stage into the contrastive stage; the contrastive
    /// projection starts from its initialization.
    pub fn pretrain(
        method: PretrainMethod,
        ratio: f64,
        tau: f64,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        let mae = Stage {
            name: "mae".into(),
            trainable: strings(&["encoder", "mae"]),
            lr,
            epochs,
            max_steps: None,
            objective: Objective::Mae { ratio },
        };
        let flip = Stage {
            name: "flip".into(),
            trainable: strings(&["encoder", "flip"]),
            lr,
            epochs,
            max_steps: None,
            objective: Objective::Flip { ratio, tau },
        };
        let stages = match method {
            PretrainMethod::Mae => vec![mae],
            PretrainMethod::Flip => vec![flip],
            PretrainMethod::MaeThenFlip => vec![mae, flip],
        };
        Self {
            stages,
            optimizer: AdamW::default(),
            batch_size,
            seed,
        }
    }

    /// Alignment schedules. Stage 1 trains only the connector for one epoch;
    /// stage 2 adds the language-side head, and the encoder when unfrozen.
    pub fn alignment(kind: PlanKind, stage2_epochs: usize, batch_size: usize, seed: u64) -> Self {
        let stage = |name: &str, trainable: &[&str], lr: f64, epochs: usize| Stage {
            name: name.into(),
            trainable: strings(trainable),
            lr,
            epochs,
            max_steps: None,
            objective: Objective::Align,
        };
        let stages = match kind {
            PlanKind::OneStage => vec![stage("joint", &["connector", "lm_head"], STAGE1_LR, stage2_epochs)],
            PlanKind::TwoStageFrozen => vec![
                stage("stage1", &["connector"], STAGE1_LR, 1),
                stage("stage2", &["connector", "lm_head"], STAGE2_LR, stage2_epochs),
            ],
            PlanKind::TwoStageUnfrozen => vec![
                stage("stage1", &["connector"], STAGE1_LR, 1),
                stage("stage2", &["connector", "lm_head", "encoder"], STAGE2_LR, stage2_epochs),
            ],
        };
        Self {
            stages,
            optimizer: AdamW::default(),
            batch_size,
            seed,
        }
    }

    pub fn validate(&self, params: &ParameterSet) -> Result<(), ModelError> {
        if self.stages.is_empty() {
            return Err(ModelError::Config("plan has no stages".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be positive".into()));
        }
        for s in &self.stages {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(ModelError::Config(format!(
                    "stage {}: learning rate must be positive, got {}",
                    s.name, s.lr
                )));
            }
            for sel in &s.trainable {
                if params.resolve(sel).is_empty() {
                    return Err(ModelError::UnknownTensor(sel.clone()));
                }
            }
            match s.objective {
                Objective::Mae { ratio } if !(ratio > 0.0 && ratio < 1.0) => {
                    return Err(ModelError::BadRatio(ratio))
                }
                Objective::Flip { ratio, .. } if !(0.0..1.0).contains(&ratio) => {
                    return Err(ModelError::BadRatio(ratio))
                }
                Objective::Flip { tau, .. } if !(tau > 0.0) => {
                    return Err(ModelError::Config(format!("temperature must be positive, got {tau}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// One training example: patch tokens and a text embedding of width `d_joint`.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub tokens: Mat,
    pub text: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub stage: String,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_history_csv<W: Write>(rows: &[HistoryRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn batches(n: usize, batch_size: usize, min_len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= min_len)
        .map(<[usize]>::to_vec)
        .collect()
}

fn batch_loss(
    params: &ParameterSet,
    objective: Objective,
    data: &[TrainSample],
    batch: &[usize],
    seed: u64,
) -> Result<(f64, Grads), ModelError> {
    if let Objective::Flip { ratio, tau } = objective {
        let tokens: Vec<Mat> = batch.iter().map(|&i| data[i].tokens.clone()).collect();
        let text: Vec<Vec<f64>> = batch.iter().map(|&i| data[i].text.clone()).collect();
        let out = flip_loss(params, &tokens, &text, ratio, tau, seed)?;
        return Ok((out.loss, out.trace.backward(params)?));
    }
    let per_sample: Vec<Result<(f64, Grads), ModelError>> = batch
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let s = &data[i];
            let (loss, trace) = match objective {
                Objective::Mae { ratio } => {
                    let o = mae_loss_tokens(params, &s.tokens, ratio, sample_seed(seed, k))?;
                    (o.loss, o.trace)
                }
                _ => {
                    let o = align_loss(params, &s.tokens, &s.text)?;
                    (o.loss, o.trace)
                }
            };
            Ok((loss, trace.backward(params)?))
        })
        .collect();
    // Reduce in batch order so results do not depend on thread scheduling.
    let mut loss = 0.0;
    let mut grads = Grads::default();
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        grads.merge(g);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// Runs every stage in order with a fresh optimizer state per stage. Only the
/// stage's trainable tensors change; the rest stay bitwise identical.
pub fn train(
    plan: &TrainPlan,
    data: &[TrainSample],
    params: ParameterSet,
) -> Result<(ParameterSet, Vec<HistoryRow>), ModelError> {
    train_observed(plan, data, params, |_, _| Ok(()))
}

/// [`train`] with a callback after each stage, e.g. to snapshot checkpoints.
pub fn train_observed(
    plan: &TrainPlan,
    data: &[TrainSample],
    mut params: ParameterSet,
    mut on_stage_end: impl FnMut(&Stage, &ParameterSet) -> Result<(), ModelError>,
) -> Result<(ParameterSet, Vec<HistoryRow>), ModelError> {
    plan.validate(&params)?;
    if data.is_empty() {
        return Err(ModelError::BadBatch("empty training set".into()));
    }
    let opt = plan.optimizer;
    let mut history = Vec::new();
    let mut global = 0usize;
    for (si, stage) in plan.stages.iter().enumerate() {
        params.set_trainable(&stage.trainable)?;
        let min_len = if matches!(stage.objective, Objective::Flip { .. }) { 2 } else { 1 };
        if data.len() < min_len {
            return Err(ModelError::BadBatch(format!(
                "stage {} needs at least {min_len} samples",
                stage.name
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ ((si as u64 + 1) << 32));
        let mut schedule = Vec::new();
        for _ in 0..stage.epochs {
            schedule.extend(batches(data.len(), plan.batch_size.max(min_len), min_len, &mut rng));
        }
        if let Some(m) = stage.max_steps {
            schedule.truncate(m);
        }
        let total = schedule.len();
        let mut moments: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (t, batch) in schedule.iter().enumerate() {
            let step_seed = sample_seed(plan.seed, global);
            let (loss, grads) = match batch_loss(&params, stage.objective, data, batch, step_seed) {
                Err(ModelError::NonFinite { .. }) => return Err(ModelError::NanLoss { step: global }),
                r => r?,
            };
            if !loss.is_finite() {
                return Err(ModelError::NanLoss { step: global });
            }
            let lr = opt.lr_at(stage.lr, t, total);
            history.push(HistoryRow {
                step: global,
                stage: stage.name.clone(),
                lr,
                loss,
            });
            let k = (t + 1) as i32;
            let (c1, c2) = (1.0 - opt.beta1.powi(k), 1.0 - opt.beta2.powi(k));
            for (name, g) in grads.iter() {
                let (m, v) = moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                let p = params.tensor_mut(name);
                for i in 0..g.len() {
                    m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
                    v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                    let update = (m[i] / c1) / ((v[i] / c2).sqrt() + opt.eps);
                    p[i] -= lr * (update + opt.weight_decay * p[i]);
                }
            }
            log::debug!("{} step {global}: lr {lr:.3e} loss {loss:.6}", stage.name);
            global += 1;
        }
        on_stage_end(stage, &params)?;
    }
    Ok((params, history))
}
