//! One function per pipeline stage. Every stage reads and writes fixed paths
//! under the run's output directory:
//!
//! | stage      | reads                                   | writes                                           |
//! |------------|-----------------------------------------|--------------------------------------------------|
//! | synth      |                                         | `synth/{corpus,lesions}.jsonl`, `synth/volumes/` |
//! | curate     | corpus                                  | `curate/{curated,removal_log,dropped}.jsonl`     |
//! | split      | `curate/curated.jsonl`                  | `split/manifest.json`                            |
//! | preprocess | curated records and their volumes       | `preprocess/<profile>/<id>.ctvol`                |
//! | tokenize   | preprocessed volumes                    | `tokenize/<profile>/<id>.tkg`, `tokenize/ledger.csv` |
//! | pretrain   | curated, manifest, preprocessed volumes | `pretrain/{history.csv,audit.json,model.avt}`, `pretrain/ckpt/` |
//! | gradcheck  |                                         | `gradcheck/report.json`                          |
//! | evaluate   | curated, manifest, volumes, model       | `evaluate/{pairs,scores}.jsonl`, `evaluate/table.csv` |

use crate::config::RunConfig;
use crate::files::{self, file_name};
use crate::synth::Lesion;
use crate::{BenchError, Result};
use argus_core::curation::{curate as curate_records, split_dataset, CuratedRecord, DatasetManifest, RawRecord, Split};
use argus_core::geometry::{avg_pool_3d, patchify, pixel_shuffle_3d};
use argus_core::metrics::{evaluate as score_pairs, merge_clinical, MetricReport, TableRow};
use argus_core::metrics::EvalPair;
use argus_core::vit::params::name_matches;
use argus_core::vit::{
    align_loss, grad_check, init_params, tokens_from_volume, train_observed, write_history_csv, Compression,
    EncoderConfig, HashingEmbedder, HistoryRow, Mat, ParameterSet, Stage, TrainPlan, TrainSample,
};
use argus_core::volume::{preprocess as preprocess_volume, resize, Volume};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const ALIGN_SEED_SALT: u64 = 0xA11C_0000_0000_0001;

fn curated_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir("curate").join("curated.jsonl")
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir("split").join("manifest.json")
}

fn model_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir("pretrain").join("model.avt")
}

fn preprocessed_path(cfg: &RunConfig, id: &str) -> Result<PathBuf> {
    Ok(cfg.out_dir("preprocess").join(cfg.profile.name()).join(file_name(id, "ctvol")?))
}

fn load_curated(cfg: &RunConfig) -> Result<Vec<CuratedRecord>> {
    let path = curated_path(cfg);
    files::require(&path)?;
    files::read_jsonl(&path)
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = manifest_path(cfg);
    files::require(&path)?;
    files::read_json(&path)
}

#[derive(Debug, Serialize, Deserialize)]
struct LesionRow {
    id: String,
    lesions: Vec<Lesion>,
}

pub fn synth(cfg: &RunConfig) -> Result<usize> {
    let samples = cfg.synth_spec().generate()?;
    let dir = cfg.out_dir("synth");
    files::create_dir(&dir.join("volumes"))?;
    let records = samples
        .par_iter()
        .map(|s| {
            let rel = format!("volumes/{}", file_name(&s.id, "ctvol")?);
            files::save_volume(&dir.join(&rel), &s.volume_hu())?;
            Ok(s.record(rel))
        })
        .collect::<Result<Vec<RawRecord>>>()?;
    files::write_jsonl(&dir.join("corpus.jsonl"), &records)?;
    let lesions: Vec<LesionRow> = samples
        .iter()
        .map(|s| LesionRow {
            id: s.id.clone(),
            lesions: s.lesions.clone(),
        })
        .collect();
    files::write_jsonl(&dir.join("lesions.jsonl"), &lesions)?;
    Ok(samples.len())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurateSummary {
    pub kept: usize,
    pub dropped: usize,
    pub removed_sentences: usize,
}

pub fn curate(cfg: &RunConfig) -> Result<CurateSummary> {
    let corpus = cfg.corpus_path();
    files::require(&corpus)?;
    let raw: Vec<RawRecord> = files::read_jsonl(&corpus)?;
    let out = curate_records(&raw)?;
    let dir = cfg.out_dir("curate");
    let log = out.removal_log();
    files::write_jsonl(&dir.join("curated.jsonl"), &out.records)?;
    files::write_jsonl(&dir.join("removal_log.jsonl"), &log)?;
    files::write_jsonl(&dir.join("dropped.jsonl"), &out.dropped)?;
    Ok(CurateSummary {
        kept: out.records.len(),
        dropped: out.dropped.len(),
        removed_sentences: log.len(),
    })
}

pub fn split(cfg: &RunConfig) -> Result<DatasetManifest> {
    let records = load_curated(cfg)?;
    let manifest = split_dataset(&records, cfg.seed);
    files::write_json(&manifest_path(cfg), &manifest)?;
    Ok(manifest)
}

/// Preprocesses every curated record's volume at the run's profile.
pub fn preprocess(cfg: &RunConfig) -> Result<usize> {
    let records = load_curated(cfg)?;
    let corpus = cfg.corpus_path();
    let base = corpus.parent().unwrap_or(Path::new("."));
    records
        .par_iter()
        .map(|r| {
            let rel = r
                .volume
                .as_ref()
                .ok_or_else(|| BenchError::Validation(format!("record {} has no volume", r.id)))?;
            let v = files::load_volume(&base.join(rel))?;
            let p = preprocess_volume(&v, cfg.profile)?;
            files::save_volume(&preprocessed_path(cfg, &r.id)?, &p)
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub id: String,
    pub profile: String,
    pub compression: String,
    pub raw_tokens: usize,
    pub compressed_tokens: usize,
    pub raw_token_dim: usize,
}

/// Patchifies each preprocessed volume, stores the raw grid, and records the
/// token counts before and after compression.
pub fn tokenize(cfg: &RunConfig) -> Result<Vec<LedgerRow>> {
    let records = load_curated(cfg)?;
    let profile = cfg.profile;
    let compression = cfg.compression;
    let rows = records
        .par_iter()
        .map(|r| {
            let path = preprocessed_path(cfg, &r.id)?;
            files::require(&path)?;
            let v = files::load_volume(&path)?;
            if v.dims() != profile.target_dims() {
                return Err(BenchError::Validation(format!(
                    "{}: dims {:?} do not match the {profile} profile {:?}; rerun preprocess",
                    path.display(),
                    v.dims(),
                    profile.target_dims()
                )));
            }
            let grid = patchify(&v, profile.patch_dims())?;
            let compressed = match compression {
                Compression::PixelShuffle => pixel_shuffle_3d(&grid)?.n_tokens(),
                Compression::AvgPool => avg_pool_3d(&grid)?.n_tokens(),
                Compression::Perceiver => cfg.model.n_queries,
            };
            let name = file_name(&r.id, "tkg")?;
            files::save_grid(&cfg.out_dir("tokenize").join(profile.name()).join(name), &grid)?;
            Ok(LedgerRow {
                id: r.id.clone(),
                profile: profile.name().into(),
                compression: compression.as_str().into(),
                raw_tokens: grid.n_tokens(),
                compressed_tokens: compressed,
                raw_token_dim: grid.token_dim(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    files::write_csv(&cfg.out_dir("tokenize").join("ledger.csv"), &rows)?;
    Ok(rows)
}

/// Resizes `v` to the encoder's input grid when needed and patchifies it.
pub fn encoder_tokens(params: &ParameterSet, v: &Volume) -> Result<Mat> {
    let dims = params.config().volume_dims();
    let v = if v.dims() == dims { v.clone() } else { resize(v, dims)? };
    Ok(tokens_from_volume(params, &v)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stage: String,
    pub trainable: Vec<String>,
    /// Tensors whose bits differ from the previous checkpoint.
    pub changed: Vec<String>,
    /// Changed tensors that the stage was not allowed to touch.
    pub violations: Vec<String>,
}

/// Trains with `plan`, saving a checkpoint after each stage and diffing it
/// against the previous one.
pub fn train_audited(
    plan: &TrainPlan,
    data: &[TrainSample],
    params: ParameterSet,
    ckpt_dir: Option<(&Path, usize)>,
) -> Result<(ParameterSet, Vec<HistoryRow>, Vec<AuditEntry>)> {
    let mut audit = Vec::new();
    let mut prev = params.clone();
    let mut k = ckpt_dir.map_or(0, |(_, first)| first);
    let mut save_err = None;
    let (params, history) = train_observed(plan, data, params, |stage: &Stage, p: &ParameterSet| {
        let changed = p.diff(&prev);
        let violations = changed
            .iter()
            .filter(|n| !stage.trainable.iter().any(|sel| name_matches(sel, n)))
            .cloned()
            .collect();
        audit.push(AuditEntry {
            stage: stage.name.clone(),
            trainable: stage.trainable.clone(),
            changed,
            violations,
        });
        if let Some((dir, _)) = ckpt_dir {
            let path = dir.join(format!("{k:02}_{}.avt", stage.name));
            if let Err(e) = files::create_dir(dir).and_then(|_| p.save(&path).map_err(|e| BenchError::format(&path, e))) {
                save_err.get_or_insert(e);
            }
        }
        k += 1;
        prev = p.clone();
        Ok(())
    })?;
    if let Some(e) = save_err {
        return Err(e);
    }
    Ok((params, history, audit))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub n_train: usize,
    pub pretrain_steps: usize,
    pub align_steps: usize,
    pub first_loss: f64,
    pub final_pretrain_loss: f64,
    pub final_align_loss: f64,
    pub audit: Vec<AuditEntry>,
}

fn train_samples(cfg: &RunConfig, params: &ParameterSet, records: &[&CuratedRecord]) -> Result<Vec<TrainSample>> {
    let embedder = HashingEmbedder::new(params.config().d_joint, cfg.seed);
    records
        .par_iter()
        .map(|r| {
            let path = preprocessed_path(cfg, &r.id)?;
            files::require(&path)?;
            Ok(TrainSample {
                tokens: encoder_tokens(params, &files::load_volume(&path)?)?,
                text: embedder.embed(&r.report),
            })
        })
        .collect()
}

pub fn pretrain_plan(cfg: &RunConfig, seed: u64) -> TrainPlan {
    let p = &cfg.pretrain;
    let mut plan = TrainPlan::pretrain(cfg.pretrain_method, cfg.mask_ratio, p.tau, p.epochs, p.lr, p.batch_size, seed);
    for s in &mut plan.stages {
        s.max_steps = p.max_steps;
    }
    plan
}

pub fn align_plan(cfg: &RunConfig, seed: u64) -> TrainPlan {
    TrainPlan::alignment(cfg.plan, cfg.align.stage2_epochs, cfg.align.batch_size, seed ^ ALIGN_SEED_SALT)
}

/// Encoder pretraining followed by the alignment plan on the train split.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    let records = load_curated(cfg)?;
    let manifest = load_manifest(cfg)?;
    let train: Vec<&CuratedRecord> = records
        .iter()
        .filter(|r| manifest.assignments.get(&r.id) == Some(&Split::Train))
        .collect();
    if train.is_empty() {
        return Err(BenchError::Validation("the train split is empty".into()));
    }
    let params = init_params(&cfg.encoder(), cfg.seed)?;
    let data = train_samples(cfg, &params, &train)?;
    let dir = cfg.out_dir("pretrain");
    let ckpt = dir.join("ckpt");

    let plan = pretrain_plan(cfg, cfg.seed);
    let (params, mut history, mut audit) = train_audited(&plan, &data, params, Some((&ckpt, 0)))?;
    let pretrain_steps = history.len();
    let plan = align_plan(cfg, cfg.seed);
    let (params, align_history, align_audit) = train_audited(&plan, &data, params, Some((&ckpt, audit.len())))?;
    let align_steps = align_history.len();
    history.extend(align_history.into_iter().map(|mut r| {
        r.step += pretrain_steps;
        r
    }));
    audit.extend(align_audit);

    let path = dir.join("history.csv");
    write_history_csv(&history, files::create(&path)?).map_err(|e| BenchError::format(&path, e))?;
    files::write_json(&dir.join("audit.json"), &audit)?;
    let path = model_path(cfg);
    params.save(&path).map_err(|e| BenchError::format(&path, e))?;
    let tail = |rows: &[HistoryRow]| rows.last().map_or(f64::NAN, |r| r.loss);
    Ok(PretrainSummary {
        n_train: data.len(),
        pretrain_steps,
        align_steps,
        first_loss: history.first().map_or(f64::NAN, |r| r.loss),
        final_pretrain_loss: tail(&history[..pretrain_steps]),
        final_align_loss: tail(&history[pretrain_steps..]),
        audit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutcome {
    pub config: EncoderConfig,
    pub point_seed: u64,
    pub eps: f64,
    pub mae: f64,
    pub flip: f64,
    pub align: f64,
    pub max: f64,
    pub coordinates: usize,
    pub threshold: f64,
    pub pass: bool,
}

/// Finite-difference check on the micro encoder with the run's compression
/// and connector depth. A failed check is reported and then returned as a
/// validation error.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckOutcome> {
    let g = &cfg.gradcheck;
    let model = EncoderConfig {
        compression: cfg.compression,
        connector_depth: cfg.connector_depth,
        ..EncoderConfig::micro()
    };
    let r = grad_check(&model, g.point_seed, g.eps)?;
    let out = GradcheckOutcome {
        config: model,
        point_seed: g.point_seed,
        eps: g.eps,
        mae: r.mae,
        flip: r.flip,
        align: r.align,
        max: r.max(),
        coordinates: r.coordinates,
        threshold: g.threshold,
        pass: r.max() < g.threshold,
    };
    files::write_json(&cfg.out_dir("gradcheck").join("report.json"), &out)?;
    if !out.pass {
        return Err(BenchError::Validation(format!(
            "gradient check failed: max relative error {:.3e} >= {:.1e}",
            out.max, out.threshold
        )));
    }
    Ok(out)
}

/// Index of the pool entry whose text embedding has the highest cosine with
/// `prediction`, skipping `exclude`. Ties go to the earliest entry.
pub fn nearest(prediction: &[f64], pool: &[(&str, Vec<f64>)], exclude: &str) -> Option<usize> {
    let norm = prediction.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut best: Option<(usize, f64)> = None;
    for (i, (id, emb)) in pool.iter().enumerate() {
        if *id == exclude {
            continue;
        }
        let s = prediction.iter().zip(emb).map(|(a, b)| a * b).sum::<f64>() / norm;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Retrieval "generation": each query's report is the train report whose
/// text embedding lies closest to the model's predicted embedding.
pub fn retrieve_reports(
    params: &ParameterSet,
    queries: &[(String, String, Mat)],
    pool: &[(String, String)],
    embedder: &HashingEmbedder,
) -> Result<Vec<(String, String)>> {
    let embedded: Vec<(&str, Vec<f64>)> = pool.iter().map(|(id, text)| (id.as_str(), embedder.embed(text))).collect();
    let target = vec![0.0; params.config().d_joint];
    queries
        .par_iter()
        .map(|(id, _, tokens)| {
            let pred = align_loss(params, tokens, &target)?.prediction;
            let i = nearest(&pred, &embedded, id)
                .ok_or_else(|| BenchError::Validation(format!("no train report to retrieve for {id}")))?;
            Ok((id.clone(), pool[i].1.clone()))
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig) -> Result<Vec<TableRow>> {
    let records = load_curated(cfg)?;
    let manifest = load_manifest(cfg)?;
    let path = model_path(cfg);
    files::require(&path)?;
    let params = ParameterSet::load(&path).map_err(|e| BenchError::format(&path, e))?;
    let split_of = |r: &CuratedRecord| manifest.assignments.get(&r.id).copied();
    let pool: Vec<(String, String)> = records
        .iter()
        .filter(|r| split_of(r) == Some(Split::Train))
        .map(|r| (r.id.clone(), r.report.clone()))
        .collect();
    let chosen: Vec<&CuratedRecord> = records
        .iter()
        .filter(|r| split_of(r).is_some_and(|s| cfg.evaluate.splits.contains(&s)))
        .collect();
    let queries = chosen
        .par_iter()
        .map(|r| {
            let path = preprocessed_path(cfg, &r.id)?;
            files::require(&path)?;
            let tokens = encoder_tokens(&params, &files::load_volume(&path)?)?;
            Ok((r.id.clone(), r.report.clone(), tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    let embedder = HashingEmbedder::new(params.config().d_joint, cfg.seed);
    let generated: BTreeMap<String, String> = retrieve_reports(&params, &queries, &pool, &embedder)?.into_iter().collect();
    let pairs: Vec<EvalPair> = chosen
        .iter()
        .map(|r| EvalPair {
            id: r.id.clone(),
            candidate: generated[&r.id].clone(),
            references: vec![r.report.clone()],
            dataset: Some(r.source.as_str().to_string()),
        })
        .collect();
    let mut report = score_pairs(&cfg.evaluate.model_name, &pairs)?;
    if let Some(clinical) = &cfg.paths.clinical {
        let f = std::fs::File::open(clinical).map_err(|e| BenchError::io(clinical, e))?;
        report = merge_clinical(report, f).map_err(|e| BenchError::format(clinical, e))?;
    }
    write_outputs(&cfg.out_dir("evaluate"), &pairs, &report)?;
    Ok(report.table())
}

fn write_outputs(dir: &Path, pairs: &[EvalPair], report: &MetricReport) -> Result<()> {
    let path = dir.join("pairs.jsonl");
    argus_core::metrics::write_eval_pairs(pairs, files::create(&path)?).map_err(|e| BenchError::format(&path, e))?;
    let path = dir.join("scores.jsonl");
    report.write_jsonl(files::create(&path)?).map_err(|e| BenchError::format(&path, e))?;
    let path = dir.join("table.csv");
    report.write_table_csv(files::create(&path)?).map_err(|e| BenchError::format(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_skips_self_and_prefers_first_tie() {
        let pool = vec![("a", vec![1.0, 0.0]), ("b", vec![1.0, 0.0]), ("c", vec![0.0, 1.0])];
        assert_eq!(nearest(&[2.0, 0.1], &pool, "z"), Some(0));
        assert_eq!(nearest(&[2.0, 0.1], &pool, "a"), Some(1));
        assert_eq!(nearest(&[0.0, 1.0], &pool, "c"), Some(0));
        assert_eq!(nearest(&[1.0, 0.0], &pool[..1], "a"), None);
    }
}
