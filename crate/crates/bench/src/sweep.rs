//! Cartesian sweeps over mask ratio, compression, connector depth and data
//! fraction, resumable through a JSON-lines progress file.

use crate::commands::{align_plan, pretrain_plan, retrieve_reports};
use crate::config::{RunConfig, SweepSection};
use crate::files;
use crate::{BenchError, Result};
use argus_core::curation::curate;
use argus_core::metrics::evaluate as score_pairs;
use argus_core::metrics::{avg_nlp, EvalPair};
use argus_core::vit::{
    init_params, tokens_from_volume, train, Compression, HashingEmbedder, Mat, TrainSample,
};
use argus_core::volume::resize;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

const EVAL_SEED_SALT: u64 = 0xE7A1_0000_0000_0001;
const SUBSET_SEED_SALT: u64 = 0x5B5E_7000_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mask_ratio: f64,
    pub compression: Compression,
    pub connector_depth: usize,
    pub data_fraction: f64,
}

impl Cell {
    pub fn key(&self) -> String {
        format!(
            "mask_ratio={}|compression={}|connector_depth={}|data_fraction={}",
            self.mask_ratio, self.compression, self.connector_depth, self.data_fraction
        )
    }
}

/// Cells in axis order with duplicates removed; the second value lists each
/// duplicated key once.
pub fn grid(s: &SweepSection) -> (Vec<Cell>, Vec<String>) {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    let mut cells = Vec::new();
    for &mask_ratio in &s.mask_ratios {
        for &compression in &s.compressions {
            for &connector_depth in &s.connector_depths {
                for &data_fraction in &s.data_fractions {
                    let c = Cell {
                        mask_ratio,
                        compression,
                        connector_depth,
                        data_fraction,
                    };
                    if seen.insert(c.key()) {
                        cells.push(c);
                    } else {
                        dups.insert(c.key());
                    }
                }
            }
        }
    }
    (cells, dups.into_iter().collect())
}

/// The first `round(fraction * n)` entries of a seeded permutation of
/// `0..n`, so a smaller fraction is always a subset of a larger one.
pub fn fraction_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(BenchError::Validation(format!("data fraction {fraction} must lie in (0, 1]")));
    }
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        return Err(BenchError::Validation(format!("data fraction {fraction} of {n} samples selects nothing")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SUBSET_SEED_SALT));
    order.truncate(k);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mask_ratio: f64,
    pub compression: Compression,
    pub connector_depth: usize,
    pub data_fraction: f64,
    pub n_train: usize,
    pub pretrain_loss: f64,
    pub align_loss: f64,
    pub avg_nlp: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Started,
    Complete,
    /// Started in an earlier run that never finished; it runs again.
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEntry {
    pub cell: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<SweepRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
    pub duplicates: Vec<String>,
}

struct Prepared {
    pool: Vec<(String, String, Mat)>,
    eval: Vec<(String, String, String, Mat)>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let s = &cfg.sweep;
    let params = init_params(&cfg.encoder(), cfg.seed)?;
    let dims = params.config().volume_dims();
    let build = |n: usize, seed: u64, prefix: &str| -> Result<Vec<(String, String, String, Mat)>> {
        let spec = crate::synth::SynthSpec {
            n_samples: n,
            seed,
            ..cfg.synth.clone()
        };
        let samples = spec.generate()?;
        let raw: Vec<_> = samples.iter().map(|s| s.record(String::new())).collect();
        let kept: BTreeMap<String, (String, String)> = curate(&raw)?
            .records
            .into_iter()
            .map(|r| (r.id, (r.source.as_str().to_string(), r.report)))
            .collect();
        samples
            .par_iter()
            .filter_map(|s| kept.get(&s.id).map(|k| (s, k)))
            .map(|(s, (source, report))| {
                let tokens = tokens_from_volume(&params, &resize(&s.volume, dims)?)?;
                Ok((format!("{prefix}{}", s.id), source.clone(), report.clone(), tokens))
            })
            .collect()
    };
    let pool = build(s.n_samples, cfg.seed, "")?
        .into_iter()
        .map(|(id, _, report, tokens)| (id, report, tokens))
        .collect();
    let eval = build(s.eval_samples, cfg.seed ^ EVAL_SEED_SALT, "eval_")?;
    if eval.len() < 2 {
        return Err(BenchError::Validation("fewer than 2 evaluation samples survive curation".into()));
    }
    Ok(Prepared { pool, eval })
}

fn run_cell(cfg: &RunConfig, data: &Prepared, cell: &Cell) -> Result<SweepRow> {
    let s = &cfg.sweep;
    let params = init_params(&cfg.encoder_with(cell.compression, cell.connector_depth), cfg.seed)?;
    let subset = fraction_subset(data.pool.len(), cell.data_fraction, cfg.seed)?;
    let embedder = HashingEmbedder::new(params.config().d_joint, cfg.seed);
    let train_set: Vec<TrainSample> = subset
        .iter()
        .map(|&i| TrainSample {
            tokens: data.pool[i].2.clone(),
            text: embedder.embed(&data.pool[i].1),
        })
        .collect();

    let mut run = cfg.clone();
    run.mask_ratio = cell.mask_ratio;
    run.pretrain.epochs = s.pretrain_steps;
    run.pretrain.max_steps = Some(s.pretrain_steps);
    run.align.stage2_epochs = s.align_steps;
    let (params, pre) = train(&pretrain_plan(&run, cfg.seed), &train_set, params)?;
    let mut plan = align_plan(&run, cfg.seed);
    for st in &mut plan.stages {
        st.max_steps = Some(s.align_steps);
    }
    let (params, align) = train(&plan, &train_set, params)?;

    let pool: Vec<(String, String)> = subset.iter().map(|&i| (data.pool[i].0.clone(), data.pool[i].1.clone())).collect();
    let queries: Vec<(String, String, Mat)> =
        data.eval.iter().map(|(id, _, report, t)| (id.clone(), report.clone(), t.clone())).collect();
    let generated = retrieve_reports(&params, &queries, &pool, &embedder)?;
    let pairs: Vec<EvalPair> = data
        .eval
        .iter()
        .zip(generated)
        .map(|((id, source, report, _), (_, cand))| EvalPair {
            id: id.clone(),
            candidate: cand,
            references: vec![report.clone()],
            dataset: Some(source.clone()),
        })
        .collect();
    let m = score_pairs("sweep", &pairs)?.corpus_mean();
    let last = |rows: &[argus_core::vit::HistoryRow]| rows.last().map_or(f64::NAN, |r| r.loss);
    Ok(SweepRow {
        mask_ratio: cell.mask_ratio,
        compression: cell.compression,
        connector_depth: cell.connector_depth,
        data_fraction: cell.data_fraction,
        n_train: subset.len(),
        pretrain_loss: last(&pre),
        align_loss: last(&align),
        avg_nlp: avg_nlp(&m),
        bleu1: m.bleu1,
        bleu2: m.bleu2,
        bleu3: m.bleu3,
        bleu4: m.bleu4,
        rouge1: m.rouge1,
        rouge2: m.rouge2,
        rouge_l: m.rouge_l,
        meteor: m.meteor,
        cider: m.cider,
    })
}

struct ProgressLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl ProgressLog {
    /// Rewrites the progress file keeping only cells of the current grid:
    /// finished cells keep their rows, unfinished ones become `incomplete`.
    fn reopen(path: &Path, cells: &[Cell]) -> Result<(Self, BTreeMap<String, SweepRow>)> {
        let previous: Vec<ProgressEntry> = if path.exists() { files::read_jsonl(path)? } else { Vec::new() };
        let mut last: BTreeMap<String, ProgressEntry> = BTreeMap::new();
        for e in previous {
            if e.status == Status::Complete && e.row.is_none() {
                return Err(BenchError::format(path, format!("complete cell {} has no row", e.cell)));
            }
            last.insert(e.cell.clone(), e);
        }
        let mut kept = Vec::new();
        let mut done = BTreeMap::new();
        for c in cells {
            let key = c.key();
            match last.remove(&key) {
                Some(e) if e.status == Status::Complete => {
                    done.insert(key, e.row.clone().expect("checked above"));
                    kept.push(e);
                }
                Some(_) => kept.push(ProgressEntry {
                    cell: key,
                    status: Status::Incomplete,
                    row: None,
                }),
                None => {}
            }
        }
        for stale in last.keys() {
            log::info!("dropping progress for {stale}, which is not in the grid");
        }
        files::write_jsonl(path, &kept)?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| BenchError::io(path, e))?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file: Mutex::new(file),
            },
            done,
        ))
    }

    fn append(&self, entry: &ProgressEntry) -> Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(|e| BenchError::format(&self.path, e))?;
        line.push(b'\n');
        let mut f = self.file.lock().expect("progress lock");
        f.write_all(&line)
            .and_then(|_| f.flush())
            .map_err(|e| BenchError::io(&self.path, e))
    }
}

/// Runs every cell not already complete in `sweep/progress.jsonl` and writes
/// `sweep/results.csv` with one row per cell in grid order.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    let (cells, duplicates) = grid(&cfg.sweep);
    for d in &duplicates {
        log::warn!("duplicate sweep cell {d} ignored");
    }
    let dir = cfg.out_dir("sweep");
    files::create_dir(&dir)?;
    let (progress, mut done) = ProgressLog::reopen(&dir.join("progress.jsonl"), &cells)?;
    let todo: Vec<&Cell> = cells.iter().filter(|c| !done.contains_key(&c.key())).collect();
    let skipped: Vec<String> = cells.iter().map(Cell::key).filter(|k| done.contains_key(k)).collect();

    if !todo.is_empty() {
        let data = prepare(cfg)?;
        let one = |c: &Cell| -> Result<(String, SweepRow)> {
            let key = c.key();
            progress.append(&ProgressEntry {
                cell: key.clone(),
                status: Status::Started,
                row: None,
            })?;
            let row = run_cell(cfg, &data, c)?;
            progress.append(&ProgressEntry {
                cell: key.clone(),
                status: Status::Complete,
                row: Some(row.clone()),
            })?;
            log::info!("sweep cell {key}: avg_nlp {:.3}", row.avg_nlp);
            Ok((key, row))
        };
        let finished: Vec<(String, SweepRow)> = if cfg.sweep.parallel {
            todo.par_iter().map(|c| one(c)).collect::<Result<_>>()?
        } else {
            todo.iter().map(|c| one(c)).collect::<Result<_>>()?
        };
        done.extend(finished);
    }
    let rows: Vec<SweepRow> = cells.iter().map(|c| done[&c.key()].clone()).collect();
    files::write_csv(&dir.join("results.csv"), &rows)?;
    Ok(SweepOutcome {
        rows,
        ran: todo.iter().map(|c| c.key()).collect(),
        skipped,
        duplicates,
    })
}
