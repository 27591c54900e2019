use super::cider::{cider_with_idf, DocumentFrequency};
use super::meteor::meteor;
use super::ngram::{bleu, rouge_l, rouge_n};
use super::{avg_nlp, tokenize_eval, EvalPair, MetricsError, NlpScores};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Read, Write};

/// Dataset label of the row that averages the per-dataset rows with equal
/// weight (a macro average, not a per-sample mean).
pub const MACRO_LABEL: &str = "macro_avg_over_datasets";
const DEFAULT_DATASET: &str = "all";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalScores {
    pub green: f64,
    pub ratescore: f64,
    pub radgraph: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub id: String,
    pub dataset: String,
    #[serde(flatten)]
    pub scores: NlpScores,
    pub avg_nlp: f64,
    pub clinical: Option<ClinicalScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub model: String,
    pub pairs: Vec<PairScores>,
    /// Ids without clinical scores after the last merge.
    pub missing_clinical: Vec<String>,
    pub variants: BTreeMap<String, String>,
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub model: String,
    pub dataset: String,
    pub n: usize,
    pub avg_nlp: f64,
    #[serde(flatten)]
    pub scores: NlpScores,
    pub green: Option<f64>,
    pub ratescore: Option<f64>,
    pub radgraph: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn score_pair(cand: &[String], refs: &[Vec<String>], df: &DocumentFrequency) -> NlpScores {
    let best = |f: &dyn Fn(&[String]) -> f64| refs.iter().map(|r| f(r)).fold(0.0, f64::max);
    NlpScores {
        bleu1: bleu(cand, refs, 1),
        bleu2: bleu(cand, refs, 2),
        bleu3: bleu(cand, refs, 3),
        bleu4: bleu(cand, refs, 4),
        rouge1: best(&|r| rouge_n(cand, r, 1)),
        rouge2: best(&|r| rouge_n(cand, r, 2)),
        rouge_l: best(&|r| rouge_l(cand, r)),
        meteor: best(&|r| meteor(cand, r)),
        cider: cider_with_idf(cand, refs, df),
    }
}

/// Scores every pair. CIDEr document frequencies come from the whole input
/// corpus. ROUGE and METEOR take the best reference.
pub fn evaluate(model: &str, pairs: &[EvalPair]) -> Result<MetricReport, MetricsError> {
    let mut seen = HashSet::new();
    for p in pairs {
        if p.references.is_empty() {
            return Err(MetricsError::NoReference(p.id.clone()));
        }
        if !seen.insert(p.id.as_str()) {
            return Err(MetricsError::DuplicateId(p.id.clone()));
        }
    }
    if pairs.len() < 2 {
        return Err(MetricsError::CorpusTooSmall(pairs.len()));
    }
    let tokenized: Vec<(Vec<String>, Vec<Vec<String>>)> = pairs
        .iter()
        .map(|p| {
            (
                tokenize_eval(&p.candidate),
                p.references.iter().map(|r| tokenize_eval(r)).collect(),
            )
        })
        .collect();
    let df = DocumentFrequency::from_references(tokenized.iter().map(|(_, r)| r.as_slice()));
    let scores: Vec<NlpScores> = tokenized
        .par_iter()
        .map(|(c, r)| score_pair(c, r, &df))
        .collect();
    let rows = pairs
        .iter()
        .zip(scores)
        .map(|(p, scores)| PairScores {
            id: p.id.clone(),
            dataset: p.dataset.clone().unwrap_or_else(|| DEFAULT_DATASET.to_string()),
            avg_nlp: avg_nlp(&scores),
            scores,
            clinical: None,
        })
        .collect();
    let variants = [
        ("bleu", "sentence-level, no smoothing, closest reference length"),
        ("meteor", "exact-match only"),
        ("cider", "TF-IDF cosine vs mean reference vector, no length penalty, x10"),
        ("avg_nlp", "mean of nine metrics on 0-100, CIDEr divided by 10"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    Ok(MetricReport {
        model: model.to_string(),
        pairs: rows,
        missing_clinical: pairs.iter().map(|p| p.id.clone()).collect(),
        variants,
    })
}

#[derive(Debug, Deserialize)]
struct ClinicalRow {
    id: String,
    green: f64,
    ratescore: f64,
    radgraph: f64,
}

/// Attaches clinical scores from a CSV with header `id,green,ratescore,radgraph`.
/// Ids absent from the file keep no clinical scores and are listed in
/// `missing_clinical`. An empty file changes nothing.
pub fn merge_clinical<R: Read>(mut report: MetricReport, reader: R) -> Result<MetricReport, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut scores: BTreeMap<String, ClinicalScores> = BTreeMap::new();
    let malformed = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line() as usize);
        MetricsError::Malformed {
            line,
            message: e.to_string(),
        }
    };
    let has_header = !rdr.headers().map_err(malformed)?.is_empty();
    if has_header {
        let headers = rdr.headers().map_err(malformed)?.clone();
        for col in ["id", "green", "ratescore", "radgraph"] {
            if !headers.iter().any(|h| h == col) {
                return Err(MetricsError::Malformed {
                    line: 1,
                    message: format!("missing column {col:?}"),
                });
            }
        }
        for row in rdr.deserialize::<ClinicalRow>() {
            let row = row.map_err(malformed)?;
            let s = ClinicalScores {
                green: row.green,
                ratescore: row.ratescore,
                radgraph: row.radgraph,
            };
            if scores.insert(row.id.clone(), s).is_some() {
                return Err(MetricsError::DuplicateId(row.id));
            }
        }
    }
    let known: BTreeSet<&str> = report.pairs.iter().map(|p| p.id.as_str()).collect();
    for id in scores.keys().filter(|id| !known.contains(id.as_str())) {
        log::warn!("clinical score for unknown id {id:?} ignored");
    }
    let mut missing = Vec::new();
    for p in &mut report.pairs {
        p.clinical = scores.get(&p.id).copied();
        if p.clinical.is_none() {
            missing.push(p.id.clone());
        }
    }
    report.missing_clinical = missing;
    Ok(report)
}

impl MetricReport {
    pub fn corpus_mean(&self) -> NlpScores {
        NlpScores::mean(&self.pairs.iter().map(|p| p.scores).collect::<Vec<_>>())
    }

    fn row(&self, dataset: &str, pairs: &[&PairScores]) -> TableRow {
        let scores = NlpScores::mean(&pairs.iter().map(|p| p.scores).collect::<Vec<_>>());
        let clin = |f: fn(&ClinicalScores) -> f64| mean(pairs.iter().filter_map(|p| p.clinical.as_ref().map(f)));
        TableRow {
            model: self.model.clone(),
            dataset: dataset.to_string(),
            n: pairs.len(),
            avg_nlp: avg_nlp(&scores),
            scores,
            green: clin(|c| c.green),
            ratescore: clin(|c| c.ratescore),
            radgraph: clin(|c| c.radgraph),
        }
    }

    /// One row per dataset, sorted by name, then the macro row.
    pub fn table(&self) -> Vec<TableRow> {
        let mut groups: BTreeMap<&str, Vec<&PairScores>> = BTreeMap::new();
        for p in &self.pairs {
            groups.entry(p.dataset.as_str()).or_default().push(p);
        }
        let mut rows: Vec<TableRow> = groups.iter().map(|(d, ps)| self.row(d, ps)).collect();
        let scores = NlpScores::mean(&rows.iter().map(|r| r.scores).collect::<Vec<_>>());
        let opt_mean = |f: fn(&TableRow) -> Option<f64>| mean(rows.iter().filter_map(f));
        let macro_row = TableRow {
            model: self.model.clone(),
            dataset: MACRO_LABEL.to_string(),
            n: self.pairs.len(),
            avg_nlp: avg_nlp(&scores),
            scores,
            green: opt_mean(|r| r.green),
            ratescore: opt_mean(|r| r.ratescore),
            radgraph: opt_mean(|r| r.radgraph),
        };
        rows.push(macro_row);
        rows
    }

    pub fn write_table_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["model", "dataset", "n", "avg_nlp"];
        header.extend(NlpScores::NAMES);
        header.extend(["green", "ratescore", "radgraph"]);
        w.write_record(&header).map_err(|e| MetricsError::Io(e.into()))?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in self.table() {
            let mut rec = vec![r.model, r.dataset, r.n.to_string(), r.avg_nlp.to_string()];
            rec.extend(r.scores.values().iter().map(f64::to_string));
            rec.extend([opt(r.green), opt(r.ratescore), opt(r.radgraph)]);
            w.write_record(&rec).map_err(|e| MetricsError::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), MetricsError> {
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p).map_err(|e| MetricsError::Io(e.into()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn read_eval_pairs<R: BufRead>(reader: R) -> Result<Vec<EvalPair>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: EvalPair = serde_json::from_str(&line).map_err(|e| MetricsError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(pair);
    }
    Ok(out)
}

pub fn write_eval_pairs<W: Write>(pairs: &[EvalPair], mut out: W) -> Result<(), MetricsError> {
    for p in pairs {
        serde_json::to_writer(&mut out, p).map_err(|e| MetricsError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
