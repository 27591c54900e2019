//! Report-generation metrics: BLEU-1..4, ROUGE-1/2/L, exact-match METEOR,
//! CIDEr, their percentage average, and a merge point for clinical scores
//! computed elsewhere.

mod cider;
mod meteor;
mod ngram;
mod report;

pub use cider::{cider, cider_with_idf, DocumentFrequency};
pub use meteor::{meteor, meteor_alignment, MeteorAlignment};
pub use ngram::{bleu, lcs_len, ngram_counts, rouge_l, rouge_n};
pub use report::{
    evaluate, merge_clinical, read_eval_pairs, write_eval_pairs, ClinicalScores, MetricReport,
    PairScores, TableRow, MACRO_LABEL,
};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("pair {0:?} has no reference")]
    NoReference(String),
    #[error("CIDEr needs a corpus of at least 2 pairs, got {0}")]
    CorpusTooSmall(usize),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("missing metric {0:?}")]
    MissingMetric(String),
    #[error("malformed input at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One generated report and its references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
    /// Evaluation subset the pair belongs to; pairs without one are grouped
    /// under `"all"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

/// Raw scores: every field in `[0, 1]` except `cider` in `[0, 10]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NlpScores {
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

impl NlpScores {
    pub const NAMES: [&'static str; 9] = [
        "bleu1", "bleu2", "bleu3", "bleu4", "rouge1", "rouge2", "rouge_l", "meteor", "cider",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge1,
            self.rouge2,
            self.rouge_l,
            self.meteor,
            self.cider,
        ]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        Self {
            bleu1: v[0],
            bleu2: v[1],
            bleu3: v[2],
            bleu4: v[3],
            rouge1: v[4],
            rouge2: v[5],
            rouge_l: v[6],
            meteor: v[7],
            cider: v[8],
        }
    }

    pub fn from_map(m: &BTreeMap<String, f64>) -> Result<Self, MetricsError> {
        let mut v = [0.0; 9];
        for (slot, name) in v.iter_mut().zip(Self::NAMES) {
            *slot = *m
                .get(name)
                .ok_or_else(|| MetricsError::MissingMetric(name.to_string()))?;
        }
        Ok(Self::from_values(v))
    }

    pub fn mean(rows: &[NlpScores]) -> NlpScores {
        if rows.is_empty() {
            return NlpScores::default();
        }
        let mut acc = [0.0; 9];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let n = rows.len() as f64;
        NlpScores::from_values(acc.map(|a| a / n))
    }
}

/// Mean of the nine metrics on a 0-100 scale; CIDEr is divided by 10 first.
pub fn avg_nlp(s: &NlpScores) -> f64 {
    let v = s.values();
    let pct: f64 = v[..8].iter().map(|x| 100.0 * x).sum::<f64>() + 100.0 * v[8] / 10.0;
    pct / 9.0
}

/// Lowercases, splits on whitespace, and splits off every punctuation
/// character except a `.` between two digits.
pub fn tokenize_eval(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() {
            cur.push(c);
        } else {
            let decimal = c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if decimal {
                cur.push(c);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
