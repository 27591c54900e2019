//! Report curation and dataset splitting.
//!
//! Raw records from the three public sources are assembled into one report
//! each, sentence-filtered with three deterministic rules, length-filtered,
//! deduplicated, and then split per source into train/val/test.

mod rules;
mod split;

pub use rules::{filter_sentences, first_matching_rule, Rule};
pub use split::{round_fraction, split_dataset, DatasetManifest, SourceCounts, Split};

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;
use thiserror::Error;

/// Reports shorter than this many whitespace tokens are dropped.
pub const MIN_REPORT_TOKENS: usize = 10;

pub const BASE_INSTRUCTION: &str = "Please generate a detailed description for the given 3D CT scan, including both normal and abnormal patterns.";

#[derive(Debug, Error, PartialEq)]
pub enum CurationError {
    #[error("empty record {0}: no findings, impression or report text")]
    EmptyRecord(String),
    #[error("duplicate record ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("instruction pool is empty")]
    EmptyPool,
    #[error("unknown source {0:?}; expected one of: BIMCV-R, CT-RATE, INSPECT")]
    UnknownSource(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "BIMCV-R")]
    BimcvR,
    #[serde(rename = "CT-RATE")]
    CtRate,
    #[serde(rename = "INSPECT")]
    Inspect,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::BimcvR, Source::CtRate, Source::Inspect];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::BimcvR => "BIMCV-R",
            Source::CtRate => "CT-RATE",
            Source::Inspect => "INSPECT",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = CurationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Source::ALL
            .into_iter()
            .find(|src| src.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| CurationError::UnknownSource(s.to_string()))
    }
}

/// One line of the input corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub findings: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impression: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
    #[serde(default)]
    pub official_test: bool,
    /// Path of the paired volume, relative to the corpus file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedSentence {
    pub sentence: String,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedRecord {
    pub id: String,
    pub source: Source,
    pub report: String,
    pub token_count: usize,
    pub removed_sentences: Vec<RemovedSentence>,
    #[serde(default)]
    pub official_test: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<String>,
}

/// One line of `curation_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalLogEntry {
    pub id: String,
    pub sentence: String,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurationOutcome {
    pub records: Vec<CuratedRecord>,
    pub dropped: Vec<DroppedRecord>,
    /// Sentences removed from records that were later dropped for length.
    pub dropped_removals: Vec<RemovalLogEntry>,
}

impl CurationOutcome {
    pub fn removal_log(&self) -> Vec<RemovalLogEntry> {
        self.records
            .iter()
            .flat_map(|r| {
                r.removed_sentences.iter().map(|s| RemovalLogEntry {
                    id: r.id.clone(),
                    sentence: s.sentence.clone(),
                    rule: s.rule,
                })
            })
            .chain(self.dropped_removals.iter().cloned())
            .collect()
    }
}

pub fn assemble_report(r: &RawRecord) -> Result<String, CurationError> {
    fn nonempty(s: &Option<String>) -> Option<&str> {
        s.as_deref().map(str::trim).filter(|t| !t.is_empty())
    }
    let text = match r.source {
        Source::CtRate => {
            let parts: Vec<&str> = [nonempty(&r.findings), nonempty(&r.impression)]
                .into_iter()
                .flatten()
                .collect();
            if parts.is_empty() {
                // Tolerate CT-RATE rows that already carry a merged report.
                nonempty(&r.report).map(str::to_string)
            } else {
                Some(parts.join(" "))
            }
        }
        _ => r.report.clone().filter(|t| !t.trim().is_empty()),
    };
    text.ok_or_else(|| CurationError::EmptyRecord(r.id.clone()))
}

/// Splits on `.`, `;`, `!` or `?` when followed by whitespace or the end of
/// the text. Decimal points never split since a digit follows them.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | ';' | '!' | '?') {
            let boundary = match chars.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if boundary {
                let end = i + c.len_utf8();
                push_trimmed(&mut out, &text[start..end]);
                start = end;
            }
        }
    }
    push_trimmed(&mut out, &text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, s: &str) {
    let t = s.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
}

pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

static CTRATE_RECONSTRUCTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(.+_[A-Za-z]+)_(\d+)$").unwrap());

/// CT-RATE volume ids look like `train_12_a_2`, where the trailing number
/// enumerates reconstructions of the same scan. Other ids map to themselves.
pub fn sample_id(source: Source, id: &str) -> &str {
    if source == Source::CtRate {
        if let Some(c) = CTRATE_RECONSTRUCTION.captures(id) {
            return c.get(1).unwrap().as_str();
        }
    }
    id
}

pub fn curate(records: &[RawRecord]) -> Result<CurationOutcome, CurationError> {
    let mut seen = BTreeSet::new();
    let dups: BTreeSet<String> = records
        .iter()
        .filter(|r| !seen.insert(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    if !dups.is_empty() {
        return Err(CurationError::DuplicateIds(dups.into_iter().collect()));
    }

    // Keep the first reconstruction (by id) of each CT-RATE scan.
    let mut order: Vec<&RawRecord> = records.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut kept_samples: BTreeMap<(Source, &str), &str> = BTreeMap::new();
    let mut outcome = CurationOutcome::default();
    for r in order {
        let key = (r.source, sample_id(r.source, &r.id));
        if let Some(first) = kept_samples.get(&key) {
            outcome.dropped.push(DroppedRecord {
                id: r.id.clone(),
                reason: format!("duplicate-reconstruction of {first}"),
            });
            continue;
        }
        kept_samples.insert(key, &r.id);
        let text = assemble_report(r)?;
        let curated = if r.official_test {
            CuratedRecord {
                id: r.id.clone(),
                source: r.source,
                token_count: count_tokens(&text),
                report: text,
                removed_sentences: Vec::new(),
                official_test: true,
                volume: r.volume.clone(),
            }
        } else {
            let (kept, removed) = filter_sentences(&split_sentences(&text));
            let report = kept.join(" ");
            CuratedRecord {
                id: r.id.clone(),
                source: r.source,
                token_count: count_tokens(&report),
                report,
                removed_sentences: removed,
                official_test: false,
                volume: r.volume.clone(),
            }
        };
        if !curated.official_test && curated.token_count < MIN_REPORT_TOKENS {
            outcome.dropped_removals.extend(curated.removed_sentences.iter().map(|s| {
                RemovalLogEntry {
                    id: curated.id.clone(),
                    sentence: s.sentence.clone(),
                    rule: s.rule,
                }
            }));
            outcome.dropped.push(DroppedRecord {
                id: curated.id,
                reason: "min-length".into(),
            });
            continue;
        }
        outcome.records.push(curated);
    }
    Ok(outcome)
}

/// Picks `pool[index mod |pool|]`.
pub fn build_instruction(pool: &[String], index: usize) -> Result<&str, CurationError> {
    if pool.is_empty() {
        return Err(CurationError::EmptyPool);
    }
    Ok(&pool[index % pool.len()])
}

pub fn default_instruction_pool() -> Vec<String> {
    vec![BASE_INSTRUCTION.to_string()]
}

/// Reads an instruction pool file: one instruction per non-blank line.
pub fn parse_instruction_pool(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

impl CuratedRecord {
    /// Re-wraps a curated record as raw input, e.g. to re-run curation.
    pub fn to_raw(&self) -> RawRecord {
        RawRecord {
            id: self.id.clone(),
            source: self.source,
            findings: None,
            impression: None,
            report: Some(self.report.clone()),
            official_test: self.official_test,
            volume: self.volume.clone(),
        }
    }
}
