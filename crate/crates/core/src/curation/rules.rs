//! Deterministic sentence filters.
//!
//! * `R1`: a bare number within four tokens of a vital-sign or lab keyword.
//! * `R2`: a number immediately followed by a length unit.
//! * `R3`: a reference to a prior study, or a month name followed by a year.

use super::RemovedSentence;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::LazyLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    R1,
    R2,
    R3,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::R1 => "R1",
            Rule::R2 => "R2",
            Rule::R3 => "R3",
        })
    }
}

const VITAL_KEYWORDS: &[&str] = &[
    "fever",
    "sat",
    "o2",
    "saturation",
    "bpm",
    "temperature",
    "pressure",
    "leukocytes",
];
const KEYWORD_WINDOW: usize = 4;

const LENGTH_UNITS: &[&str] = &[
    "mm",
    "cm",
    "mm.",
    "cm.",
    "millimeter",
    "millimeters",
    "centimeter",
    "centimeters",
];

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+(?:[.,]\d+)?$").unwrap());
static NUMBER_WITH_UNIT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\d+(?:[.,]\d+)?(?:mm|cm|millimeters?|centimeters?)\.?$").unwrap()
});
static PRIOR_STUDY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)previous study|prior study|compared to the previous|previous exam|\b(?:january|february|march|april|may|june|july|august|september|october|november|december)\s+\d{4}\b",
    )
    .unwrap()
});

fn strip_edges(tok: &str) -> &str {
    tok.trim_matches(|c: char| !c.is_alphanumeric())
}

fn is_number(tok: &str) -> bool {
    NUMBER.is_match(strip_edges(tok))
}

fn matches_r1(tokens: &[String]) -> bool {
    let numbers: Vec<usize> = (0..tokens.len()).filter(|&i| is_number(&tokens[i])).collect();
    if numbers.is_empty() {
        return false;
    }
    tokens.iter().enumerate().any(|(k, tok)| {
        VITAL_KEYWORDS.contains(&strip_edges(tok))
            && numbers.iter().any(|&n| n != k && n.abs_diff(k) <= KEYWORD_WINDOW)
    })
}

fn matches_r2(tokens: &[String]) -> bool {
    let unit = |t: &str| {
        let t = t.trim_end_matches([',', ';', ':', ')', '.']);
        LENGTH_UNITS.contains(&t)
    };
    tokens.iter().enumerate().any(|(i, tok)| {
        let bare = tok.trim_start_matches(['(', '[']);
        let bare = bare.trim_end_matches([',', ';', ':', ')']);
        NUMBER_WITH_UNIT.is_match(bare)
            || (NUMBER.is_match(bare) && tokens.get(i + 1).is_some_and(|next| unit(next)))
    })
}

/// The first rule (in R1, R2, R3 order) the sentence triggers, if any.
pub fn first_matching_rule(sentence: &str) -> Option<Rule> {
    let tokens: Vec<String> = sentence
        .split_whitespace()
        .map(str::to_lowercase)
        .collect();
    if matches_r1(&tokens) {
        Some(Rule::R1)
    } else if matches_r2(&tokens) {
        Some(Rule::R2)
    } else if PRIOR_STUDY.is_match(sentence) {
        Some(Rule::R3)
    } else {
        None
    }
}

pub fn filter_sentences<S: AsRef<str>>(sentences: &[S]) -> (Vec<String>, Vec<RemovedSentence>) {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for s in sentences {
        let s = s.as_ref();
        match first_matching_rule(s) {
            Some(rule) => removed.push(RemovedSentence {
                sentence: s.to_string(),
                rule,
            }),
            None => kept.push(s.to_string()),
        }
    }
    (kept, removed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appendix_examples() {
        assert_eq!(
            first_matching_rule("SAT O2 without oxygen of 93"),
            Some(Rule::R1)
        );
        assert_eq!(first_matching_rule("Fever up to 38"), Some(Rule::R1));
        assert_eq!(
            first_matching_rule("Increase in trunk caliber of the 39 mm pulmonary artery"),
            Some(Rule::R2)
        );
        assert_eq!(
            first_matching_rule("It is compared to the previous study of March 2019, not mediastinal"),
            Some(Rule::R3)
        );
        assert_eq!(first_matching_rule("Mild cardiomegaly is observed."), None);
    }

    #[test]
    fn r1_window_is_four_tokens() {
        assert_eq!(first_matching_rule("fever a b c 38"), Some(Rule::R1));
        assert_eq!(first_matching_rule("fever a b c d 38"), None);
        // "O2" alone is not a bare number.
        assert_eq!(first_matching_rule("O2 support was given"), None);
    }

    #[test]
    fn r2_unit_forms() {
        assert_eq!(first_matching_rule("A 3.5 cm. mass."), Some(Rule::R2));
        assert_eq!(first_matching_rule("Nodule (12mm) in the apex."), Some(Rule::R2));
        assert_eq!(first_matching_rule("Measures 4 millimeters."), Some(Rule::R2));
        assert_eq!(first_matching_rule("Segment 4 is normal."), None);
    }

    #[test]
    fn r3_month_year() {
        assert_eq!(first_matching_rule("Unchanged since June 2020."), Some(Rule::R3));
        assert_eq!(first_matching_rule("As on the prior study."), Some(Rule::R3));
        assert_eq!(first_matching_rule("May be atelectasis."), None);
    }

    #[test]
    fn filter_partitions_in_order() {
        let (kept, removed) = filter_sentences(&["Fine.", "Fever up to 38.", "Also fine."]);
        assert_eq!(kept, vec!["Fine.", "Also fine."]);
        assert_eq!(removed.len(), 1);
        assert_eq!(removed[0].rule, Rule::R1);
    }
}
