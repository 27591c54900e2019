use super::{CuratedRecord, Source};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SourceCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn bump(&mut self, s: Split) {
        match s {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
    }
}

/// Split assignment for every curated record, reproducible from
/// `(records, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub assignments: BTreeMap<String, Split>,
    pub counts: BTreeMap<Source, SourceCounts>,
}

impl DatasetManifest {
    pub fn ids_in(&self, split: Split) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// `round(percent / 100 * n)`, half away from zero, in exact integer arithmetic.
pub fn round_fraction(n: usize, percent: usize) -> usize {
    (n * percent + 50) / 100
}

fn source_rng(seed: u64, source: Source) -> ChaCha8Rng {
    let salt = match source {
        Source::BimcvR => 1u64,
        Source::CtRate => 2,
        Source::Inspect => 3,
    };
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn fisher_yates<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Official-test records go to test. The rest of each source is shuffled
/// (records sorted by id first) and cut into 10% val, 20% test and the
/// remainder train. CT-RATE keeps its official test set and draws only a 10%
/// validation set from the remainder.
pub fn split_dataset(records: &[CuratedRecord], seed: u64) -> DatasetManifest {
    let mut assignments = BTreeMap::new();
    let mut counts: BTreeMap<Source, SourceCounts> = BTreeMap::new();
    for source in Source::ALL {
        let mut pool: Vec<&str> = Vec::new();
        for r in records.iter().filter(|r| r.source == source) {
            if r.official_test {
                assignments.insert(r.id.clone(), Split::Test);
                counts.entry(source).or_default().bump(Split::Test);
            } else {
                pool.push(&r.id);
            }
        }
        if pool.is_empty() {
            continue;
        }
        pool.sort_unstable();
        fisher_yates(&mut pool, &mut source_rng(seed, source));
        let n = pool.len();
        let n_val = round_fraction(n, 10);
        let n_test = if source == Source::CtRate {
            0
        } else {
            round_fraction(n, 20)
        };
        for (i, id) in pool.into_iter().enumerate() {
            let split = if i < n_val {
                Split::Val
            } else if i < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            };
            assignments.insert(id.to_string(), split);
            counts.entry(source).or_default().bump(split);
        }
    }
    DatasetManifest {
        seed,
        assignments,
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(source: Source, n: usize, official: usize) -> Vec<CuratedRecord> {
        (0..n)
            .map(|i| CuratedRecord {
                id: format!("{source}-{i:06}"),
                source,
                report: String::new(),
                token_count: 10,
                removed_sentences: vec![],
                official_test: i < official,
                volume: None,
            })
            .collect()
    }

    #[test]
    fn ten_records() {
        let m = split_dataset(&recs(Source::Inspect, 10, 0), 1);
        assert_eq!(
            m.counts[&Source::Inspect],
            SourceCounts {
                train: 7,
                val: 1,
                test: 2
            }
        );
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_fraction(5, 10), 1);
        assert_eq!(round_fraction(24127, 10), 2413);
        assert_eq!(round_fraction(5322, 20), 1064);
        assert_eq!(round_fraction(4, 10), 0);
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let r = recs(Source::BimcvR, 50, 0);
        let a = split_dataset(&r, 7);
        assert_eq!(a, split_dataset(&r, 7));
        assert_ne!(a.assignments, split_dataset(&r, 8).assignments);
        // Input order does not matter.
        let mut rev = r.clone();
        rev.reverse();
        assert_eq!(a, split_dataset(&rev, 7));
    }

    #[test]
    fn ctrate_official_tests_held_out() {
        let r = recs(Source::CtRate, 30, 5);
        let m = split_dataset(&r, 3);
        let c = m.counts[&Source::CtRate];
        assert_eq!((c.train, c.val, c.test), (22, 3, 5));
        for rec in r.iter().filter(|r| r.official_test) {
            assert_eq!(m.assignments[&rec.id], Split::Test);
        }
    }
}
