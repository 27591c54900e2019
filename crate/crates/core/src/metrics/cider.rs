use super::ngram::ngram_counts;
use super::MetricsError;
use std::collections::{BTreeMap, HashMap, HashSet};

const MAX_N: usize = 4;

/// Per-order document frequencies: the number of corpus items whose
/// references contain each n-gram.
#[derive(Debug, Clone, Default)]
pub struct DocumentFrequency {
    pub n_docs: usize,
    df: [HashMap<Vec<String>, usize>; MAX_N],
}

impl DocumentFrequency {
    /// One entry per corpus item, each holding that item's references.
    pub fn from_references<'a, S: AsRef<str> + 'a>(items: impl IntoIterator<Item = &'a [Vec<S>]>) -> Self {
        let mut df: [HashMap<Vec<String>, usize>; MAX_N] = Default::default();
        let mut n_docs = 0;
        for refs in items {
            n_docs += 1;
            for (n, table) in df.iter_mut().enumerate() {
                let grams: HashSet<Vec<&str>> = refs
                    .iter()
                    .flat_map(|r| ngram_counts(r, n + 1).into_keys())
                    .collect();
                for g in grams {
                    *table.entry(g.into_iter().map(str::to_string).collect()).or_insert(0) += 1;
                }
            }
        }
        Self { n_docs, df }
    }

    /// `ln(N / max(df, 1))`.
    pub fn idf(&self, gram: &[&str]) -> f64 {
        let n = gram.len();
        let owned: Vec<String> = gram.iter().map(|s| s.to_string()).collect();
        let df = self.df[n - 1].get(&owned).copied().unwrap_or(0).max(1);
        (self.n_docs as f64 / df as f64).ln()
    }
}

// Ordered maps keep the float sums below reproducible from run to run.
fn tfidf<'a, S: AsRef<str>>(tokens: &'a [S], n: usize, df: &DocumentFrequency) -> BTreeMap<Vec<&'a str>, f64> {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, c)| {
            let w = c as f64 / total as f64 * df.idf(&g);
            (g, w)
        })
        .collect()
}

/// CIDEr of one candidate given its references and corpus statistics:
/// 10 times the mean over n = 1..4 of the cosine between the candidate's
/// TF-IDF vector and the mean reference vector, clipped at 0.
pub fn cider_with_idf<S: AsRef<str>>(cand: &[S], refs: &[Vec<S>], df: &DocumentFrequency) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=MAX_N {
        let c = tfidf(cand, n, df);
        let mut mean: BTreeMap<Vec<&str>, f64> = BTreeMap::new();
        for r in refs {
            for (g, w) in tfidf(r, n, df) {
                *mean.entry(g).or_insert(0.0) += w / refs.len() as f64;
            }
        }
        let dot: f64 = c.iter().map(|(g, w)| w * mean.get(g).copied().unwrap_or(0.0)).sum();
        let nc = c.values().map(|w| w * w).sum::<f64>().sqrt();
        let nr = mean.values().map(|w| w * w).sum::<f64>().sqrt();
        if nc > 0.0 && nr > 0.0 {
            total += (dot / (nc * nr)).max(0.0);
        }
    }
    10.0 * total / MAX_N as f64
}

/// Corpus CIDEr: one score per item, in input order.
pub fn cider<S: AsRef<str>>(items: &[(Vec<S>, Vec<Vec<S>>)]) -> Result<Vec<f64>, MetricsError> {
    if items.len() < 2 {
        return Err(MetricsError::CorpusTooSmall(items.len()));
    }
    let df = DocumentFrequency::from_references(items.iter().map(|(_, r)| r.as_slice()));
    Ok(items.iter().map(|(c, r)| cider_with_idf(c, r, &df)).collect())
}
