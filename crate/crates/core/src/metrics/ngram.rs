use std::collections::HashMap;

pub fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if n == 0 || tokens.len() < n {
        return m;
    }
    for w in tokens.windows(n) {
        *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    m
}

/// Sentence BLEU-`n` with clipped counts over all references, the closest
/// reference length (shorter on ties) for the brevity penalty, and no
/// smoothing.
pub fn bleu<S: AsRef<str>>(cand: &[S], refs: &[Vec<S>], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let c = cand.len();
    if c == 0 || refs.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let cand_counts = ngram_counts(cand, k);
        let total: usize = cand_counts.values().sum();
        if total == 0 {
            return 0.0;
        }
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, k)).collect();
        let clipped: usize = cand_counts
            .iter()
            .map(|(g, &cnt)| {
                let max_ref = ref_counts.iter().map(|m| m.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                cnt.min(max_ref)
            })
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / n as f64).exp()
}

fn f1(overlap: usize, n_cand: usize, n_ref: usize) -> f64 {
    if overlap == 0 || n_cand == 0 || n_ref == 0 {
        return 0.0;
    }
    let p = overlap as f64 / n_cand as f64;
    let r = overlap as f64 / n_ref as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-`n` F1 from clipped n-gram overlap.
pub fn rouge_n<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> f64 {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    f1(overlap, c.values().sum(), r.values().sum())
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l<S: AsRef<str>>(cand: &[S], reference: &[S]) -> f64 {
    f1(lcs_len(cand, reference), cand.len(), reference.len())
}
