//! Brute-force metric references shared by the metric tests and the
//! acceptance suite. Everything is explicit enumeration over slices and
//! vectors; no hashing, no dynamic programming.

use argus_core::metrics::{EvalPair, NlpScores};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Toks = Vec<String>;

pub fn toks(s: &str) -> Toks {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn all_grams(t: &[String], n: usize) -> Vec<Toks> {
    if n == 0 || t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

pub fn count(list: &[Toks], g: &Toks) -> usize {
    list.iter().filter(|x| *x == g).count()
}

pub fn distinct(list: &[Toks]) -> Vec<Toks> {
    let mut out: Vec<Toks> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn oracle_bleu(c: &[String], refs: &[Toks], n: usize) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0;
    for k in 1..=n {
        let cg = all_grams(c, k);
        if cg.is_empty() {
            return 0.0;
        }
        let mut clipped = 0;
        for g in distinct(&cg) {
            let max_ref = refs.iter().map(|r| count(&all_grams(r, k), &g)).max().unwrap();
            clipped += count(&cg, &g).min(max_ref);
        }
        prod *= clipped as f64 / cg.len() as f64;
    }
    if prod == 0.0 {
        return 0.0;
    }
    let mut best = refs[0].len();
    for r in refs {
        let (d, bd) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    let bp = if c.len() > best {
        1.0
    } else {
        (1.0 - best as f64 / c.len() as f64).exp()
    };
    bp * prod.powf(1.0 / n as f64)
}

pub fn f1(o: f64, nc: f64, nr: f64) -> f64 {
    if o == 0.0 {
        return 0.0;
    }
    let (p, r) = (o / nc, o / nr);
    2.0 * p * r / (p + r)
}

pub fn oracle_rouge_n(c: &[String], r: &[String], n: usize) -> f64 {
    let (cg, rg) = (all_grams(c, n), all_grams(r, n));
    let o: usize = distinct(&cg).iter().map(|g| count(&cg, g).min(count(&rg, g))).sum();
    f1(o as f64, cg.len() as f64, rg.len() as f64)
}

pub fn is_subsequence(s: &[&String], r: &[String]) -> bool {
    let mut it = r.iter();
    s.iter().all(|x| it.any(|y| y == *x))
}

/// Longest common subsequence by trying every subsequence of `c`.
pub fn oracle_lcs(c: &[String], r: &[String]) -> usize {
    (0u32..1 << c.len())
        .filter_map(|mask| {
            let sub: Vec<&String> = (0..c.len()).filter(|i| mask >> i & 1 == 1).map(|i| &c[i]).collect();
            is_subsequence(&sub, r).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

pub fn chunks_of(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        if k == 0 || pairs[k - 1] != (i - 1, j.wrapping_sub(1)) {
            chunks += 1;
        }
    }
    chunks
}

/// Every injective exact-match alignment; best = max matches, then min chunks.
pub fn oracle_alignment(c: &[String], r: &[String]) -> (usize, usize) {
    fn go(c: &[String], r: &[String], i: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == c.len() {
            let m = cur.len();
            let ch = chunks_of(cur);
            if m > best.0 || (m == best.0 && ch < best.1) {
                *best = (m, ch);
            }
            return;
        }
        go(c, r, i + 1, used, cur, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                cur.push((i, j));
                go(c, r, i + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    go(c, r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    best
}

pub fn oracle_meteor(c: &[String], r: &[String]) -> f64 {
    let (m, ch) = oracle_alignment(c, r);
    if m == 0 {
        return 0.0;
    }
    let m = m as f64;
    let (p, rc) = (m / c.len() as f64, m / r.len() as f64);
    10.0 * p * rc / (rc + 9.0 * p) * (1.0 - 0.5 * (ch as f64 / m).powi(3))
}

/// Dense TF-IDF vectors over every gram in the corpus.
pub fn oracle_cider(corpus: &[(Toks, Vec<Toks>)]) -> Vec<f64> {
    let n_docs = corpus.len() as f64;
    let mut out = vec![0.0; corpus.len()];
    for n in 1..=4 {
        let mut vocab: Vec<Toks> = Vec::new();
        for (c, refs) in corpus {
            for t in refs.iter().chain(std::iter::once(c)) {
                vocab.extend(all_grams(t, n));
            }
        }
        let vocab = distinct(&vocab);
        let idf: Vec<f64> = vocab
            .iter()
            .map(|g| {
                let df = corpus
                    .iter()
                    .filter(|(_, refs)| refs.iter().any(|r| count(&all_grams(r, n), g) > 0))
                    .count();
                (n_docs / df.max(1) as f64).ln()
            })
            .collect();
        let vec_of = |t: &[String]| -> Vec<f64> {
            let gs = all_grams(t, n);
            vocab
                .iter()
                .zip(&idf)
                .map(|(g, w)| if gs.is_empty() { 0.0 } else { count(&gs, g) as f64 / gs.len() as f64 * w })
                .collect()
        };
        for (k, (c, refs)) in corpus.iter().enumerate() {
            let cv = vec_of(c);
            let mut rv = vec![0.0; vocab.len()];
            for r in refs {
                for (a, b) in rv.iter_mut().zip(vec_of(r)) {
                    *a += b / refs.len() as f64;
                }
            }
            let dot: f64 = cv.iter().zip(&rv).map(|(a, b)| a * b).sum();
            let nc = cv.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nr = rv.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nc > 0.0 && nr > 0.0 {
                out[k] += 10.0 / 4.0 * (dot / (nc * nr)).max(0.0);
            }
        }
    }
    out
}

pub fn random_text(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Toks {
    const VOCAB: [&str; 5] = ["a", "b", "c", "d", "e"];
    let len = rng.random_range(min..=max);
    (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())].to_string()).collect()
}

pub fn fixture(seed: u64, n: usize) -> Vec<(Toks, Vec<Toks>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c = random_text(&mut rng, 0, 8);
            let nrefs = rng.random_range(1..=3);
            let refs = (0..nrefs).map(|_| random_text(&mut rng, 1, 8)).collect();
            (c, refs)
        })
        .collect()
}

pub fn as_pairs(corpus: &[(Toks, Vec<Toks>)]) -> Vec<EvalPair> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, (c, refs))| EvalPair {
            id: format!("id{i}"),
            candidate: c.join(" "),
            references: refs.iter().map(|r| r.join(" ")).collect(),
            dataset: None,
        })
        .collect()
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}


/// All nine scores for every item, ROUGE and METEOR taking the best reference.
pub fn oracle_scores(corpus: &[(Toks, Vec<Toks>)]) -> Vec<NlpScores> {
    let best = |refs: &[Toks], f: &dyn Fn(&Toks) -> f64| refs.iter().map(f).fold(0.0, f64::max);
    corpus
        .iter()
        .zip(oracle_cider(corpus))
        .map(|((c, refs), cider)| NlpScores {
            bleu1: oracle_bleu(c, refs, 1),
            bleu2: oracle_bleu(c, refs, 2),
            bleu3: oracle_bleu(c, refs, 3),
            bleu4: oracle_bleu(c, refs, 4),
            rouge1: best(refs, &|r| oracle_rouge_n(c, r, 1)),
            rouge2: best(refs, &|r| oracle_rouge_n(c, r, 2)),
            rouge_l: best(refs, &|r| f1(oracle_lcs(c, r) as f64, c.len() as f64, r.len() as f64)),
            meteor: best(refs, &|r| oracle_meteor(c, r)),
            cider,
        })
        .collect()
}
