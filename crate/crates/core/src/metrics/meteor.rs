use std::collections::HashMap;

/// Search nodes explored before settling for the best alignment found.
const NODE_BUDGET: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeteorAlignment {
    pub matches: usize,
    pub chunks: usize,
    /// False when the node budget ran out before the search finished.
    pub exact: bool,
}

struct Search {
    cand: Vec<usize>,
    reference: Vec<usize>,
    /// Ref positions per word id.
    positions: Vec<Vec<usize>>,
    /// Candidate occurrences of each word at index >= i, per i.
    remaining: Vec<Vec<usize>>,
    need: Vec<usize>,
    used: Vec<bool>,
    best: usize,
    nodes: usize,
}

impl Search {
    fn dfs(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best || self.nodes > NODE_BUDGET {
            return;
        }
        if i == self.cand.len() {
            // Reached only with every word's quota filled (see skip rule).
            self.best = chunks;
            return;
        }
        let w = self.cand[i];
        if self.need[w] > 0 {
            // Extending the current chunk first finds good bounds early.
            let mut order: Vec<usize> = self.positions[w]
                .iter()
                .copied()
                .filter(|&j| !self.used[j])
                .collect();
            if let Some(p) = prev {
                if let Some(k) = order.iter().position(|&j| j == p + 1) {
                    order.swap(0, k);
                }
            }
            for j in order {
                let extends = prev.is_some_and(|p| p + 1 == j);
                self.used[j] = true;
                self.need[w] -= 1;
                self.dfs(i + 1, Some(j), chunks + usize::from(!extends));
                self.need[w] += 1;
                self.used[j] = false;
            }
        }
        // Leaving token i unmatched is allowed only if later occurrences can
        // still fill the quota.
        if self.remaining[i + 1][w] >= self.need[w] {
            self.dfs(i + 1, None, chunks);
        }
    }
}

/// Exact-match alignment that maximizes matches and, among those, minimizes
/// chunks (maximal runs contiguous and in order on both sides).
pub fn meteor_alignment<S: AsRef<str>>(cand: &[S], reference: &[S]) -> MeteorAlignment {
    fn id<'a>(s: &'a str, words: &mut HashMap<&'a str, usize>) -> usize {
        let n = words.len();
        *words.entry(s).or_insert(n)
    }
    let mut words: HashMap<&str, usize> = HashMap::new();
    let c: Vec<usize> = cand.iter().map(|s| id(s.as_ref(), &mut words)).collect();
    let r: Vec<usize> = reference.iter().map(|s| id(s.as_ref(), &mut words)).collect();
    let nw = words.len();
    let mut cc = vec![0; nw];
    let mut rc = vec![0; nw];
    c.iter().for_each(|&w| cc[w] += 1);
    r.iter().for_each(|&w| rc[w] += 1);
    let need: Vec<usize> = (0..nw).map(|w| cc[w].min(rc[w])).collect();
    let matches: usize = need.iter().sum();
    if matches == 0 {
        return MeteorAlignment {
            matches: 0,
            chunks: 0,
            exact: true,
        };
    }

    // Greedy alignment as the initial upper bound.
    let mut used = vec![false; r.len()];
    let mut left = need.clone();
    let mut prev: Option<usize> = None;
    let mut greedy_chunks = 0;
    for &w in &c {
        if left[w] == 0 {
            prev = None;
            continue;
        }
        let next = prev
            .map(|p| p + 1)
            .filter(|&j| j < r.len() && r[j] == w && !used[j]);
        let j = next.unwrap_or_else(|| (0..r.len()).find(|&j| r[j] == w && !used[j]).unwrap());
        if next.is_none() {
            greedy_chunks += 1;
        }
        used[j] = true;
        left[w] -= 1;
        prev = Some(j);
    }
    if greedy_chunks == 1 {
        return MeteorAlignment {
            matches,
            chunks: 1,
            exact: true,
        };
    }

    let mut positions = vec![Vec::new(); nw];
    for (j, &w) in r.iter().enumerate() {
        positions[w].push(j);
    }
    let mut remaining = vec![vec![0; nw]; c.len() + 1];
    for i in (0..c.len()).rev() {
        remaining[i] = remaining[i + 1].clone();
        remaining[i][c[i]] += 1;
    }
    let mut s = Search {
        cand: c,
        reference: r,
        positions,
        remaining,
        need,
        used: Vec::new(),
        best: greedy_chunks,
        nodes: 0,
    };
    s.used = vec![false; s.reference.len()];
    s.dfs(0, None, 0);
    let exact = s.nodes <= NODE_BUDGET;
    if !exact {
        log::warn!("METEOR alignment search hit its node budget; using best alignment found");
    }
    MeteorAlignment {
        matches,
        chunks: s.best,
        exact,
    }
}

/// METEOR with exact unigram matching only: `Fmean = 10PR / (R + 9P)`,
/// penalty `0.5 (chunks / m)^3`.
pub fn meteor<S: AsRef<str>>(cand: &[S], reference: &[S]) -> f64 {
    let a = meteor_alignment(cand, reference);
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (a.chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}
