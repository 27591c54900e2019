use argus_core::metrics::{
    avg_nlp, bleu, evaluate, meteor, meteor_alignment, rouge_l, rouge_n, EvalPair, NlpScores,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod support;

use support::metric_oracle::*;

#[test]
fn every_metric_matches_brute_force_on_random_pairs() {
    let corpus = fixture(2024, 100);
    let report = evaluate("oracle", &as_pairs(&corpus)).unwrap();
    let oracle = oracle_scores(&corpus);
    for ((c, refs), (row, want)) in corpus.iter().zip(report.pairs.iter().zip(oracle)) {
        let s = &row.scores;
        for ((name, got), w) in NlpScores::NAMES.iter().zip(s.values()).zip(want.values()) {
            assert!(close(got, w), "{}: {name} got {got}, oracle {w} ({c:?} vs {refs:?})", row.id);
        }
        assert!(close(row.avg_nlp, avg_nlp(&want)));
    }
    // The fixture has to exercise nonzero scores, not only the empty cases.
    assert!(report.pairs.iter().filter(|p| p.scores.bleu2 > 0.0).count() > 10);
    assert!(report.pairs.iter().filter(|p| p.scores.cider > 0.0).count() > 50);
}

#[test]
fn meteor_alignment_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..300 {
        let c = random_text(&mut rng, 0, 8);
        let r = random_text(&mut rng, 1, 8);
        let a = meteor_alignment(&c, &r);
        assert_eq!((a.matches, a.chunks), oracle_alignment(&c, &r), "{c:?} vs {r:?}");
        assert!(a.exact);
        assert!(close(meteor(&c, &r), oracle_meteor(&c, &r)));
    }
}

#[test]
fn cider_repeated_candidate_against_dense_vectors() {
    let corpus = vec![
        (toks("a b a b"), vec![toks("a b")]),
        (toks("c d"), vec![toks("c d")]),
        (toks("e"), vec![toks("c e")]),
    ];
    let got = evaluate("m", &as_pairs(&corpus)).unwrap();
    for (row, want) in got.pairs.iter().zip(oracle_cider(&corpus)) {
        assert!(close(row.scores.cider, want));
    }
}

#[test]
fn bleu_is_not_monotone_in_general() {
    // p1 = 2/3 (the second "a" is clipped), p2 = 1: BLEU-2 > BLEU-1.
    let (c, r) = (toks("a b a"), vec![toks("b a b")]);
    assert!(close(bleu(&c, &r, 1), 2.0 / 3.0));
    assert!(close(bleu(&c, &r, 2), (2.0f64 / 3.0).sqrt()));
}

fn clipped_precisions(c: &[String], refs: &[Toks]) -> Vec<f64> {
    (1..=4)
        .map(|k| {
            let cg = all_grams(c, k);
            if cg.is_empty() {
                return 0.0;
            }
            let clipped: usize = distinct(&cg)
                .iter()
                .map(|g| count(&cg, g).min(refs.iter().map(|r| count(&all_grams(r, k), g)).max().unwrap()))
                .sum();
            clipped as f64 / cg.len() as f64
        })
        .collect()
}

fn text_strategy(min: usize, max: usize) -> impl Strategy<Value = Toks> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), min..=max)
        .prop_map(|v| v.into_iter().map(str::to_string).collect())
}

fn cased_word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["Lesion", "nodule", "LEFT", "Apex", "3.5", "mm", "effusion", "No"])
        .prop_map(str::to_string)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bleu_non_increasing_when_precisions_are(c in text_strategy(1, 10), r in text_strategy(1, 10)) {
        let refs = vec![r];
        let p = clipped_precisions(&c, &refs);
        for n in 1..4 {
            if p[..=n].windows(2).all(|w| w[0] >= w[1]) {
                prop_assert!(bleu(&c, &refs, n + 1) <= bleu(&c, &refs, n) + 1e-12);
            }
        }
    }

    #[test]
    fn rouge_symmetric_for_equal_lengths(
        (c, r) in (1usize..10).prop_flat_map(|n| (text_strategy(n, n), text_strategy(n, n)))
    ) {
        for n in 1..=2 {
            prop_assert!(close(rouge_n(&c, &r, n), rouge_n(&r, &c, n)));
        }
        prop_assert!(close(rouge_l(&c, &r), rouge_l(&r, &c)));
    }

    #[test]
    fn identity_scores(t in text_strategy(4, 10)) {
        // A second item with a disjoint vocabulary gives every gram idf ln 2.
        let pairs = as_pairs(&[(t.clone(), vec![t.clone()]), (toks("x y"), vec![toks("z w")])]);
        let s = evaluate("m", &pairs).unwrap().pairs[0].scores;
        for v in [s.bleu1, s.bleu2, s.bleu3, s.bleu4, s.rouge1, s.rouge2, s.rouge_l] {
            prop_assert!(close(v, 1.0));
        }
        // One chunk of m matches keeps a fragmentation penalty of 0.5 / m^3.
        let m = t.len() as f64;
        prop_assert!(close(s.meteor, 1.0 - 0.5 / m.powi(3)));
        prop_assert!(close(s.cider, 10.0));
    }

    #[test]
    fn case_invariant(
        items in prop::collection::vec(
            (prop::collection::vec(cased_word(), 0..8), prop::collection::vec(cased_word(), 1..8)),
            2..6,
        ),
        upper in any::<bool>(),
    ) {
        let pairs: Vec<EvalPair> = items
            .iter()
            .enumerate()
            .map(|(i, (c, r))| EvalPair {
                id: i.to_string(),
                candidate: c.join(" "),
                references: vec![r.join(" ") + "."],
                dataset: None,
            })
            .collect();
        let shifted: Vec<EvalPair> = pairs
            .iter()
            .map(|p| EvalPair {
                candidate: if upper { p.candidate.to_uppercase() } else { p.candidate.to_lowercase() },
                references: p.references.iter().map(|r| r.to_uppercase()).collect(),
                ..p.clone()
            })
            .collect();
        let a = evaluate("m", &pairs).unwrap();
        let b = evaluate("m", &shifted).unwrap();
        prop_assert_eq!(a.pairs, b.pairs);
    }

    #[test]
    fn corpus_means_are_unweighted(seed in any::<u64>(), n in 2usize..20) {
        let report = evaluate("m", &as_pairs(&fixture(seed, n))).unwrap();
        let mean = report.corpus_mean();
        let table = report.table();
        for (k, name) in NlpScores::NAMES.iter().enumerate() {
            let want = report.pairs.iter().map(|p| p.scores.values()[k]).sum::<f64>() / n as f64;
            prop_assert!(close(mean.values()[k], want), "{}", name);
            prop_assert!(close(table[0].scores.values()[k], want));
        }
        for p in &report.pairs {
            for v in &p.scores.values()[..8] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(v));
            }
            prop_assert!((0.0..=10.0 + 1e-9).contains(&p.scores.cider));
            prop_assert!((0.0..=100.0 + 1e-9).contains(&p.avg_nlp));
        }
    }
}
