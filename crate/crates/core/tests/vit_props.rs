use argus_core::geometry::{patchify, sample_mask};
use argus_core::vit::layers::{attention, layer_norm};
use argus_core::vit::train::write_history_csv;
use argus_core::vit::{
    compress, connector_forward, flip_loss, init_params, mae_loss, mae_loss_masked,
    mae_loss_with_targets, perceiver_resample, tokens_from_volume, train, AdamW, Compression,
    EncoderConfig, HashingEmbedder, Mat, Objective, ParameterSet, Stage, TrainPlan, TrainSample,
};
use argus_core::volume::Volume;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(seed: u64, dims: [usize; 3]) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(dims, [1.0; 3], |_, _, _| rng.random_range(0.0..1.0)).unwrap()
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn micro_samples(n: usize, seed: u64) -> Vec<TrainSample> {
    let cfg = EncoderConfig::micro();
    let p = init_params(&cfg, 0).unwrap();
    let emb = HashingEmbedder::new(cfg.d_joint, 1);
    (0..n)
        .map(|i| TrainSample {
            tokens: tokens_from_volume(&p, &random_volume(seed + i as u64, [8, 8, 8])).unwrap(),
            text: emb.embed(&format!("lesion {} region {}", i % 3, i % 5)),
        })
        .collect()
}

#[test]
fn init_is_deterministic_with_unit_gains_and_centred_weights() {
    let cfg = EncoderConfig::desk();
    let a = init_params(&cfg, 42).unwrap();
    assert_eq!(a, init_params(&cfg, 42).unwrap());
    assert_ne!(a, init_params(&cfg, 43).unwrap());
    for (name, p) in a.iter() {
        if name.ends_with(".g") {
            assert!(p.data.iter().all(|&v| v == 1.0), "{name}");
        }
        if name.ends_with(".b") {
            assert!(p.data.iter().all(|&v| v == 0.0), "{name}");
        }
    }
    let weights: Vec<f64> = a
        .iter()
        .filter(|(n, _)| n.ends_with(".w") && !n.starts_with("lm_head"))
        .flat_map(|(_, p)| p.data.iter().copied())
        .collect();
    assert!(weights.len() >= 10_000);
    assert!(weights.iter().all(|w| w.abs() <= 0.04));
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let sd = (weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}, sd {sd}");
}

#[test]
fn mae_loss_matches_direct_masked_mse() {
    let cfg = EncoderConfig::micro();
    let p = init_params(&cfg, 3).unwrap();
    let v = random_volume(8, [8, 8, 8]);
    let out = mae_loss(&p, &v, 0.5, 17).unwrap();
    let grid = patchify(&v, cfg.patch_dims).unwrap();
    let mask = sample_mask(grid.n_tokens(), 0.5, 17).unwrap();
    assert_eq!(out.mask, mask);
    let mut sse = 0.0;
    let mut count = 0;
    for &i in &mask.masked_indices {
        for (r, t) in out.reconstruction.row(i).iter().zip(grid.token(i)) {
            sse += (r - *t as f64).powi(2);
            count += 1;
        }
    }
    assert!((out.loss - sse / count as f64).abs() < 1e-9);
}

#[test]
fn fitted_head_reconstructs_exactly_and_is_stationary() {
    let cfg = EncoderConfig::micro();
    let (d, td) = (cfg.d_model, cfg.token_dim());
    let mut p = init_params(&cfg, 5).unwrap();
    let tokens = tokens_from_volume(&p, &random_volume(6, [8, 8, 8])).unwrap();
    let mask = sample_mask(tokens.rows, 0.5, 2).unwrap();

    // Read the decoder output through a head of [I | 0].
    let head = p.tensor_mut("mae.head.w");
    head.fill(0.0);
    for i in 0..d {
        head[i * td + i] = 1.0;
    }
    p.tensor_mut("mae.head.b").fill(0.0);
    let probe = mae_loss_masked(&p, &tokens, &mask).unwrap();
    let m = mask.masked_indices.len();
    let x = DMatrix::from_fn(m, d + 1, |r, c| {
        if c < d { probe.reconstruction.row(mask.masked_indices[r])[c] } else { 1.0 }
    });
    let t = DMatrix::from_fn(m, td, |r, c| tokens.row(mask.masked_indices[r])[c]);
    // Minimum-norm solution of X W = T (m < d + 1 rows).
    let gram = (&x * x.transpose()).try_inverse().expect("independent decoder rows");
    let w = x.transpose() * gram * t;
    for i in 0..d {
        for j in 0..td {
            p.tensor_mut("mae.head.w")[i * td + j] = w[(i, j)];
        }
    }
    for j in 0..td {
        p.tensor_mut("mae.head.b")[j] = w[(d, j)];
    }

    let fit = mae_loss_masked(&p, &tokens, &mask).unwrap();
    assert!(fit.loss < 1e-20, "{}", fit.loss);
    let grads = fit.trace.backward(&p).unwrap();
    for name in ["mae.head.w", "mae.head.b"] {
        let worst = grads.get(name).unwrap().iter().fold(0.0f64, |a, g| a.max(g.abs()));
        assert!(worst < 1e-10, "{name}: {worst}");
    }
}

#[test]
fn visible_targets_do_not_affect_the_loss() {
    let cfg = EncoderConfig::micro();
    let p = init_params(&cfg, 1).unwrap();
    let tokens = tokens_from_volume(&p, &random_volume(2, [8, 8, 8])).unwrap();
    let mask = sample_mask(tokens.rows, 0.5, 9).unwrap();
    let base = mae_loss_with_targets(&p, &tokens, &tokens, &mask).unwrap().loss;
    let mut targets = tokens.clone();
    for i in mask.visible() {
        targets.row_mut(i).iter_mut().for_each(|v| *v = 100.0 - *v);
    }
    let moved = mae_loss_with_targets(&p, &tokens, &targets, &mask).unwrap().loss;
    assert_eq!(base.to_bits(), moved.to_bits());
    // Changing a visible input (context) does move the loss.
    let mut inputs = tokens.clone();
    inputs.row_mut(mask.visible()[0])[0] += 1.0;
    assert_ne!(mae_loss_with_targets(&p, &inputs, &tokens, &mask).unwrap().loss, base);
}

#[test]
fn flip_loss_is_ln_b_on_identical_inputs() {
    let cfg = EncoderConfig::micro();
    let p = init_params(&cfg, 4).unwrap();
    let tok = tokens_from_volume(&p, &random_volume(1, [8, 8, 8])).unwrap();
    let text = HashingEmbedder::new(cfg.d_joint, 0).embed("small nodule");
    for b in [2usize, 3, 5] {
        let out = flip_loss(&p, &vec![tok.clone(); b], &vec![text.clone(); b], 0.0, 0.07, 1).unwrap();
        assert!((out.loss - (b as f64).ln()).abs() < 1e-6, "{b}: {}", out.loss);
    }
}

#[test]
fn connector_and_resampler_counts() {
    let mut cfg = EncoderConfig::micro();
    let p = init_params(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_mat(&mut rng, 256, cfg.connector_in(), 1.0);
    let y = connector_forward(&p, &x).unwrap();
    assert_eq!((y.rows, y.cols), (256, cfg.d_llm));

    cfg.compression = Compression::Perceiver;
    let p = init_params(&cfg, 0).unwrap();
    for n in [2048, 4096] {
        let enc = random_mat(&mut rng, n, cfg.d_model, 1.0);
        let r = perceiver_resample(&p, &enc).unwrap();
        assert_eq!((r.rows, r.cols), (64, cfg.d_model));
        assert_eq!(compress(&p, &enc).unwrap().rows, 64);
    }
}

#[test]
fn warmup_schedule_endpoints() {
    let opt = AdamW::default();
    let total = 200;
    let warm = 10;
    assert_eq!(opt.lr_at(1e-4, 0, total), 0.0);
    assert_eq!(opt.lr_at(1e-4, warm, total), 1e-4);
    assert!(opt.lr_at(1e-4, warm - 1, total) < 1e-4);
    assert!(opt.lr_at(1e-4, total - 1, total) > 0.0);
}

fn mae_plan(steps: usize, trainable: &[&str]) -> TrainPlan {
    TrainPlan {
        stages: vec![Stage {
            name: "mae".into(),
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            lr: 1e-3,
            epochs: 100,
            max_steps: Some(steps),
            objective: Objective::Mae { ratio: 0.5 },
        }],
        optimizer: AdamW::default(),
        batch_size: 2,
        seed: 7,
    }
}

#[test]
fn frozen_tensors_stay_bitwise_fixed() {
    let data = micro_samples(4, 100);
    let p0 = init_params(&EncoderConfig::micro(), 2).unwrap();
    let (p1, hist) = train(&mae_plan(6, &["mae.head", "encoder.blocks.1"]), &data, p0.clone()).unwrap();
    assert_eq!(hist.len(), 6);
    let changed = p0.diff(&p1);
    assert!(!changed.is_empty());
    for name in &changed {
        assert!(
            name.starts_with("mae.head.") || name.starts_with("encoder.blocks.1."),
            "{name} changed while frozen"
        );
    }
}

#[test]
fn training_history_is_deterministic() {
    let data = micro_samples(4, 200);
    let run = || {
        let p = init_params(&EncoderConfig::micro(), 3).unwrap();
        let (p, hist) = train(&mae_plan(5, &["encoder", "mae"]), &data, p).unwrap();
        let mut csv = Vec::new();
        write_history_csv(&hist, &mut csv).unwrap();
        (p.to_bytes(), csv)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let text = String::from_utf8(a.1).unwrap();
    assert!(text.starts_with("step,stage,lr,loss\n"));
}

#[test]
fn checkpoint_file_round_trip() {
    let mut p = init_params(&EncoderConfig::desk(), 11).unwrap();
    p.set_trainable(&["connector".into()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.avt");
    p.save(&path).unwrap();
    let q = ParameterSet::load(&path).unwrap();
    assert_eq!(p, q);
    assert_eq!(p.to_bytes(), q.to_bytes());
    assert_eq!(&std::fs::read(&path).unwrap()[..4], b"AVT1");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn layer_norm_standardizes(
        rows in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 6..40), 1..5),
    ) {
        let cols = rows.iter().map(Vec::len).min().unwrap();
        let data: Vec<f64> = rows.iter().flat_map(|r| r[..cols].iter().copied()).collect();
        let x = Mat::from_vec(rows.len(), cols, data);
        let (y, _) = layer_norm(&x, &vec![1.0; cols], &vec![0.0; cols]);
        for r in 0..x.rows {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64;
            // The stabilizing epsilon shrinks the variance of low-spread rows.
            prop_assume!(var >= 1.0);
            let out = y.row(r);
            let om = out.iter().sum::<f64>() / cols as f64;
            let ov = out.iter().map(|v| (v - om).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(om.abs() < 1e-6);
            prop_assert!((ov - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_rows_are_stochastic(
        seed in any::<u64>(), nq in 1usize..10, nk in 1usize..12, heads in 1usize..4, scale in 0.1..20.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * 4;
        let q = random_mat(&mut rng, nq, d, scale);
        let k = random_mat(&mut rng, nk, d, scale);
        let v = random_mat(&mut rng, nk, d, 1.0);
        let (_, cache) = attention(&q, &k, &v, heads);
        prop_assert_eq!(cache.probs.len(), heads);
        for pr in &cache.probs {
            for r in 0..nq {
                prop_assert!((pr.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encoder_attention_rows_are_stochastic(seed in 0u64..1000) {
        let p = init_params(&EncoderConfig::micro(), seed).unwrap();
        let tok = tokens_from_volume(&p, &random_volume(seed, [8, 8, 8])).unwrap();
        let visible: Vec<usize> = (0..tok.rows).collect();
        let (_, trace) = argus_core::vit::encode_traced(&p, &tok, &visible).unwrap();
        for layer in 0..2 {
            for pr in trace.attention_probs(layer) {
                for r in 0..pr.rows {
                    prop_assert!((pr.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn flip_is_nonnegative_and_permutation_invariant(seed in 0u64..500, b in 2usize..5) {
        let cfg = EncoderConfig::micro();
        let p = init_params(&cfg, seed).unwrap();
        let emb = HashingEmbedder::new(cfg.d_joint, seed);
        let toks: Vec<Mat> = (0..b)
            .map(|i| tokens_from_volume(&p, &random_volume(seed * 10 + i as u64, [8, 8, 8])).unwrap())
            .collect();
        let texts: Vec<Vec<f64>> = (0..b).map(|i| emb.embed(&format!("finding {i} apex"))).collect();
        let base = flip_loss(&p, &toks, &texts, 0.0, 0.07, 0).unwrap().loss;
        prop_assert!(base >= 0.0);
        let masked = flip_loss(&p, &toks, &texts, 0.5, 0.07, seed).unwrap().loss;
        prop_assert!(masked >= 0.0);
        let perm: Vec<usize> = (0..b).rev().collect();
        let pt: Vec<Mat> = perm.iter().map(|&i| toks[i].clone()).collect();
        let px: Vec<Vec<f64>> = perm.iter().map(|&i| texts[i].clone()).collect();
        let permuted = flip_loss(&p, &pt, &px, 0.0, 0.07, 0).unwrap().loss;
        prop_assert!((base - permuted).abs() < 1e-12);
    }
}
