use argus_core::geometry::{
    avg_pool_3d, patchify, pixel_shuffle_3d, pixel_unshuffle_3d, pos_embed_3d, read_tkg,
    sample_mask, unpatchify, write_tkg, MaskSet, TokenGrid,
};
use argus_core::volume::Volume;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn finite_bits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| f32::from_bits(rng.random::<u32>()))
        .map(|x| if x.is_finite() { x } else { 0.5 })
        .collect()
}

fn even_grid() -> impl Strategy<Value = ([usize; 3], usize, u64)> {
    ([1usize..4, 1usize..4, 1usize..4], 1usize..6, any::<u64>())
        .prop_map(|(h, d, seed)| (h.map(|x| 2 * x), d, seed))
}

fn bits(xs: &[f32]) -> Vec<u32> {
    xs.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn shuffle_is_the_documented_permutation((dims, d, seed) in even_grid()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product::<usize>() * d;
        let g = TokenGrid::new(dims, d, finite_bits(&mut rng, n)).unwrap();
        let s = pixel_shuffle_3d(&g).unwrap();
        prop_assert_eq!(s.grid_dims(), dims.map(|x| x / 2));
        prop_assert_eq!(s.token_dim(), 8 * d);
        for i in 0..s.n_tokens() {
            let [x, y, z] = s.coords(i);
            for o in 0..8 {
                let (dx, dy, dz) = (o & 1, (o >> 1) & 1, o >> 2);
                let src = g.token(g.token_index(2 * x + dx, 2 * y + dy, 2 * z + dz));
                prop_assert_eq!(bits(&s.token(i)[o * d..(o + 1) * d]), bits(src));
            }
        }
        let mut a = bits(g.data());
        let mut b = bits(s.data());
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        prop_assert_eq!(bits(pixel_unshuffle_3d(&s).unwrap().data()), bits(g.data()));
    }

    #[test]
    fn patchify_round_trip_is_bitwise(
        grid in [1usize..4, 1usize..4, 1usize..4],
        patch in [1usize..4, 1usize..4, 1usize..4],
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [0, 1, 2].map(|k| grid[k] * patch[k]);
        let v = Volume::new(dims, [0.5, 1.0, 2.0], finite_bits(&mut rng, dims.iter().product())).unwrap();
        let g = patchify(&v, patch).unwrap();
        prop_assert_eq!(g.grid_dims(), grid);
        let back = unpatchify(&g, patch, v.spacing()).unwrap();
        prop_assert_eq!(bits(back.voxels()), bits(v.voxels()));
    }

    #[test]
    fn avg_pool_keeps_channel_means((dims, d, seed) in even_grid()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product::<usize>() * d;
        let g = TokenGrid::new(dims, d, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let p = avg_pool_3d(&g).unwrap();
        prop_assert_eq!(p.token_dim(), d);
        let mean = |g: &TokenGrid<f32>, c: usize| {
            (0..g.n_tokens()).map(|i| g.token(i)[c] as f64).sum::<f64>() / g.n_tokens() as f64
        };
        for c in 0..d {
            prop_assert!((mean(&g, c) - mean(&p, c)).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_has_rounded_size_and_valid_indices(n in 0usize..3000, ratio in 0.0..=1.0f64, seed in any::<u64>()) {
        let m = sample_mask(n, ratio, seed).unwrap();
        prop_assert_eq!(m.masked_indices.len(), (ratio * n as f64).round() as usize);
        prop_assert!(m.masked_indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.masked_indices.iter().all(|&i| i < n));
        prop_assert_eq!(&m, &sample_mask(n, ratio, seed).unwrap());
        let json = serde_json::to_string(&m).unwrap();
        prop_assert_eq!(serde_json::from_str::<MaskSet>(&json).unwrap(), m);
    }

    #[test]
    fn pos_embed_rows_are_distinct_and_separable(
        dims in [1usize..6, 1usize..6, 1usize..6],
        k in 1usize..5,
    ) {
        let d = 6 * k;
        let t = pos_embed_3d(dims, d).unwrap();
        let rows: Vec<&[f64]> = t.chunks(d).collect();
        prop_assert_eq!(rows.len(), dims.iter().product::<usize>());
        for i in 0..rows.len() {
            for j in 0..i {
                prop_assert!(rows[i] != rows[j]);
            }
        }
        // Each axis block depends only on its own coordinate.
        let g = TokenGrid::new(dims, 1, vec![0f32; rows.len()]).unwrap();
        for i in 0..rows.len() {
            let c = g.coords(i);
            for axis in 0..3 {
                let mut o = c;
                o[axis] = 0;
                let j = g.token_index(o[0], o[1], o[2]);
                for other in (0..3).filter(|&a| a != axis) {
                    let blk = other * d / 3..(other + 1) * d / 3;
                    prop_assert_eq!(&rows[i][blk.clone()], &rows[j][blk]);
                }
            }
        }
    }
}

#[test]
fn pos_embed_injective_along_a_long_axis() {
    // Rows along one axis at the maximum supported extent.
    let t = pos_embed_3d([10000, 1, 1], 6).unwrap();
    let mut rows: Vec<Vec<u64>> = t.chunks(6).map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
    rows.sort();
    rows.dedup();
    assert_eq!(rows.len(), 10000);
}

#[test]
fn mask_indices_are_uniform() {
    let mut counts = [0usize; 10];
    for seed in 0..1000 {
        for i in sample_mask(10, 0.3, seed).unwrap().masked_indices {
            counts[i] += 1;
        }
    }
    let sigma = (1000.0f64 * 0.3 * 0.7).sqrt();
    for c in counts {
        assert!((c as f64 - 300.0).abs() < 5.0 * sigma, "{counts:?}");
    }
    assert_ne!(sample_mask(10, 0.3, 1).unwrap(), sample_mask(10, 0.3, 2).unwrap());
}

#[test]
fn tkg_round_trip_from_patchified_volume() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = Volume::new([8, 8, 4], [1.0; 3], finite_bits(&mut rng, 256)).unwrap();
    let g = patchify(&v, [4, 4, 2]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.tkg");
    write_tkg(&g, &path).unwrap();
    let back = read_tkg(&path).unwrap();
    assert_eq!(back.grid_dims(), g.grid_dims());
    assert_eq!(bits(back.data()), bits(g.data()));
}
