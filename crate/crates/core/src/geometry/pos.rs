use super::{GeometryError, Result};

/// Parameter-free 3D sinusoidal position table, `n_tokens x d` row-major.
///
/// `d` is split into three equal blocks for the x, y and z coordinate. Each
/// block interleaves `[sin(w_k c), cos(w_k c)]` for `k = 0..d/6` with
/// `w_k = 10000^(-k / (d/6))`.
pub fn pos_embed_3d(grid_dims: [usize; 3], d: usize) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(6) {
        return Err(GeometryError::EmbedDim(d));
    }
    let block = d / 3;
    let n_freq = d / 6;
    let freqs: Vec<f64> = (0..n_freq)
        .map(|k| 10000f64.powf(-(k as f64) / n_freq as f64))
        .collect();
    let [gx, gy, gz] = grid_dims;
    let mut table = Vec::with_capacity(gx * gy * gz * d);
    for z in 0..gz {
        for y in 0..gy {
            for x in 0..gx {
                for c in [x, y, z] {
                    for &w in &freqs {
                        let a = w * c as f64;
                        table.push(a.sin());
                        table.push(a.cos());
                    }
                }
            }
        }
    }
    debug_assert_eq!(table.len() % block, 0);
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_is_sin0_cos0() {
        let t = pos_embed_3d([3, 2, 2], 12).unwrap();
        let row0 = &t[..12];
        for (i, v) in row0.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn axis_blocks_are_separable() {
        let d = 18;
        let t = pos_embed_3d([2, 2, 3], d).unwrap();
        // tokens (1,1,0) and (1,1,2) differ only in z
        let a = &t[3 * d..4 * d];
        let b = &t[(3 + 8) * d..(4 + 8) * d];
        assert_eq!(&a[..12], &b[..12]);
        assert_ne!(&a[12..], &b[12..]);
    }

    #[test]
    fn requires_multiple_of_six() {
        assert!(matches!(pos_embed_3d([1, 1, 1], 8), Err(GeometryError::EmbedDim(8))));
        assert!(matches!(pos_embed_3d([1, 1, 1], 0), Err(GeometryError::EmbedDim(0))));
    }
}
