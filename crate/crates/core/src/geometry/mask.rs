use super::{GeometryError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A sorted set of masked token indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub n_tokens: usize,
    pub masked_indices: Vec<usize>,
}

impl MaskSet {
    pub fn none(n_tokens: usize) -> Self {
        Self {
            n_tokens,
            masked_indices: Vec::new(),
        }
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked_indices.binary_search(&i).is_ok()
    }

    /// Complement of the mask, ascending.
    pub fn visible(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_tokens - self.masked_indices.len());
        let mut m = self.masked_indices.iter().peekable();
        for i in 0..self.n_tokens {
            if m.peek() == Some(&&i) {
                m.next();
            } else {
                out.push(i);
            }
        }
        out
    }
}

/// Draws `round(ratio * n_tokens)` distinct indices uniformly, seeded.
pub fn sample_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(GeometryError::BadRatio(ratio));
    }
    let k = ((ratio * n_tokens as f64).round() as usize).min(n_tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked_indices = rand::seq::index::sample(&mut rng, n_tokens, k).into_vec();
    masked_indices.sort_unstable();
    Ok(MaskSet {
        n_tokens,
        masked_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_of_2048() {
        let m = sample_mask(2048, 0.5, 11).unwrap();
        assert_eq!(m.masked_indices.len(), 1024);
        assert!(m.masked_indices.windows(2).all(|w| w[0] < w[1]));
        assert!(*m.masked_indices.last().unwrap() < 2048);
        assert_eq!(m.visible().len(), 1024);
    }

    #[test]
    fn extreme_ratios() {
        assert!(sample_mask(10, 0.0, 1).unwrap().masked_indices.is_empty());
        assert_eq!(
            sample_mask(10, 1.0, 1).unwrap().masked_indices,
            (0..10).collect::<Vec<_>>()
        );
        assert!(sample_mask(10, 1.5, 1).is_err());
        assert!(sample_mask(10, f64::NAN, 1).is_err());
    }

    #[test]
    fn seeded() {
        assert_eq!(sample_mask(100, 0.3, 5).unwrap(), sample_mask(100, 0.3, 5).unwrap());
        assert_ne!(sample_mask(100, 0.3, 5).unwrap(), sample_mask(100, 0.3, 6).unwrap());
    }

    #[test]
    fn uniform_inclusion_over_seeds() {
        // Each index should be masked in ~30% of 1000 draws; 5 sigma band.
        let mut hits = [0usize; 10];
        for seed in 0..1000 {
            let m = sample_mask(10, 0.3, seed).unwrap();
            assert_eq!(m.masked_indices.len(), 3);
            for i in m.masked_indices {
                hits[i] += 1;
            }
        }
        let sigma = (1000.0f64 * 0.3 * 0.7).sqrt();
        for h in hits {
            assert!((h as f64 - 300.0).abs() <= 5.0 * sigma, "{hits:?}");
        }
    }
}
