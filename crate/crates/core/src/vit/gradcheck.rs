//! Central finite-difference verification of the analytic gradients.

use super::config::EncoderConfig;
use super::connector::align_loss;
use super::mat::Mat;
use super::model::{flip_loss, mae_loss_tokens, LossTrace};
use super::params::{init_params, name_matches, Grads, ParameterSet};
use super::ModelError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

/// Tensors larger than this are checked on a seeded sample.
pub const FULL_CHECK_LIMIT: usize = 10_000;
pub const SAMPLE_FRACTION: f64 = 0.1;
pub const REL_FLOOR: f64 = 1e-8;
pub const FLIP_TAU: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub mae: f64,
    pub flip: f64,
    pub align: f64,
    /// Number of coordinates compared across all three losses.
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.mae.max(self.flip).max(self.align)
    }
}

pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(REL_FLOOR)
}

/// Max relative error of `grad` against central differences of `f` at `x`.
pub fn check_function(x: &mut [f64], grad: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let lp = f(x);
        x[i] = orig - eps;
        let lm = f(x);
        x[i] = orig;
        worst = worst.max(relative_error(grad[i], (lp - lm) / (2.0 * eps)));
    }
    worst
}

/// Moves every tensor away from the small-init regime so that gradients are
/// comfortably above the finite-difference noise floor: matrices get
/// `N(0, 1/fan_in)` added, vectors `N(0, 0.1^2)`.
pub fn well_conditioned(params: &mut ParameterSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    for (_, p) in params.iter_mut() {
        let std = if p.shape.len() == 2 {
            (1.0 / p.shape[0] as f64).sqrt()
        } else {
            0.1
        };
        for v in p.data.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
    }
}

fn coordinates(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= FULL_CHECK_LIMIT {
        (0..len).collect()
    } else {
        let k = (len as f64 * SAMPLE_FRACTION).ceil() as usize;
        let mut idx = rand::seq::index::sample(rng, len, k).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Compares the analytic gradient of `loss` with central differences over
/// every tensor under `families`. Returns `(max relative error, count)`.
pub fn check_loss(
    params: &ParameterSet,
    families: &[&str],
    eps: f64,
    seed: u64,
    loss: impl Fn(&ParameterSet) -> Result<(f64, LossTrace), ModelError>,
) -> Result<(f64, usize), ModelError> {
    let mut p = params.clone();
    p.freeze_all(false);
    let (_, trace) = loss(&p)?;
    let grads: Grads = trace.backward(&p)?;
    let names: Vec<String> = p
        .names()
        .filter(|n| families.iter().any(|f| name_matches(f, n)))
        .map(str::to_string)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut count = 0;
    for name in names {
        let len = p.tensor(&name).len();
        for i in coordinates(len, &mut rng) {
            let orig = p.tensor(&name)[i];
            p.tensor_mut(&name)[i] = orig + eps;
            let lp = loss(&p)?.0;
            p.tensor_mut(&name)[i] = orig - eps;
            let lm = loss(&p)?.0;
            p.tensor_mut(&name)[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            let ga = grads.get(&name).map_or(0.0, |g| g[i]);
            let err = relative_error(ga, fd);
            if err > worst {
                log::debug!("{name}[{i}]: analytic {ga:e}, fd {fd:e}, rel {err:e}");
            }
            worst = worst.max(err);
            count += 1;
        }
    }
    Ok((worst, count))
}

fn uniform_tokens(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Mat {
    let n = cfg.n_tokens() * cfg.token_dim();
    Mat::from_vec(cfg.n_tokens(), cfg.token_dim(), (0..n).map(|_| rng.random::<f64>()).collect())
}

/// Gradient check of the reconstruction, contrastive and alignment losses at
/// a seeded well-conditioned point of `cfg`.
pub fn grad_check(cfg: &EncoderConfig, seed: u64, eps: f64) -> Result<GradCheckReport, ModelError> {
    let mut params = init_params(cfg, seed)?;
    well_conditioned(&mut params, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    let tokens = uniform_tokens(cfg, &mut rng);
    let (mae, n_mae) = check_loss(&params, &["encoder", "mae"], eps, seed, |p| {
        mae_loss_tokens(p, &tokens, 0.5, seed).map(|o| (o.loss, o.trace))
    })?;

    let batch: Vec<Mat> = (0..3).map(|_| uniform_tokens(cfg, &mut rng)).collect();
    let text: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..cfg.d_joint).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let (flip, n_flip) = check_loss(&params, &["encoder", "flip"], eps, seed, |p| {
        flip_loss(p, &batch, &text, 0.5, FLIP_TAU, seed).map(|o| (o.loss, o.trace))
    })?;

    let target: Vec<f64> = (0..cfg.d_joint).map(|_| StandardNormal.sample(&mut rng)).collect();
    let (align, n_align) = check_loss(&params, &["encoder", "connector", "lm_head"], eps, seed, |p| {
        align_loss(p, &tokens, &target).map(|o| (o.loss, o.trace))
    })?;

    Ok(GradCheckReport {
        eps,
        mae,
        flip,
        align,
        coordinates: n_mae + n_flip + n_align,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = 0.5 x^T A x + b^T x
        let a = [[3.0, 0.5, 0.0], [0.5, 2.0, -0.3], [0.0, -0.3, 1.5]];
        let b = [0.2, -1.0, 0.7];
        let f = |x: &[f64]| {
            let mut s = 0.0;
            for i in 0..3 {
                s += b[i] * x[i];
                for j in 0..3 {
                    s += 0.5 * x[i] * a[i][j] * x[j];
                }
            }
            s
        };
        let mut x = vec![0.9, -0.4, 1.3];
        let g: Vec<f64> = (0..3)
            .map(|i| b[i] + (0..3).map(|j| a[i][j] * x[j]).sum::<f64>())
            .collect();
        assert!(check_function(&mut x, &g, 1e-4, f) < 1e-10);
    }
}
