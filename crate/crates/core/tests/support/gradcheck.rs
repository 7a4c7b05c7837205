//! Analytic gradients of the full objective against central finite
//! differences, in f64 on a tiny model.

use dfcvae::extractor::FeatureExtractor;
use dfcvae::nn::Tensor;
use dfcvae::rng;
use dfcvae::vae::{sample_noise, Vae, VaeConfig};
use rand::Rng;

pub const STEP: f64 = 1e-4;
pub const MAX_REL_ERR: f64 = 1e-3;

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Weights within one step of a kink.
    pub skipped: usize,
    pub max_rel: f64,
    /// First weight exceeding `MAX_REL_ERR`, if any.
    pub worst: Option<String>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst.is_none() && self.checked >= 50 && self.skipped * 10 <= self.checked
    }
}

pub fn tiny_config() -> VaeConfig {
    VaeConfig {
        latent_size: 4,
        image_size: 16,
        encoder_widths: vec![4, 8],
        decoder_widths: vec![8, 4],
        kl_weight: 1.0,
    }
}

fn batch(seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[]);
    Tensor::from_vec([3, 3, 16, 16], (0..3 * 768).map(|_| r.gen::<f64>()).collect())
}

/// Samples up to four weights per parameter tensor. A weight is skipped
/// when the loss has a kink (a leaky-ReLU or max-pool switch) within one
/// step of it, detected by the one-sided differences disagreeing; central
/// differences are not a valid reference there.
pub fn check(extractor: &FeatureExtractor<f64>, seed: u64) -> GradCheck {
    let mut model = Vae::<f64>::new(tiny_config(), seed).unwrap();
    let x = batch(seed + 1);
    let eps: Tensor<f64> = sample_noise([3, 4, 1, 1], &mut rng::stream(seed + 2, &[]));
    model.zero_grad();
    model.accumulate_gradients(&x, &eps, extractor).unwrap();
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();

    let mut pick = rng::stream(seed + 3, &[]);
    let mut out = GradCheck::default();
    for pi in 0..analytic.len() {
        let len = analytic[pi].len();
        let mut tried = 0;
        let mut taken = 0;
        while taken < 4 && tried < 40 {
            tried += 1;
            let k = pick.gen_range(0..len);
            let a = analytic[pi][k];
            if a.abs() < 1e-7 {
                continue;
            }
            let mut eval = |delta: f64| {
                let orig = model.params()[pi].value[k];
                model.params_mut()[pi].value[k] = orig + delta;
                let l = model.train_loss(&x, &eps, extractor).unwrap().total;
                model.params_mut()[pi].value[k] = orig;
                l
            };
            let (up, mid, down) = (eval(STEP), eval(0.0), eval(-STEP));
            let (fwd, bwd) = ((up - mid) / STEP, (mid - down) / STEP);
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) {
                out.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            out.max_rel = out.max_rel.max(rel);
            if rel > MAX_REL_ERR && out.worst.is_none() {
                let name = &model.params()[pi].name;
                out.worst = Some(format!("{name}[{k}]: analytic {a:e} numeric {numeric:e} rel {rel:e}"));
            }
            taken += 1;
            out.checked += 1;
        }
    }
    out
}
