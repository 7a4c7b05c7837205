//! The DFC-VAE objective: feature perceptual loss plus a weighted KL term.

use serde::{Deserialize, Serialize};

use crate::error::shape_err;
use crate::extractor::{FeatureExtractor, FeatureStack};
use crate::nn::{Real, Tensor};
use crate::Result;

/// Per-batch loss terms. `total = feature + beta * kl`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub feature: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(feature: f64, kl: f64, beta: f64) -> Self {
        Self {
            feature,
            kl,
            total: feature + beta * kl,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.feature.is_finite() && self.kl.is_finite() && self.total.is_finite()
    }

    /// Weighted running mean helper: `self * wa + other * wb` over `wa + wb`.
    pub fn blend(self, wa: f64, other: Self, wb: f64) -> Self {
        let s = wa + wb;
        Self {
            feature: (self.feature * wa + other.feature * wb) / s,
            kl: (self.kl * wa + other.kl * wb) / s,
            total: (self.total * wa + other.total * wb) / s,
        }
    }
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))`, summed over latent
/// dimensions and averaged over the batch. Both inputs are `[n, nl]`.
pub fn kl_divergence<F: Real>(mu: &Tensor<F>, logvar: &Tensor<F>) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return shape_err(format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape()));
    }
    let n = mu.batch().max(1) as f64;
    let sum: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            -0.5 * (1.0 + lv - m * m - lv.exp())
        })
        .sum();
    Ok(sum / n)
}

/// Gradients of [`kl_divergence`] with respect to `mu` and `logvar`.
pub fn kl_gradients<F: Real>(mu: &Tensor<F>, logvar: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    let inv_n = F::from_f64v(1.0 / mu.batch().max(1) as f64);
    let half = F::from_f64v(0.5);
    let dmu = mu.map(|m| m * inv_n);
    let dlv = logvar.map(|lv| half * (lv.exp() - F::one()) * inv_n);
    (dmu, dlv)
}

/// Feature loss between two stacks: for each layer, half the mean squared
/// difference over `C*H*W` positions, summed over layers and averaged over
/// the batch.
pub fn feature_loss_from_stacks<F: Real>(a: &FeatureStack<F>, b: &FeatureStack<F>) -> Result<f64> {
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        if la.shape() != lb.shape() {
            return shape_err(format!("feature layers {:?} vs {:?}", la.shape(), lb.shape()));
        }
    }
    Ok(a.layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| {
            let sq: f64 = la
                .data()
                .iter()
                .zip(lb.data())
                .map(|(&p, &q)| (p.as_f64() - q.as_f64()).powi(2))
                .sum();
            sq / (2.0 * la.data().len().max(1) as f64)
        })
        .sum())
}

/// Loss value and its gradient with respect to the reconstruction's features.
pub(crate) fn feature_loss_with_grad<F: Real>(
    target: &FeatureStack<F>,
    rec: &FeatureStack<F>,
) -> Result<(f64, [Tensor<F>; 3])> {
    let value = feature_loss_from_stacks(target, rec)?;
    let grads = [0, 1, 2].map(|l| {
        let (t, r) = (&target.layers[l], &rec.layers[l]);
        let scale = F::from_f64v(1.0 / t.data().len().max(1) as f64);
        let data = r
            .data()
            .iter()
            .zip(t.data())
            .map(|(&rv, &tv)| (rv - tv) * scale)
            .collect();
        Tensor::from_vec(r.shape(), data)
    });
    Ok((value, grads))
}

pub fn feature_perceptual_loss<F: Real>(
    x: &Tensor<F>,
    x_rec: &Tensor<F>,
    extractor: &FeatureExtractor<F>,
) -> Result<f64> {
    if x.shape() != x_rec.shape() {
        return shape_err(format!("images {:?} vs reconstructions {:?}", x.shape(), x_rec.shape()));
    }
    feature_loss_from_stacks(&extractor.extract(x)?, &extractor.extract(x_rec)?)
}

pub fn total_loss<F: Real>(
    x: &Tensor<F>,
    x_rec: &Tensor<F>,
    mu: &Tensor<F>,
    logvar: &Tensor<F>,
    extractor: &FeatureExtractor<F>,
    beta: f64,
) -> Result<LossBreakdown> {
    let feature = feature_perceptual_loss(x, x_rec, extractor)?;
    let kl = kl_divergence(mu, logvar)?;
    Ok(LossBreakdown::combine(feature, kl, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::matrix(1, v.len(), v.to_vec())
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_divergence(&row(&[0.0, 0.0]), &row(&[0.0, 0.0])).unwrap(), 0.0);
        assert!((kl_divergence(&row(&[1.0]), &row(&[0.0])).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_divergence(&row(&[0.0]), &row(&[4f64.ln()])).unwrap();
        assert!((v - (1.5 - 2f64.ln())).abs() < 1e-12);
        assert!((v - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn kl_shape_mismatch() {
        assert!(kl_divergence(&row(&[0.0]), &row(&[0.0, 1.0])).is_err());
    }

    fn const_stack(shapes: [[usize; 4]; 3], values: [f64; 3]) -> FeatureStack<f64> {
        FeatureStack {
            layers: [0, 1, 2].map(|l| {
                let n = shapes[l].iter().product();
                Tensor::from_vec(shapes[l], vec![values[l]; n])
            }),
        }
    }

    #[test]
    fn injected_feature_stacks() {
        let shapes = [[2, 4, 5, 5], [2, 3, 5, 5], [2, 6, 2, 2]];
        let a = const_stack(shapes, [0.0, 0.0, 0.0]);
        let d = 0.7;
        let one_layer = const_stack(shapes, [d, 0.0, 0.0]);
        let v = feature_loss_from_stacks(&a, &one_layer).unwrap();
        assert!((v - d * d / 2.0).abs() < 1e-12);
        let all = const_stack(shapes, [1.0, -1.0, 1.0]);
        assert!((feature_loss_from_stacks(&a, &all).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn total_loss_combinations() {
        let ex = FeatureExtractor::<f64>::random([2, 2, 2], 1);
        let mut rng = crate::rng::stream(1, &[]);
        let x = Tensor::from_vec([2, 3, 8, 8], (0..384).map(|_| rng.gen::<f64>()).collect());
        let zeros = Tensor::zeros([2, 4, 1, 1]);
        let l = total_loss(&x, &x, &zeros, &zeros, &ex, 1.0).unwrap();
        assert_eq!(l.total, 0.0);

        let y = x.map(|v| 1.0 - v);
        let mu = Tensor::matrix(2, 4, vec![0.3; 8]);
        let l0 = total_loss(&x, &y, &mu, &zeros, &ex, 0.0).unwrap();
        assert_eq!(l0.total, l0.feature);
        assert!(l0.kl > 0.0);
        assert_eq!(LossBreakdown::combine(1.5, 0.5, 1.0).total, 2.0);
    }

    #[test]
    fn feature_loss_shape_mismatch() {
        let ex = FeatureExtractor::<f64>::identity();
        let a = Tensor::zeros([1, 3, 4, 4]);
        let b = Tensor::zeros([1, 3, 4, 5]);
        assert!(feature_perceptual_loss(&a, &b, &ex).is_err());
    }

    mod props {
        use super::*;
        use proptest::{prop_assert, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn kl_nonnegative(pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..32)) {
                let mu: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                let lv: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                let kl = kl_divergence(&row(&mu), &row(&lv)).unwrap();
                prop_assert!(kl >= 0.0);
                let at_prior = mu.iter().chain(&lv).all(|v| *v == 0.0);
                if !at_prior {
                    prop_assert!(kl > 0.0);
                }
            }

            #[test]
            fn feature_loss_symmetric(seed in 0u64..1000) {
                let ex = FeatureExtractor::<f64>::random([2, 3, 2], 4);
                let mut rng = crate::rng::stream(seed, &[]);
                let a = Tensor::from_vec([1, 3, 6, 6], (0..108).map(|_| rng.gen::<f64>()).collect());
                let b = Tensor::from_vec([1, 3, 6, 6], (0..108).map(|_| rng.gen::<f64>()).collect());
                let ab = feature_perceptual_loss(&a, &b, &ex).unwrap();
                let ba = feature_perceptual_loss(&b, &a, &ex).unwrap();
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert_eq!(feature_perceptual_loss(&a, &a, &ex).unwrap(), 0.0);
            }
        }
    }
}
