//! Frozen feature extractor for the perceptual loss.
//!
//! The convolutional variant follows the first block-and-a-half of the VGG16
//! layout: `conv3x3 -> relu` (layer 1), `conv3x3 -> relu` (layer 2),
//! `maxpool 2x2 -> conv3x3 -> relu` (layer 3), applied to inputs normalised
//! with the ImageNet channel statistics. Pretrained weights are read from a
//! safetensors file using torchvision's parameter names (`features.0`,
//! `features.2`, `features.5`); without one, weights are drawn from a seeded
//! He-uniform distribution and kept frozen.

use std::path::Path;

use rand::Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::shape_err;
use crate::nn::{relu, relu_backward, Conv2d, MaxPool2, PoolCache, Real, Tensor};
use crate::{Error, Result};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Hidden activations at the three extraction points, each `[n, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<F> {
    pub layers: [Tensor<F>; 3],
}

impl<F: Real> FeatureStack<F> {
    pub fn layer_dims(&self) -> [[usize; 3]; 3] {
        self.layers
            .each_ref()
            .map(|t| [t.shape()[1], t.shape()[2], t.shape()[3]])
    }

    pub fn batch(&self) -> usize {
        self.layers[0].batch()
    }
}

/// How to build the extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Channel counts of the three conv layers when no weights file is given.
    pub widths: [usize; 3],
    /// VGG16 safetensors file; takes precedence over `widths`.
    pub weights: Option<std::path::PathBuf>,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            widths: [64, 64, 128],
            weights: None,
            seed: 0x5eed,
        }
    }
}

impl ExtractorConfig {
    pub fn build<F: Real>(&self) -> Result<FeatureExtractor<F>> {
        match &self.weights {
            Some(path) => FeatureExtractor::from_safetensors(path),
            None => Ok(FeatureExtractor::random(self.widths, self.seed)),
        }
    }
}

enum Kind<F> {
    Identity,
    Conv(Box<[Conv2d<F>; 3]>),
}

/// Activations kept for the input-gradient pass.
pub struct ExtractorCache<F> {
    in_shape: [usize; 4],
    pooled_shape: [usize; 4],
    pool: Option<PoolCache>,
    _marker: std::marker::PhantomData<F>,
}

pub struct FeatureExtractor<F> {
    kind: Kind<F>,
}

impl<F: Real> FeatureExtractor<F> {
    /// Returns the input itself at all three layers. Used to test the loss
    /// plumbing independently of any network.
    pub fn identity() -> Self {
        Self {
            kind: Kind::Identity,
        }
    }

    pub fn random(widths: [usize; 3], seed: u64) -> Self {
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag("extractor")]);
        let mut layer = |name: &str, cin: usize, cout: usize| {
            let mut conv = Conv2d::new(name, cin, cout, 3, 1, 1, &mut rng);
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            for w in conv.weight.value.iter_mut() {
                *w = F::from_f64v(rng.gen_range(-bound..bound));
            }
            conv.bias.value.iter_mut().for_each(|b| *b = F::zero());
            conv
        };
        let convs = [
            layer("features.0", 3, widths[0]),
            layer("features.2", widths[0], widths[1]),
            layer("features.5", widths[1], widths[2]),
        ];
        Self {
            kind: Kind::Conv(Box::new(convs)),
        }
    }

    pub fn from_safetensors(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Extractor(format!("cannot read weights {}: {e}", path.display()))
        })?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Extractor(format!("{}: {e}", path.display())))?;
        let fetch = |name: &str| -> Result<(Vec<usize>, Vec<F>)> {
            let view = st
                .tensor(name)
                .map_err(|e| Error::Extractor(format!("{}: {name}: {e}", path.display())))?;
            let values = decode_floats(view.dtype(), view.data())
                .ok_or_else(|| Error::Extractor(format!("{name}: unsupported dtype")))?;
            Ok((view.shape().to_vec(), values.into_iter().map(F::from_f64v).collect()))
        };
        let mut rng = crate::rng::stream(0, &[]);
        let mut convs = Vec::new();
        let mut cin = 3;
        for name in ["features.0", "features.2", "features.5"] {
            let (wshape, w) = fetch(&format!("{name}.weight"))?;
            let (_, b) = fetch(&format!("{name}.bias"))?;
            if wshape.len() != 4 || wshape[1] != cin || wshape[2] != 3 || wshape[3] != 3 {
                return Err(Error::Extractor(format!(
                    "{name}.weight has shape {wshape:?}, expected [out, {cin}, 3, 3]"
                )));
            }
            let mut conv = Conv2d::new(name, cin, wshape[0], 3, 1, 1, &mut rng);
            if b.len() != wshape[0] {
                return Err(Error::Extractor(format!("{name}.bias length {}", b.len())));
            }
            conv.weight.value = w;
            conv.bias.value = b;
            cin = wshape[0];
            convs.push(conv);
        }
        let convs: [Conv2d<F>; 3] = convs.try_into().ok().expect("three layers");
        Ok(Self {
            kind: Kind::Conv(Box::new(convs)),
        })
    }

    /// Feature maps for a batch of `[n, 3, H, W]` images in `[0, 1]`.
    pub fn extract(&self, x: &Tensor<F>) -> Result<FeatureStack<F>> {
        self.extract_with_cache(x).map(|(s, _)| s)
    }

    pub fn extract_with_cache(&self, x: &Tensor<F>) -> Result<(FeatureStack<F>, ExtractorCache<F>)> {
        if x.shape()[1] != 3 {
            return shape_err(format!("extractor expects 3 channels, got {:?}", x.shape()));
        }
        match &self.kind {
            Kind::Identity => Ok((
                FeatureStack {
                    layers: [x.clone(), x.clone(), x.clone()],
                },
                ExtractorCache {
                    in_shape: x.shape(),
                    pooled_shape: x.shape(),
                    pool: None,
                    _marker: Default::default(),
                },
            )),
            Kind::Conv(convs) => {
                if x.shape()[2] < 2 || x.shape()[3] < 2 {
                    return shape_err("extractor input must be at least 2x2");
                }
                let xn = normalize(x);
                let a1 = relu(&convs[0].forward_eval(&xn));
                let a2 = relu(&convs[1].forward_eval(&a1));
                let (pooled, pool) = MaxPool2.forward(&a2);
                let a3 = relu(&convs[2].forward_eval(&pooled));
                Ok((
                    FeatureStack {
                        layers: [a1, a2, a3],
                    },
                    ExtractorCache {
                        in_shape: x.shape(),
                        pooled_shape: pooled.shape(),
                        pool: Some(pool),
                        _marker: Default::default(),
                    },
                ))
            }
        }
    }

    /// Back-propagates feature gradients to the image. `features` must be the
    /// stack produced together with `cache`.
    pub fn backward_input(
        &self,
        features: &FeatureStack<F>,
        cache: &ExtractorCache<F>,
        grads: [Tensor<F>; 3],
    ) -> Tensor<F> {
        let [g1, g2, g3] = grads;
        match &self.kind {
            Kind::Identity => {
                let mut dx = g1;
                dx.add_assign(&g2);
                dx.add_assign(&g3);
                dx
            }
            Kind::Conv(convs) => {
                let [a1, a2, a3] = &features.layers;
                let d3 = relu_backward(a3, &g3);
                let dpool = convs[2].backward_input(cache.pooled_shape, &d3);
                let mut da2 = MaxPool2.backward(cache.pool.as_ref().expect("pool cache"), &dpool);
                da2.add_assign(&g2);
                let d2 = relu_backward(a2, &da2);
                let mut da1 = convs[1].backward_input(a1.shape(), &d2);
                da1.add_assign(&g1);
                let d1 = relu_backward(a1, &da1);
                let dxn = convs[0].backward_input(cache.in_shape, &d1);
                denormalize_grad(dxn)
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, Kind::Identity)
    }
}

fn normalize<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = x.shape();
    let mut out = x.clone();
    let plane = h * w;
    for i in 0..n {
        for ch in 0..c {
            let (m, s) = (F::from_f64v(IMAGENET_MEAN[ch]), F::from_f64v(IMAGENET_STD[ch]));
            let start = (i * c + ch) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v = (*v - m) / s;
            }
        }
    }
    out
}

fn denormalize_grad<F: Real>(mut g: Tensor<F>) -> Tensor<F> {
    let [n, c, h, w] = g.shape();
    let plane = h * w;
    for i in 0..n {
        for ch in 0..c {
            let s = F::from_f64v(IMAGENET_STD[ch]);
            let start = (i * c + ch) * plane;
            for v in &mut g.data_mut()[start..start + plane] {
                *v = *v / s;
            }
        }
    }
    g
}

fn decode_floats(dtype: Dtype, data: &[u8]) -> Option<Vec<f64>> {
    match dtype {
        Dtype::F32 => Some(
            data.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
        ),
        Dtype::F64 => Some(
            data.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::stream(seed, &[]);
        Tensor::from_vec([n, 3, 16, 16], (0..n * 768).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn golden_layer_dims_for_128px_input() {
        let ex = FeatureExtractor::<f32>::random([64, 64, 128], 1);
        let x = Tensor::zeros([2, 3, 128, 128]);
        let s = ex.extract(&x).unwrap();
        assert_eq!(s.layer_dims(), [[64, 128, 128], [64, 128, 128], [128, 64, 64]]);
        assert!(s.layers.iter().all(|l| l.batch() == 2));
    }

    #[test]
    fn deterministic_and_batch_shaped() {
        let ex = FeatureExtractor::<f64>::random([4, 4, 8], 3);
        let x = batch(3, 1);
        assert_eq!(ex.extract(&x).unwrap(), ex.extract(&x).unwrap());
        assert_eq!(ex.extract(&x).unwrap().batch(), 3);
    }

    #[test]
    fn missing_weights_file_is_an_init_error() {
        let cfg = ExtractorConfig {
            weights: Some("/nonexistent/vgg16.safetensors".into()),
            ..Default::default()
        };
        assert!(matches!(cfg.build::<f32>(), Err(Error::Extractor(_))));
    }

    #[test]
    fn loads_vgg_style_safetensors() {
        use safetensors::tensor::TensorView;
        let shapes = [
            ("features.0", vec![2usize, 3, 3, 3]),
            ("features.2", vec![2, 2, 3, 3]),
            ("features.5", vec![4, 2, 3, 3]),
        ];
        let mut blobs = Vec::new();
        for (name, shape) in &shapes {
            let n: usize = shape.iter().product();
            let w: Vec<u8> = (0..n).flat_map(|i| (i as f32 * 0.01).to_le_bytes()).collect();
            let b: Vec<u8> = (0..shape[0]).flat_map(|_| 0.0f32.to_le_bytes()).collect();
            blobs.push((format!("{name}.weight"), shape.clone(), w));
            blobs.push((format!("{name}.bias"), vec![shape[0]], b));
        }
        let views: Vec<(String, TensorView)> = blobs
            .iter()
            .map(|(n, s, d)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), d).unwrap()))
            .collect();
        let bytes = safetensors::serialize(views, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        std::fs::write(&path, bytes).unwrap();
        let ex = FeatureExtractor::<f64>::from_safetensors(&path).unwrap();
        let s = ex.extract(&batch(1, 2)).unwrap();
        assert_eq!(s.layer_dims(), [[2, 16, 16], [2, 16, 16], [4, 8, 8]]);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        // d/dx of sum_l <r_l, psi_l(x)> for fixed random r_l.
        let ex = FeatureExtractor::<f64>::random([3, 4, 5], 9);
        let x = batch(1, 4);
        let (stack, cache) = ex.extract_with_cache(&x).unwrap();
        let mut rng = crate::rng::stream(5, &[]);
        let r: [Tensor<f64>; 3] = stack
            .layers
            .each_ref()
            .map(|l| Tensor::from_vec(l.shape(), (0..l.data().len()).map(|_| rng.gen::<f64>() - 0.5).collect()));
        let objective = |x: &Tensor<f64>| -> f64 {
            let s = ex.extract(x).unwrap();
            s.layers
                .iter()
                .zip(&r)
                .map(|(l, r)| l.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let dx = ex.backward_input(&stack, &cache, r.clone());
        for &i in &[0usize, 17, 300, 511, 767] {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", dx.data()[i]);
        }
    }
}
