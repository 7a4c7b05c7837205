use rand::Rng;

use super::{fan_in_uniform, matmul, Buffer, Param, Real, Tensor};

/// Fully connected layer, weight layout `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Tensor<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_features, in_features],
                fan_in_uniform(in_features * out_features, in_features, rng),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![out_features],
                fan_in_uniform(out_features, in_features, rng),
            ),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn forward_eval(&self, x: &Tensor<F>) -> Tensor<F> {
        let n = x.batch();
        assert_eq!(x.item_len(), self.in_features, "{}: input width", self.weight.name);
        let mut y = Vec::with_capacity(n * self.out_features);
        for _ in 0..n {
            y.extend_from_slice(&self.bias.value);
        }
        matmul(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            &self.weight.value,
            true,
            F::one(),
            &mut y,
        );
        Tensor::matrix(n, self.out_features, y)
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let y = self.forward_eval(x);
        self.input = Some(x.clone());
        y
    }

    /// Returns the gradient with the same shape as the cached input.
    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let x = self.input.take().expect("backward without forward_train");
        let n = x.batch();
        assert_eq!(dy.data().len(), n * self.out_features);
        matmul(
            self.out_features,
            n,
            self.in_features,
            dy.data(),
            true,
            x.data(),
            false,
            F::one(),
            &mut self.weight.grad,
        );
        for row in dy.data().chunks(self.out_features) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += *d;
            }
        }
        let mut dx = vec![F::zero(); n * self.in_features];
        matmul(
            n,
            self.out_features,
            self.in_features,
            dy.data(),
            false,
            &self.weight.value,
            false,
            F::zero(),
            &mut dx,
        );
        Tensor::from_vec(x.shape(), dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<F>; 2] {
        [&self.weight, &self.bias]
    }
}

#[derive(Clone, Debug)]
struct BnCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
    shape: [usize; 4],
}

/// Per-channel batch normalisation over `(n, h, w)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Buffer<F>,
    pub running_var: Buffer<F>,
    pub momentum: f64,
    pub eps: f64,
    channels: usize,
    cache: Option<BnCache<F>>,
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.weight"), vec![channels], vec![F::one(); channels]),
            beta: Param::new(format!("{name}.bias"), vec![channels], vec![F::zero(); channels]),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: vec![F::zero(); channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: vec![F::one(); channels],
            },
            momentum: 0.1,
            eps: 1e-5,
            channels,
            cache: None,
        }
    }

    fn for_channel(shape: [usize; 4], ch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
        let [n, c, h, w] = shape;
        let plane = h * w;
        (0..n).map(move |i| (i * c + ch) * plane..(i * c + ch + 1) * plane)
    }

    /// Normalises with the running statistics.
    pub fn forward_eval(&self, x: &Tensor<F>) -> Tensor<F> {
        let shape = x.shape();
        assert_eq!(shape[1], self.channels, "{}: channel mismatch", self.gamma.name);
        let mut y = x.clone();
        let eps = F::from_f64v(self.eps);
        for ch in 0..self.channels {
            let inv = (self.running_var.value[ch] + eps).sqrt().recip();
            let scale = self.gamma.value[ch] * inv;
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            for r in Self::for_channel(shape, ch) {
                for v in &mut y.data_mut()[r] {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    /// Normalises with batch statistics and updates the running averages.
    pub fn forward_train(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let shape = x.shape();
        assert_eq!(shape[1], self.channels, "{}: channel mismatch", self.gamma.name);
        let count = shape[0] * shape[2] * shape[3];
        let m = F::from_usize(count).unwrap();
        let eps = F::from_f64v(self.eps);
        let momentum = F::from_f64v(self.momentum);
        let mut xhat = vec![F::zero(); x.data().len()];
        let mut inv_std = vec![F::zero(); self.channels];
        let mut y = vec![F::zero(); x.data().len()];
        for ch in 0..self.channels {
            let mut sum = F::zero();
            for r in Self::for_channel(shape, ch) {
                sum += x.data()[r].iter().copied().sum::<F>();
            }
            let mean = sum / m;
            let mut sq = F::zero();
            for r in Self::for_channel(shape, ch) {
                sq += x.data()[r].iter().map(|&v| (v - mean) * (v - mean)).sum::<F>();
            }
            let var = sq / m;
            let inv = (var + eps).sqrt().recip();
            inv_std[ch] = inv;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for r in Self::for_channel(shape, ch) {
                for i in r {
                    let xh = (x.data()[i] - mean) * inv;
                    xhat[i] = xh;
                    y[i] = g * xh + b;
                }
            }
            let unbiased = if count > 1 {
                sq / F::from_usize(count - 1).unwrap()
            } else {
                var
            };
            let rm = &mut self.running_mean.value[ch];
            *rm = (F::one() - momentum) * *rm + momentum * mean;
            let rv = &mut self.running_var.value[ch];
            *rv = (F::one() - momentum) * *rv + momentum * unbiased;
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape,
        });
        Tensor::from_vec(shape, y)
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let BnCache {
            xhat,
            inv_std,
            shape,
        } = self.cache.take().expect("backward without forward_train");
        assert_eq!(dy.shape(), shape);
        let m = F::from_usize(shape[0] * shape[2] * shape[3]).unwrap();
        let mut dx = vec![F::zero(); xhat.len()];
        for ch in 0..self.channels {
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for r in Self::for_channel(shape, ch) {
                for i in r {
                    sum_dy += dy.data()[i];
                    sum_dy_xhat += dy.data()[i] * xhat[i];
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let k = self.gamma.value[ch] * inv_std[ch] / m;
            for r in Self::for_channel(shape, ch) {
                for i in r {
                    dx[i] = k * (m * dy.data()[i] - sum_dy - xhat[i] * sum_dy_xhat);
                }
            }
        }
        Tensor::from_vec(shape, dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Param<F>; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn buffers_mut(&mut self) -> [&mut Buffer<F>; 2] {
        [&mut self.running_mean, &mut self.running_var]
    }

    pub fn buffers(&self) -> [&Buffer<F>; 2] {
        [&self.running_mean, &self.running_var]
    }
}

pub fn leaky_relu<F: Real>(x: &Tensor<F>, slope: f64) -> Tensor<F> {
    let s = F::from_f64v(slope);
    x.map(|v| if v > F::zero() { v } else { v * s })
}

/// Gradient of [`leaky_relu`] given its input.
pub fn leaky_relu_backward<F: Real>(x: &Tensor<F>, dy: &Tensor<F>, slope: f64) -> Tensor<F> {
    let s = F::from_f64v(slope);
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > F::zero() { g } else { g * s })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn relu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v.max(F::zero()))
}

/// Gradient of [`relu`] given its output.
pub fn relu_backward<F: Real>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > F::zero() { g } else { F::zero() })
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// Logistic function; saturates to exactly 0 or 1 for large magnitudes.
pub fn sigmoid<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| {
        if v >= F::zero() {
            F::one() / (F::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (F::one() + e)
        }
    })
}

/// Argmax positions recorded by [`MaxPool2`].
#[derive(Clone, Debug)]
pub struct PoolCache {
    in_shape: [usize; 4],
    argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaxPool2;

impl MaxPool2 {
    pub fn forward<F: Real>(&self, x: &Tensor<F>) -> (Tensor<F>, PoolCache) {
        let [n, c, h, w] = x.shape();
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    y.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
        (
            Tensor::from_vec([n, c, ho, wo], y),
            PoolCache {
                in_shape: [n, c, h, w],
                argmax,
            },
        )
    }

    pub fn backward<F: Real>(&self, cache: &PoolCache, dy: &Tensor<F>) -> Tensor<F> {
        let mut dx = Tensor::zeros(cache.in_shape);
        for (&i, &g) in cache.argmax.iter().zip(dy.data()) {
            dx.data_mut()[i] += g;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batchnorm_train_output_is_standardised() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        let x = Tensor::from_vec([3, 2, 2, 2], (0..24).map(|i| (i * i % 7) as f64).collect());
        let y = bn.forward_train(&x);
        for ch in 0..2 {
            let vals: Vec<f64> = BatchNorm2d::<f64>::for_channel(y.shape(), ch)
                .flat_map(|r| y.data()[r].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn linear_backward_matches_definition() {
        let mut rng = crate::rng::stream(3, &[]);
        let mut lin = Linear::<f64>::new("l", 3, 2, &mut rng);
        let x = Tensor::matrix(2, 3, vec![1., 2., 3., -1., 0., 0.5]);
        let y = lin.forward_train(&x);
        let w = lin.weight.value.clone();
        assert!((y.data()[0] - (w[0] + 2. * w[1] + 3. * w[2] + lin.bias.value[0])).abs() < 1e-12);
        let dy = Tensor::matrix(2, 2, vec![1., 0., 0., 1.]);
        let dx = lin.backward(&dy);
        // dx row 0 = W row 0, dx row 1 = W row 1
        assert_eq!(&dx.data()[..3], &w[..3]);
        assert_eq!(&dx.data()[3..], &w[3..]);
        assert_eq!(lin.weight.grad, vec![1., 2., 3., -1., 0., 0.5]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec([1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 9., 1.]);
        let (y, cache) = MaxPool2.forward(&x);
        assert_eq!(y.data(), &[5., 9.]);
        let dx = MaxPool2.backward(&cache, &Tensor::from_vec([1, 1, 1, 2], vec![1., 2.]));
        assert_eq!(dx.data(), &[0., 1., 0., 0., 0., 0., 2., 0.]);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let x = Tensor::<f32>::matrix(1, 4, vec![-1e6, -50.0, 0.0, 1e6]);
        let y = sigmoid(&x);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(y.data()[2], 0.5);
    }
}
