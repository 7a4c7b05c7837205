//! Convolutional VAE: stride-2 conv encoder to a diagonal Gaussian posterior,
//! reparameterised sampling, and a transposed-conv decoder with a sigmoid
//! output.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err};
use crate::extractor::FeatureExtractor;
use crate::loss::{feature_loss_with_grad, kl_divergence, kl_gradients, LossBreakdown};
use crate::nn::{
    leaky_relu, leaky_relu_backward, sigmoid, BatchNorm2d, Buffer, Conv2d, ConvTranspose2d,
    Linear, Param, Real, Tensor,
};
use crate::Result;

const LEAKY_SLOPE: f64 = 0.2;

/// Latent sizes trained by the full sweep: 2, 4, ..., 2048.
pub const LATENT_SIZES: [usize; 11] = [2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_size: usize,
    pub image_size: usize,
    /// Output channels of each stride-2 encoder block.
    pub encoder_widths: Vec<usize>,
    /// Channels entering each decoder upsampling stage, first stage first.
    pub decoder_widths: Vec<usize>,
    /// Weight of the KL term.
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_size: 128,
            image_size: 128,
            encoder_widths: vec![32, 64, 128, 256, 512],
            decoder_widths: vec![512, 256, 128, 64, 32],
            kl_weight: 1.0,
        }
    }
}

impl VaeConfig {
    pub fn with_latent_size(mut self, nl: usize) -> Self {
        self.latent_size = nl;
        self
    }

    pub fn validate(&self) -> Result<()> {
        validate_latent_size(self.latent_size)?;
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() {
            return arg_err("encoder and decoder widths must be non-empty");
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|w| *w == 0) {
            return arg_err("channel widths must be positive");
        }
        if self.encoder_widths.len() != self.decoder_widths.len() {
            return arg_err(format!(
                "decoder needs one upsampling stage per encoder block ({} vs {})",
                self.decoder_widths.len(),
                self.encoder_widths.len()
            ));
        }
        let factor = 1usize << self.encoder_widths.len();
        if self.image_size < factor || self.image_size % factor != 0 {
            return arg_err(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size,
                self.encoder_widths.len()
            ));
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return arg_err(format!("kl_weight must be finite and >= 0, got {}", self.kl_weight));
        }
        Ok(())
    }

    /// Spatial side length at the bottleneck.
    pub fn bottleneck_side(&self) -> usize {
        self.image_size >> self.encoder_widths.len()
    }
}

pub fn validate_latent_size(nl: usize) -> Result<()> {
    if LATENT_SIZES.contains(&nl) {
        Ok(())
    } else {
        arg_err(format!("latent size {nl} is not a power of two in 2..=2048"))
    }
}

/// Posterior parameters and a sample for one batch, each `[n, nl]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<F> {
    pub mu: Tensor<F>,
    pub logvar: Tensor<F>,
    pub z: Tensor<F>,
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize<F: Real>(mu: &Tensor<F>, logvar: &Tensor<F>, eps: &Tensor<F>) -> Result<Tensor<F>> {
    if mu.shape() != logvar.shape() || mu.shape() != eps.shape() {
        return shape_err(format!(
            "reparameterize shapes mu {:?}, logvar {:?}, eps {:?}",
            mu.shape(),
            logvar.shape(),
            eps.shape()
        ));
    }
    let half = F::from_f64v(0.5);
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
        .collect();
    Ok(Tensor::from_vec(mu.shape(), data))
}

/// Standard normal noise of the given shape.
pub fn sample_noise<F: Real>(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| F::from_f64v(rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    )
}

#[derive(Clone, Debug)]
struct ConvBlock<F> {
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
    pre_act: Option<Tensor<F>>,
}

#[derive(Clone, Debug)]
struct DeconvBlock<F> {
    deconv: ConvTranspose2d<F>,
    bn: BatchNorm2d<F>,
    pre_act: Option<Tensor<F>>,
}

#[derive(Clone, Debug)]
pub struct Encoder<F> {
    blocks: Vec<ConvBlock<F>>,
    mu_head: Linear<F>,
    logvar_head: Linear<F>,
    flat_shape: [usize; 4],
}

#[derive(Clone, Debug)]
pub struct Decoder<F> {
    fc: Linear<F>,
    fc_out: Option<Tensor<F>>,
    start_shape: [usize; 3],
    blocks: Vec<DeconvBlock<F>>,
    out: ConvTranspose2d<F>,
    output: Option<Tensor<F>>,
}

/// Everything `backward` needs from a training forward pass.
pub struct TrainForward<F> {
    pub code: LatentCode<F>,
    pub reconstruction: Tensor<F>,
    eps: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct Vae<F> {
    config: VaeConfig,
    encoder: Encoder<F>,
    decoder: Decoder<F>,
}

impl<F: Real> Vae<F> {
    /// Builds a model with seeded fan-in-uniform weights.
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag("init"), config.latent_size as u64]);
        let side = config.bottleneck_side();
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            blocks.push(ConvBlock {
                conv: Conv2d::new(&format!("encoder.{i}.conv"), cin, w, 4, 2, 1, &mut rng),
                bn: BatchNorm2d::new(&format!("encoder.{i}.bn"), w),
                pre_act: None,
            });
            cin = w;
        }
        let flat = cin * side * side;
        let nl = config.latent_size;
        let encoder = Encoder {
            blocks,
            mu_head: Linear::new("encoder.mu", flat, nl, &mut rng),
            logvar_head: Linear::new("encoder.logvar", flat, nl, &mut rng),
            flat_shape: [0, cin, side, side],
        };
        let dw = &config.decoder_widths;
        let mut dblocks = Vec::new();
        for i in 1..dw.len() {
            dblocks.push(DeconvBlock {
                deconv: ConvTranspose2d::new(&format!("decoder.{i}.deconv"), dw[i - 1], dw[i], 4, 2, 1, &mut rng),
                bn: BatchNorm2d::new(&format!("decoder.{i}.bn"), dw[i]),
                pre_act: None,
            });
        }
        let decoder = Decoder {
            fc: Linear::new("decoder.fc", nl, dw[0] * side * side, &mut rng),
            fc_out: None,
            start_shape: [dw[0], side, side],
            blocks: dblocks,
            out: ConvTranspose2d::new("decoder.out", *dw.last().unwrap(), 3, 4, 2, 1, &mut rng),
            output: None,
        };
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn latent_size(&self) -> usize {
        self.config.latent_size
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let s = self.config.image_size;
        let [_, c, h, w] = x.shape();
        if c != 3 || h != s || w != s {
            return shape_err(format!("expected [n, 3, {s}, {s}] input, got {:?}", x.shape()));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor<F>) -> Result<()> {
        if z.item_len() != self.config.latent_size {
            return shape_err(format!(
                "expected latent length {}, got {}",
                self.config.latent_size,
                z.item_len()
            ));
        }
        Ok(())
    }

    /// Posterior mean and log-variance, `[n, nl]` each. Uses running
    /// batch-norm statistics, so rows depend only on their own image.
    pub fn encode(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.encoder.blocks {
            h = leaky_relu(&b.bn.forward_eval(&b.conv.forward_eval(&h)), LEAKY_SLOPE);
        }
        let n = h.batch();
        let flat = h.reshape([n, self.encoder.mu_head.in_features, 1, 1]);
        Ok((
            self.encoder.mu_head.forward_eval(&flat),
            self.encoder.logvar_head.forward_eval(&flat),
        ))
    }

    pub fn decode(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_latent(z)?;
        let d = &self.decoder;
        let n = z.batch();
        let [c, s, _] = d.start_shape;
        let mut h = leaky_relu(&d.fc.forward_eval(z).reshape([n, c, s, s]), LEAKY_SLOPE);
        for b in &d.blocks {
            h = leaky_relu(&b.bn.forward_eval(&b.deconv.forward_eval(&h)), LEAKY_SLOPE);
        }
        Ok(sigmoid(&d.out.forward_eval(&h)))
    }

    /// Encode, then decode the posterior mean.
    pub fn reconstruct(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (mu, _) = self.encode(x)?;
        self.decode(&mu)
    }

    /// Training-mode forward pass with caller-supplied noise `eps` (`[n, nl]`).
    pub fn forward_train(&mut self, x: &Tensor<F>, eps: &Tensor<F>) -> Result<TrainForward<F>> {
        self.check_input(x)?;
        let n = x.batch();
        let nl = self.config.latent_size;
        if eps.shape() != [n, nl, 1, 1] {
            return shape_err(format!("noise shape {:?}, expected [{n}, {nl}, 1, 1]", eps.shape()));
        }
        let mut h = x.clone();
        for b in &mut self.encoder.blocks {
            let pre = b.bn.forward_train(&b.conv.forward_train(&h));
            h = leaky_relu(&pre, LEAKY_SLOPE);
            b.pre_act = Some(pre);
        }
        self.encoder.flat_shape = h.shape();
        let flat = h.reshape([n, self.encoder.mu_head.in_features, 1, 1]);
        let mu = self.encoder.mu_head.forward_train(&flat);
        let logvar = self.encoder.logvar_head.forward_train(&flat);
        let z = reparameterize(&mu, &logvar, eps)?;

        let d = &mut self.decoder;
        let [c, s, _] = d.start_shape;
        let pre = d.fc.forward_train(&z).reshape([n, c, s, s]);
        let mut h = leaky_relu(&pre, LEAKY_SLOPE);
        d.fc_out = Some(pre);
        for b in &mut d.blocks {
            let pre = b.bn.forward_train(&b.deconv.forward_train(&h));
            h = leaky_relu(&pre, LEAKY_SLOPE);
            b.pre_act = Some(pre);
        }
        let out = sigmoid(&d.out.forward_train(&h));
        d.output = Some(out.clone());
        Ok(TrainForward {
            code: LatentCode { mu, logvar, z },
            reconstruction: out,
            eps: eps.clone(),
        })
    }

    /// Back-propagates `d_rec` (gradient w.r.t. the reconstruction) plus the
    /// weighted KL gradient, accumulating into every parameter.
    pub fn backward(&mut self, fwd: &TrainForward<F>, d_rec: &Tensor<F>) {
        let d = &mut self.decoder;
        let y = d.output.take().expect("backward without forward_train");
        let dlogit = Tensor::from_vec(
            y.shape(),
            y.data()
                .iter()
                .zip(d_rec.data())
                .map(|(&y, &g)| g * y * (F::one() - y))
                .collect(),
        );
        let mut g = d.out.backward(&dlogit);
        for b in d.blocks.iter_mut().rev() {
            let pre = b.pre_act.take().unwrap();
            g = b.deconv.backward(&b.bn.backward(&leaky_relu_backward(&pre, &g, LEAKY_SLOPE)));
        }
        let pre = d.fc_out.take().unwrap();
        let g = leaky_relu_backward(&pre, &g, LEAKY_SLOPE);
        let n = g.batch();
        let dz = d.fc.backward(&g.reshape([n, d.fc.out_features, 1, 1]));

        let LatentCode { mu, logvar, .. } = &fwd.code;
        let beta = F::from_f64v(self.config.kl_weight);
        let (kl_mu, kl_lv) = kl_gradients(mu, logvar);
        let half = F::from_f64v(0.5);
        let dmu = Tensor::from_vec(
            mu.shape(),
            dz.data().iter().zip(kl_mu.data()).map(|(&a, &b)| a + beta * b).collect(),
        );
        let dlv = Tensor::from_vec(
            logvar.shape(),
            dz.data()
                .iter()
                .zip(fwd.eps.data())
                .zip(logvar.data())
                .zip(kl_lv.data())
                .map(|(((&g, &e), &lv), &k)| g * e * half * (lv * half).exp() + beta * k)
                .collect(),
        );
        let e = &mut self.encoder;
        let mut dh = e.mu_head.backward(&dmu);
        dh.add_assign(&e.logvar_head.backward(&dlv));
        let mut g = dh.reshape(e.flat_shape);
        for b in e.blocks.iter_mut().rev() {
            let pre = b.pre_act.take().unwrap();
            g = b.conv.backward(&b.bn.backward(&leaky_relu_backward(&pre, &g, LEAKY_SLOPE)));
        }
    }

    /// One full objective evaluation in training mode with gradients
    /// accumulated into the parameters. Returns the loss terms.
    pub fn accumulate_gradients(
        &mut self,
        x: &Tensor<F>,
        eps: &Tensor<F>,
        extractor: &FeatureExtractor<F>,
    ) -> Result<LossBreakdown> {
        let fwd = self.forward_train(x, eps)?;
        let target = extractor.extract(x)?;
        let (rec_feats, cache) = extractor.extract_with_cache(&fwd.reconstruction)?;
        let (feature, grads) = feature_loss_with_grad(&target, &rec_feats)?;
        let kl = kl_divergence(&fwd.code.mu, &fwd.code.logvar)?;
        let d_rec = extractor.backward_input(&rec_feats, &cache, grads);
        self.backward(&fwd, &d_rec);
        Ok(LossBreakdown::combine(feature, kl, self.config.kl_weight))
    }

    /// Training-mode loss without touching gradients (batch-norm running
    /// statistics are still updated).
    pub fn train_loss(
        &mut self,
        x: &Tensor<F>,
        eps: &Tensor<F>,
        extractor: &FeatureExtractor<F>,
    ) -> Result<LossBreakdown> {
        let fwd = self.forward_train(x, eps)?;
        let feature = crate::loss::feature_loss_from_stacks(
            &extractor.extract(x)?,
            &extractor.extract(&fwd.reconstruction)?,
        )?;
        let kl = kl_divergence(&fwd.code.mu, &fwd.code.logvar)?;
        self.clear_caches();
        Ok(LossBreakdown::combine(feature, kl, self.config.kl_weight))
    }

    /// Evaluation-mode loss on posterior-mean reconstructions.
    pub fn eval_loss(&self, x: &Tensor<F>, extractor: &FeatureExtractor<F>) -> Result<LossBreakdown> {
        let (mu, logvar) = self.encode(x)?;
        let rec = self.decode(&mu)?;
        crate::loss::total_loss(x, &rec, &mu, &logvar, extractor, self.config.kl_weight)
    }

    fn clear_caches(&mut self) {
        for b in &mut self.encoder.blocks {
            b.pre_act = None;
        }
        self.decoder.fc_out = None;
        self.decoder.output = None;
        for b in &mut self.decoder.blocks {
            b.pre_act = None;
        }
    }

    /// Parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for b in &mut self.encoder.blocks {
            out.extend(b.conv.params_mut());
            out.extend(b.bn.params_mut());
        }
        out.extend(self.encoder.mu_head.params_mut());
        out.extend(self.encoder.logvar_head.params_mut());
        out.extend(self.decoder.fc.params_mut());
        for b in &mut self.decoder.blocks {
            out.extend(b.deconv.params_mut());
            out.extend(b.bn.params_mut());
        }
        out.extend(self.decoder.out.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        for b in &self.encoder.blocks {
            out.extend(b.conv.params());
            out.extend(b.bn.params());
        }
        out.extend(self.encoder.mu_head.params());
        out.extend(self.encoder.logvar_head.params());
        out.extend(self.decoder.fc.params());
        for b in &self.decoder.blocks {
            out.extend(b.deconv.params());
            out.extend(b.bn.params());
        }
        out.extend(self.decoder.out.params());
        out
    }

    pub fn buffers(&self) -> Vec<&Buffer<F>> {
        let mut out = Vec::new();
        for b in &self.encoder.blocks {
            out.extend(b.bn.buffers());
        }
        for b in &self.decoder.blocks {
            out.extend(b.bn.buffers());
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<F>> {
        let mut out = Vec::new();
        for b in &mut self.encoder.blocks {
            out.extend(b.bn.buffers_mut());
        }
        for b in &mut self.decoder.blocks {
            out.extend(b.bn.buffers_mut());
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Converts every parameter and buffer to another scalar type.
    pub fn cast<G: Real>(&self) -> Vae<G> {
        let mut out = Vae::<G>::new(self.config.clone(), 0).expect("validated config");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.iter().map(|v| G::from_f64v(v.as_f64())).collect();
        }
        for (dst, src) in out.buffers_mut().into_iter().zip(self.buffers()) {
            dst.value = src.value.iter().map(|v| G::from_f64v(v.as_f64())).collect();
        }
        out
    }
}
