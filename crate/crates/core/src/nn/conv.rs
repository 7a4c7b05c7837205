use rand::Rng;

use super::{accumulate_ordered, fan_in_uniform, matmul, Param, Real, Tensor, GRAD_CHUNK};
use crate::par;

/// Output length of a convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Unfolds one `C x H x W` image into a `(C*k*k) x (Ho*Wo)` column matrix.
pub fn im2col<F: Real>(
    input: &[F],
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<F> {
    let ho = conv_out_len(h, kernel, stride, pad);
    let wo = conv_out_len(w, kernel, stride, pad);
    let mut cols = vec![F::zero(); c * kernel * kernel * ho * wo];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ((ch * kernel + ky) * kernel + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `C x H x W` image,
/// accumulating overlapping contributions into `out`.
pub fn col2im<F: Real>(
    cols: &[F],
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
    out: &mut [F],
) {
    let ho = conv_out_len(h, kernel, stride, pad);
    let wo = conv_out_len(w, kernel, stride, pad);
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ((ch * kernel + ky) * kernel + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += *s;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<F: Real>(out: &mut [F], bias: &[F], plane: usize) {
    for (ch, b) in bias.iter().enumerate() {
        for v in &mut out[ch * plane..(ch + 1) * plane] {
            *v += *b;
        }
    }
}

fn bias_grad<F: Real>(dy: &[F], channels: usize, plane: usize, into: &mut [F]) {
    for ch in 0..channels {
        into[ch] += dy[ch * plane..(ch + 1) * plane].iter().copied().sum::<F>();
    }
}

/// 2-D convolution, weight layout `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor<F>>,
}

impl<F: Real> Conv2d<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let n = out_channels * fan_in;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                fan_in_uniform(n, fan_in, rng),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![out_channels],
                fan_in_uniform(out_channels, fan_in, rng),
            ),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            input: None,
        }
    }

    pub fn out_shape(&self, shape: [usize; 4]) -> [usize; 4] {
        [
            shape[0],
            self.out_channels,
            conv_out_len(shape[2], self.kernel, self.stride, self.pad),
            conv_out_len(shape[3], self.kernel, self.stride, self.pad),
        ]
    }

    pub fn forward_eval(&self, x: &Tensor<F>) -> Tensor<F> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "{}: channel mismatch", self.weight.name);
        let out = self.out_shape(x.shape());
        let plane = out[2] * out[3];
        let kk = c * self.kernel * self.kernel;
        let items = par::map_range(n, |i| {
            let cols = im2col(x.item(i), (c, h, w), self.kernel, self.stride, self.pad);
            let mut y = vec![F::zero(); self.out_channels * plane];
            matmul(
                self.out_channels,
                kk,
                plane,
                &self.weight.value,
                false,
                &cols,
                false,
                F::zero(),
                &mut y,
            );
            add_bias(&mut y, &self.bias.value, plane);
            y
        });
        Tensor::from_vec(out, items.concat())
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let y = self.forward_eval(x);
        self.input = Some(x.clone());
        y
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let x = self.input.take().expect("backward without forward_train");
        let (dx, dw, db) = self.backward_impl(&x, dy);
        accumulate_ordered(&mut self.weight.grad, &dw);
        accumulate_ordered(&mut self.bias.grad, &db);
        dx
    }

    /// Input gradient only; weights are treated as constants.
    pub fn backward_input(&self, in_shape: [usize; 4], dy: &Tensor<F>) -> Tensor<F> {
        let [n, c, h, w] = in_shape;
        let out = self.out_shape(in_shape);
        let plane = out[2] * out[3];
        let kk = c * self.kernel * self.kernel;
        let items = par::map_range(n, |i| {
            let mut dcols = vec![F::zero(); kk * plane];
            matmul(
                kk,
                self.out_channels,
                plane,
                &self.weight.value,
                true,
                dy.item(i),
                false,
                F::zero(),
                &mut dcols,
            );
            let mut dx = vec![F::zero(); c * h * w];
            col2im(&dcols, (c, h, w), self.kernel, self.stride, self.pad, &mut dx);
            dx
        });
        Tensor::from_vec(in_shape, items.concat())
    }

    #[allow(clippy::type_complexity)]
    fn backward_impl(
        &self,
        x: &Tensor<F>,
        dy: &Tensor<F>,
    ) -> (Tensor<F>, Vec<Vec<F>>, Vec<Vec<F>>) {
        let [n, c, h, w] = x.shape();
        let out = self.out_shape(x.shape());
        assert_eq!(dy.shape(), out, "{}: gradient shape", self.weight.name);
        let plane = out[2] * out[3];
        let kk = c * self.kernel * self.kernel;
        let chunks = n.div_ceil(GRAD_CHUNK);
        let parts = par::map_range(chunks, |ci| {
            let mut dw = vec![F::zero(); self.weight.len()];
            let mut db = vec![F::zero(); self.out_channels];
            let mut dxs = Vec::new();
            for i in ci * GRAD_CHUNK..((ci + 1) * GRAD_CHUNK).min(n) {
                let g = dy.item(i);
                let cols = im2col(x.item(i), (c, h, w), self.kernel, self.stride, self.pad);
                matmul(self.out_channels, plane, kk, g, false, &cols, true, F::one(), &mut dw);
                bias_grad(g, self.out_channels, plane, &mut db);
                let mut dcols = vec![F::zero(); kk * plane];
                matmul(
                    kk,
                    self.out_channels,
                    plane,
                    &self.weight.value,
                    true,
                    g,
                    false,
                    F::zero(),
                    &mut dcols,
                );
                let mut dx = vec![F::zero(); c * h * w];
                col2im(&dcols, (c, h, w), self.kernel, self.stride, self.pad, &mut dx);
                dxs.push(dx);
            }
            (dxs, dw, db)
        });
        let mut dx = Vec::with_capacity(n * c * h * w);
        let mut dws = Vec::with_capacity(chunks);
        let mut dbs = Vec::with_capacity(chunks);
        for (dxs, dw, db) in parts {
            dxs.into_iter().for_each(|d| dx.extend(d));
            dws.push(dw);
            dbs.push(db);
        }
        (Tensor::from_vec(x.shape(), dx), dws, dbs)
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<F>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Transposed convolution, weight layout `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    input: Option<Tensor<F>>,
}

impl<F: Real> ConvTranspose2d<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // Each output pixel receives roughly in * k^2 / stride^2 terms.
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                vec![in_channels, out_channels, kernel, kernel],
                fan_in_uniform(in_channels * out_channels * kernel * kernel, fan_in, rng),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                vec![out_channels],
                fan_in_uniform(out_channels, fan_in, rng),
            ),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            input: None,
        }
    }

    pub fn out_shape(&self, shape: [usize; 4]) -> [usize; 4] {
        let len = |l: usize| (l - 1) * self.stride + self.kernel - 2 * self.pad;
        [shape[0], self.out_channels, len(shape[2]), len(shape[3])]
    }

    pub fn forward_eval(&self, x: &Tensor<F>) -> Tensor<F> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "{}: channel mismatch", self.weight.name);
        let out = self.out_shape(x.shape());
        let (oc, oh, ow) = (out[1], out[2], out[3]);
        let okk = oc * self.kernel * self.kernel;
        let items = par::map_range(n, |i| {
            let mut cols = vec![F::zero(); okk * h * w];
            matmul(
                okk,
                c,
                h * w,
                &self.weight.value,
                true,
                x.item(i),
                false,
                F::zero(),
                &mut cols,
            );
            let mut y = vec![F::zero(); oc * oh * ow];
            col2im(&cols, (oc, oh, ow), self.kernel, self.stride, self.pad, &mut y);
            add_bias(&mut y, &self.bias.value, oh * ow);
            y
        });
        Tensor::from_vec(out, items.concat())
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Tensor<F> {
        let y = self.forward_eval(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let x = self.input.take().expect("backward without forward_train");
        let [n, c, h, w] = x.shape();
        let out = self.out_shape(x.shape());
        assert_eq!(dy.shape(), out, "{}: gradient shape", self.weight.name);
        let (oc, oh, ow) = (out[1], out[2], out[3]);
        let okk = oc * self.kernel * self.kernel;
        let chunks = n.div_ceil(GRAD_CHUNK);
        let parts = par::map_range(chunks, |ci| {
            let mut dw = vec![F::zero(); self.weight.len()];
            let mut db = vec![F::zero(); oc];
            let mut dxs = Vec::new();
            for i in ci * GRAD_CHUNK..((ci + 1) * GRAD_CHUNK).min(n) {
                let g = dy.item(i);
                let gcols = im2col(g, (oc, oh, ow), self.kernel, self.stride, self.pad);
                matmul(c, h * w, okk, x.item(i), false, &gcols, true, F::one(), &mut dw);
                bias_grad(g, oc, oh * ow, &mut db);
                let mut dx = vec![F::zero(); c * h * w];
                matmul(
                    c,
                    okk,
                    h * w,
                    &self.weight.value,
                    false,
                    &gcols,
                    false,
                    F::zero(),
                    &mut dx,
                );
                dxs.push(dx);
            }
            (dxs, dw, db)
        });
        let mut dx = Vec::with_capacity(n * c * h * w);
        for (dxs, dw, db) in parts {
            dxs.into_iter().for_each(|d| dx.extend(d));
            accumulate_ordered(&mut self.weight.grad, &[dw]);
            accumulate_ordered(&mut self.bias.grad, &[db]);
        }
        Tensor::from_vec(x.shape(), dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<F>; 2] {
        [&self.weight, &self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn conv_naive(
        x: &[f64],
        (c, h, w): (usize, usize, usize),
        wt: &[f64],
        oc: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let ho = conv_out_len(h, k, s, p);
        let wo = conv_out_len(w, k, s, p);
        let mut y = vec![0.0; oc * ho * wo];
        for o in 0..oc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ch * h + iy as usize) * w + ix as usize]
                                        * wt[((o * c + ch) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    y[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = crate::rng::stream(1, &[]);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 4, 2, 1, &mut rng);
        conv.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let x: Vec<f64> = (0..2 * 2 * 8 * 6).map(|i| ((i * 37 % 11) as f64) / 7.0 - 0.5).collect();
        let t = Tensor::from_vec([2, 2, 8, 6], x.clone());
        let y = conv.forward_eval(&t);
        assert_eq!(y.shape(), [2, 3, 4, 3]);
        for i in 0..2 {
            let want = conv_naive(&x[i * 96..(i + 1) * 96], (2, 8, 6), &conv.weight.value, 3, 4, 2, 1);
            for (a, b) in y.item(i).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let dims = (2, 5, 7);
        let x: Vec<f64> = (0..70).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, dims, 3, 2, 1);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut back = vec![0.0; 70];
        col2im(&y, dims, 3, 2, 1, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // With shared weights, <conv(x), y> == <x, convT(y)> when biases are 0.
        let mut rng = crate::rng::stream(2, &[]);
        let mut conv = Conv2d::<f64>::new("c", 3, 2, 4, 2, 1, &mut rng);
        let mut convt = ConvTranspose2d::<f64>::new("t", 2, 3, 4, 2, 1, &mut rng);
        conv.bias.value.iter_mut().for_each(|b| *b = 0.0);
        convt.bias.value.iter_mut().for_each(|b| *b = 0.0);
        convt.weight.value = conv.weight.value.clone();
        let x = Tensor::from_vec([1, 3, 8, 8], (0..192).map(|i| (i as f64 * 0.3).sin()).collect());
        let y = Tensor::from_vec([1, 2, 4, 4], (0..32).map(|i| (i as f64 * 0.7).cos()).collect());
        let cx = conv.forward_eval(&x);
        let ty = convt.forward_eval(&y);
        assert_eq!(ty.shape(), [1, 3, 8, 8]);
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
