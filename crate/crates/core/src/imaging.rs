//! Image primitives: the RGB [`Image`] type, bilinear resizing, horizontal
//! flips, structural similarity and SSIM-derived difference masks, plus PNG
//! input/output.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{arg_err, shape_err};
use crate::Result;

pub const CHANNELS: usize = 3;

/// Side length of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of pixel values.
const SSIM_RANGE: f64 = 1.0;

/// Three-channel image stored channel-major (`c, y, x`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from channel-major data, validating the value range.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return arg_err(format!("image dimensions must be positive, got {height}x{width}"));
        }
        if data.len() != CHANNELS * height * width {
            return shape_err(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                CHANNELS * height * width,
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return arg_err(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`; NaN becomes 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; CHANNELS * height * width])
    }

    /// Evaluates `f(channel, y, x)` for every pixel; values are clamped.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Single-channel boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Dimensionless similarity in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct SimilarityScore(pub f64);

impl SimilarityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Bilinear resize with pixel-centre alignment. Same-size requests return an
/// exact copy.
pub fn resize(img: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h == 0 || target_w == 0 {
        return arg_err(format!("resize target must be positive, got {target_h}x{target_w}"));
    }
    if target_h == img.height && target_w == img.width {
        return Ok(img.clone());
    }
    let (h, w) = (img.height, img.width);
    let sy = h as f64 / target_h as f64;
    let sx = w as f64 / target_w as f64;
    let taps = |i: usize, scale: f64, len: usize| -> (usize, usize, f32) {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let rows: Vec<_> = (0..target_h).map(|y| taps(y, sy, h)).collect();
    let cols: Vec<_> = (0..target_w).map(|x| taps(x, sx, w)).collect();
    let mut data = Vec::with_capacity(CHANNELS * target_h * target_w);
    for c in 0..CHANNELS {
        let plane = img.channel(c);
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Image::from_clamped(target_h, target_w, data)
}

/// Reverses the column order of every channel.
pub fn horizontal_flip(img: &Image) -> Image {
    let mut data = img.data.clone();
    for row in data.chunks_mut(img.width) {
        row.reverse();
    }
    Image {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Summed-area table with a zero border row and column.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, value: impl Fn(usize) -> f64) -> Self {
        let stride = w + 1;
        let mut sums = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(y * w + x);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    /// Sum over rows `y0..y1` and columns `x0..x1` (half-open).
    #[inline]
    fn rect(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
        let s = self.w + 1;
        self.sums[y1 * s + x1] - self.sums[y0 * s + x1] - self.sums[y1 * s + x0]
            + self.sums[y0 * s + x0]
    }
}

/// Per-pixel local SSIM, averaged over channels. Windows are clipped at the
/// image border.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    if !a.same_shape(b) {
        return shape_err(format!(
            "ssim inputs differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        ));
    }
    let (h, w) = (a.height, a.width);
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let r = SSIM_WINDOW / 2;
    let mut map = vec![0.0; h * w];
    for c in 0..CHANNELS {
        let pa = a.channel(c);
        let pb = b.channel(c);
        let sa = Integral::new(h, w, |i| pa[i] as f64);
        let sb = Integral::new(h, w, |i| pb[i] as f64);
        let saa = Integral::new(h, w, |i| (pa[i] as f64) * (pa[i] as f64));
        let sbb = Integral::new(h, w, |i| (pb[i] as f64) * (pb[i] as f64));
        let sab = Integral::new(h, w, |i| (pa[i] as f64) * (pb[i] as f64));
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                let mu_a = sa.rect(y0, y1, x0, x1) / n;
                let mu_b = sb.rect(y0, y1, x0, x1) / n;
                let var_a = saa.rect(y0, y1, x0, x1) / n - mu_a * mu_a;
                let var_b = sbb.rect(y0, y1, x0, x1) / n - mu_b * mu_b;
                let cov = sab.rect(y0, y1, x0, x1) / n - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                map[y * w + x] += num / den;
            }
        }
    }
    for v in map.iter_mut() {
        *v /= CHANNELS as f64;
    }
    Ok(map)
}

/// Mean SSIM with a 7x7 uniform window over positions where the window fits
/// entirely inside the image (all positions for images smaller than that).
pub fn ssim(a: &Image, b: &Image) -> Result<SimilarityScore> {
    let map = ssim_map(a, b)?;
    let (h, w) = (a.height, a.width);
    let r = SSIM_WINDOW / 2;
    let (ys, xs) = if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        (r..h - r, r..w - r)
    } else {
        (0..h, 0..w)
    };
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in ys {
        for x in xs.clone() {
            sum += map[y * w + x];
            n += 1;
        }
    }
    Ok(SimilarityScore((sum / n as f64).min(1.0)))
}

/// Marks pixels whose local dissimilarity `1 - ssim` exceeds `threshold`.
pub fn diff_mask(a: &Image, b: &Image, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return arg_err(format!("diff_mask threshold must lie in (0, 1), got {threshold}"));
    }
    let map = ssim_map(a, b)?;
    Ok(BinaryMask {
        height: a.height,
        width: a.width,
        bits: map.iter().map(|s| 1.0 - s > threshold).collect(),
    })
}

/// 8-bit quantisation used for every PNG we write.
#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Reads an 8- or 16-bit PNG (gray, gray+alpha, RGB, RGBA or palette) into an
/// RGB image. Alpha is discarded.
pub fn load_png(path: &Path) -> Result<Image> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => 3,
    };
    let mut data = vec![0.0f32; CHANNELS * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * stride..];
            for c in 0..CHANNELS {
                let v = if stride < 3 { px[0] } else { px[c] };
                data[(c * h + y) * w + x] = v as f32 / 255.0;
            }
        }
    }
    Image::new(h, w, data)
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let mut rgb = Vec::with_capacity(h * w * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                rgb.push(to_u8(img.get(c, y, x)));
            }
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &rgb, &[])
}

/// Writes a mask as a 1-bit grayscale PNG (set pixels white).
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let row_bytes = mask.width.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_png(
        path,
        mask.width,
        mask.height,
        png::ColorType::Grayscale,
        png::BitDepth::One,
        &packed,
        &[],
    )
}

pub(crate) fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
    text: &[(&str, String)],
) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    for (k, v) in text {
        encoder.add_text_chunk(k.to_string(), v.clone())?;
    }
    let mut writer = encoder.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}
