//! Labeled image data: a procedural optic-disc generator standing in for
//! clinical photographs, PNG directory ingestion, stratified splits,
//! epoch batching and flip augmentation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::arg_err;
use crate::imaging::{self, horizontal_flip, Image, CHANNELS};
use crate::nn::{Real, Tensor};
use crate::rng::{self, tag};
use crate::{par, Error, Result};

/// Side length every ingested image is resized to.
pub const DEFAULT_IMAGE_SIZE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Normal = 0,
    Glaucoma = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Normal),
            1 => Some(Label::Glaucoma),
            _ => None,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Label::from_u8(v).ok_or_else(|| format!("label must be 0 or 1, got {v}"))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: Label,
    pub id: String,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    /// Optional held-out set disjoint from both; empty unless requested.
    pub test: Vec<LabeledImage>,
    pub split_ratio: f64,
}

/// Rendering parameters for one synthetic optic-disc image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    /// Disc radius as a fraction of the image width.
    pub disc_radius: f64,
    pub cup_to_disc: f64,
    pub vessel_count: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_level: f64,
    pub label_threshold: f64,
    pub image_size: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            disc_radius: 0.2,
            cup_to_disc: 0.3,
            vessel_count: 8,
            noise_level: 0.02,
            label_threshold: 0.6,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.disc_radius > 0.0 && self.disc_radius < 0.5) {
            return arg_err(format!("disc_radius must be in (0, 0.5), got {}", self.disc_radius));
        }
        if !(0.0..=1.0).contains(&self.cup_to_disc) {
            return arg_err(format!("cup_to_disc must be in [0, 1], got {}", self.cup_to_disc));
        }
        if !(0.0..=1.0).contains(&self.label_threshold) {
            return arg_err(format!("label_threshold must be in [0, 1], got {}", self.label_threshold));
        }
        if !(self.noise_level >= 0.0 && self.noise_level < 1.0) {
            return arg_err(format!("noise_level must be in [0, 1), got {}", self.noise_level));
        }
        if self.image_size < 8 {
            return arg_err(format!("image_size must be at least 8, got {}", self.image_size));
        }
        Ok(())
    }

    pub fn label(&self) -> Label {
        if self.cup_to_disc >= self.label_threshold {
            Label::Glaucoma
        } else {
            Label::Normal
        }
    }
}

#[inline]
fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

struct Vessel {
    points: Vec<(f64, f64)>,
    widths: Vec<f64>,
    bbox: (f64, f64, f64, f64),
}

/// Renders a fundus-like optic disc image: orange background with
/// low-frequency texture and vignetting, a bright disc, a brighter cup of
/// radius `cup_to_disc * disc_radius`, dark tapering vessels leaving the
/// disc, and Gaussian pixel noise. Deterministic in `(params, seed)`.
pub fn generate_fundus(params: &SyntheticParams, seed: u64) -> Result<LabeledImage> {
    params.validate()?;
    let mut rng = rng::stream(seed, &[tag("fundus")]);
    let size = params.image_size;

    let cx = 0.5 + rng.gen_range(-0.06..0.06);
    let cy = 0.5 + rng.gen_range(-0.06..0.06);
    let rx = params.disc_radius * rng.gen_range(0.92..1.08);
    let ry = rx * rng.gen_range(0.92..1.08);
    let cup = params.cup_to_disc;
    let (cup_dx, cup_dy) = (rng.gen_range(-0.08..0.08) * rx, rng.gen_range(-0.08..0.08) * ry);
    let brightness = rng.gen_range(0.85..1.1);
    let tint = [
        rng.gen_range(0.9..1.05),
        rng.gen_range(0.9..1.1),
        rng.gen_range(0.85..1.15),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(2.0..7.0),
                rng.gen_range(2.0..7.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.01..0.035),
            )
        })
        .collect();

    let base_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let vessels: Vec<Vessel> = (0..params.vessel_count)
        .map(|k| {
            let mut angle = base_angle
                + std::f64::consts::TAU * k as f64 / params.vessel_count.max(1) as f64
                + rng.gen_range(-0.3..0.3);
            let bend = rng.gen_range(-0.12..0.12);
            let length = rng.gen_range(0.35..0.7);
            let w0 = rng.gen_range(0.016..0.024);
            let steps = 14;
            let mut p = (cx + 0.15 * rx * angle.cos(), cy + 0.15 * ry * angle.sin());
            let mut points = vec![p];
            let mut widths = vec![w0];
            for s in 1..=steps {
                angle += bend + rng.gen_range(-0.05..0.05);
                let step = length / steps as f64;
                p = (p.0 + step * angle.cos(), p.1 + step * angle.sin());
                points.push(p);
                widths.push(w0 * (1.0 - 0.6 * s as f64 / steps as f64));
            }
            let pad = w0 * 2.0;
            let bbox = points.iter().fold(
                (f64::MAX, f64::MAX, f64::MIN, f64::MIN),
                |(a, b, c, d), q| (a.min(q.0 - pad), b.min(q.1 - pad), c.max(q.0 + pad), d.max(q.1 + pad)),
            );
            Vessel {
                points,
                widths,
                bbox,
            }
        })
        .collect();

    let noise = Normal::new(0.0, params.noise_level.max(1e-12)).expect("valid sigma");
    let background = [0.78, 0.36, 0.2];
    let disc_color = [0.96, 0.74, 0.48];
    let cup_color = [1.0, 0.94, 0.8];
    let vessel_color = [0.45, 0.1, 0.08];
    let edge = 0.015;

    let mut pixels = vec![0.0f32; CHANNELS * size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
            let texture: f64 = waves
                .iter()
                .map(|(fx, fy, ph, amp)| amp * (fx * u * std::f64::consts::TAU + fy * v * 3.7 + ph).sin())
                .sum();
            let shade = brightness * (1.0 - 0.9 * r2) + texture;
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = background[c] * shade * tint[c];
            }

            let disc_r = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
            let disc_w = 1.0 - smoothstep(1.0 - edge / rx, 1.0 + edge / rx, disc_r);
            let cup_r = if cup > 0.0 {
                (((u - cx - cup_dx) / (cup * rx)).powi(2) + ((v - cy - cup_dy) / (cup * ry)).powi(2)).sqrt()
            } else {
                f64::INFINITY
            };
            let cup_w = if cup > 0.0 {
                (1.0 - smoothstep(1.0 - 1.5 * edge / (cup * rx), 1.0 + 1.5 * edge / (cup * rx), cup_r)) * disc_w
            } else {
                0.0
            };
            for c in 0..3 {
                rgb[c] = rgb[c] * (1.0 - disc_w) + disc_color[c] * brightness * disc_w;
                rgb[c] = rgb[c] * (1.0 - cup_w) + cup_color[c] * brightness * cup_w;
            }

            let mut vessel_w: f64 = 0.0;
            for vs in &vessels {
                let (x0, y0, x1, y1) = vs.bbox;
                if u < x0 || u > x1 || v < y0 || v > y1 {
                    continue;
                }
                for s in 0..vs.points.len() - 1 {
                    let d = segment_distance((u, v), vs.points[s], vs.points[s + 1]);
                    let w = vs.widths[s];
                    vessel_w = vessel_w.max(1.0 - smoothstep(0.5 * w, w, d));
                }
            }
            let vessel_alpha = 0.8 * vessel_w * (1.0 - 0.8 * cup_w);
            for c in 0..3 {
                rgb[c] = rgb[c] * (1.0 - vessel_alpha) + vessel_color[c] * vessel_alpha;
            }

            for (c, val) in rgb.iter().enumerate() {
                let n = if params.noise_level > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                pixels[(c * size + y) * size + x] = (val + n) as f32;
            }
        }
    }
    Ok(LabeledImage {
        image: Image::from_clamped(size, size, pixels)?,
        label: params.label(),
        id: format!("synthetic-{seed:016x}"),
    })
}

/// How cup-to-disc ratios are drawn per class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CupSampling {
    /// Normal in `[0.1, 0.5]`, glaucoma in `[0.6, 0.95]`.
    #[default]
    Separated,
    /// Both classes within 0.15 of the label threshold, on either side.
    Adjacent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetConfig {
    pub n_normal: usize,
    pub n_glaucoma: usize,
    pub split_ratio: f64,
    /// Fraction of each class held out as a disjoint test set (0 disables).
    pub test_ratio: f64,
    pub sampling: CupSampling,
    pub params: SyntheticParams,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            n_normal: 250,
            n_glaucoma: 250,
            split_ratio: 0.2,
            test_ratio: 0.0,
            sampling: CupSampling::Separated,
            params: SyntheticParams::default(),
        }
    }
}

impl SyntheticDatasetConfig {
    /// Class counts of the clinical training pool.
    pub fn paper_counts() -> Self {
        Self {
            n_normal: 3158,
            n_glaucoma: 3744,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_normal == 0 || self.n_glaucoma == 0 {
            return arg_err("both class counts must be at least 1");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return arg_err(format!("split_ratio must be in (0, 1), got {}", self.split_ratio));
        }
        if !(0.0..1.0).contains(&self.test_ratio) || self.split_ratio + self.test_ratio >= 1.0 {
            return arg_err("test_ratio must be in [0, 1) and leave a training portion");
        }
        self.params.validate()
    }

    fn cup_range(&self, label: Label) -> (f64, f64) {
        let t = self.params.label_threshold;
        match (self.sampling, label) {
            (CupSampling::Separated, Label::Normal) => (0.1, 0.5),
            (CupSampling::Separated, Label::Glaucoma) => (0.6, 0.95),
            (CupSampling::Adjacent, Label::Normal) => ((t - 0.15).max(0.0), t),
            (CupSampling::Adjacent, Label::Glaucoma) => (t, (t + 0.15).min(1.0)),
        }
    }

    /// Renders every image (class order: normals, then glaucoma) without
    /// splitting.
    pub fn generate(&self, seed: u64) -> Result<Vec<LabeledImage>> {
        self.validate()?;
        let (nl, ng) = (self.n_normal, self.n_glaucoma);
        let (nt, gt) = (self.cup_range(Label::Normal), self.cup_range(Label::Glaucoma));
        if nt.0 >= self.params.label_threshold || gt.1 < self.params.label_threshold {
            return arg_err("cup sampling ranges are inconsistent with label_threshold");
        }
        let results = par::map_range(nl + ng, |i| {
            let (label, range, k) = if i < nl {
                (Label::Normal, nt, i)
            } else {
                (Label::Glaucoma, gt, i - nl)
            };
            let mut r = rng::stream(seed, &[tag("cup"), i as u64]);
            // Half-open draw; the glaucoma range must include the threshold.
            let cup = r.gen_range(range.0..range.1);
            let params = SyntheticParams {
                cup_to_disc: cup,
                ..self.params.clone()
            };
            let mut item = generate_fundus(&params, rng::derive_seed(seed, &[tag("image"), i as u64]))?;
            debug_assert_eq!(item.label, label);
            item.id = match label {
                Label::Normal => format!("normal_{k:05}"),
                Label::Glaucoma => format!("glaucoma_{k:05}"),
            };
            Ok(item)
        });
        results.into_iter().collect()
    }
}

/// Stratified split indices. Within each class, `round(n_c * ratio)` items
/// go to the held-out side; both outputs are sorted by original index.
pub fn stratified_split(labels: &[Label], ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(*l).or_default().push(i);
    }
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for (label, mut idx) in by_class {
        idx.shuffle(&mut rng::stream(seed, &[tag("split"), label.as_u8() as u64]));
        let n_held = (idx.len() as f64 * ratio).round() as usize;
        held.extend_from_slice(&idx[..n_held]);
        keep.extend_from_slice(&idx[n_held..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    (keep, held)
}

/// Splits items into train/validation (and optionally test) stratified by
/// label.
pub fn split_dataset(items: Vec<LabeledImage>, split_ratio: f64, test_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return arg_err(format!("split_ratio must be in (0, 1), got {split_ratio}"));
    }
    if !(0.0..1.0).contains(&test_ratio) || split_ratio + test_ratio >= 1.0 {
        return arg_err("test_ratio must leave a training portion");
    }
    let labels: Vec<Label> = items.iter().map(|i| i.label).collect();
    let (rest, test_idx) = if test_ratio > 0.0 {
        stratified_split(&labels, test_ratio, rng::derive_seed(seed, &[tag("test")]))
    } else {
        ((0..items.len()).collect(), vec![])
    };
    let rest_labels: Vec<Label> = rest.iter().map(|&i| labels[i]).collect();
    // Validation share is relative to the whole set, not to what remains.
    let val_ratio = split_ratio / (1.0 - test_ratio);
    let (train_pos, val_pos) = stratified_split(&rest_labels, val_ratio, seed);
    let mut slots: Vec<Option<LabeledImage>> = items.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("index used once");
    let train = train_pos.iter().map(|&p| take(rest[p])).collect();
    let validation = val_pos.iter().map(|&p| take(rest[p])).collect();
    let test = test_idx.iter().map(|&i| take(i)).collect();
    Ok(DatasetSplit {
        train,
        validation,
        test,
        split_ratio,
    })
}

pub fn build_synthetic_dataset(
    n_normal: usize,
    n_glaucoma: usize,
    split_ratio: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let config = SyntheticDatasetConfig {
        n_normal,
        n_glaucoma,
        split_ratio,
        ..Default::default()
    };
    build_synthetic_dataset_with(&config, seed)
}

pub fn build_synthetic_dataset_with(config: &SyntheticDatasetConfig, seed: u64) -> Result<DatasetSplit> {
    let items = config.generate(seed)?;
    split_dataset(items, config.split_ratio, config.test_ratio, seed)
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    filename: String,
    label: u8,
}

pub const LABELS_FILE: &str = "labels.csv";

/// Loads every file listed in `labels_file` from `dir`, resized to
/// `128 x 128`. PNGs in `dir` without a label row are rejected.
pub fn load_image_directory(dir: &Path, labels_file: &Path) -> Result<Vec<LabeledImage>> {
    load_image_directory_sized(dir, labels_file, DEFAULT_IMAGE_SIZE)
}

pub fn load_image_directory_sized(dir: &Path, labels_file: &Path, size: usize) -> Result<Vec<LabeledImage>> {
    let ingest = |path: &Path, reason: String| Error::Ingestion {
        path: path.to_path_buf(),
        reason,
    };
    if !dir.is_dir() {
        return Err(ingest(dir, "not a directory".into()));
    }
    let mut reader = csv::Reader::from_path(labels_file).map_err(|e| ingest(labels_file, e.to_string()))?;
    let mut rows: Vec<(PathBuf, Label)> = Vec::new();
    let mut listed = HashSet::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| ingest(labels_file, e.to_string()))?;
        let path = dir.join(&row.filename);
        let label = Label::from_u8(row.label)
            .ok_or_else(|| ingest(&path, format!("label must be 0 or 1, got {}", row.label)))?;
        if !path.is_file() {
            return Err(ingest(&path, "listed in labels file but missing".into()));
        }
        if !listed.insert(row.filename.clone()) {
            return Err(ingest(&path, "listed more than once".into()));
        }
        rows.push((path, label));
    }
    let mut unlabeled: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_none_or(|n| !listed.contains(n))
        })
        .collect();
    unlabeled.sort();
    if let Some(p) = unlabeled.first() {
        return Err(ingest(p, "image has no label".into()));
    }
    let loaded = par::map_slice(&rows, |(path, label)| -> Result<LabeledImage> {
        let img = imaging::load_png(path).map_err(|e| ingest(path, e.to_string()))?;
        let image = imaging::resize(&img, size, size)?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        Ok(LabeledImage {
            image,
            label: *label,
            id,
        })
    });
    loaded.into_iter().collect()
}

/// Writes `<id>.png` for each item plus a `labels.csv` in item order.
pub fn write_image_directory(items: &[LabeledImage], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let written = par::map_slice(items, |item| imaging::save_png(&item.image, &dir.join(format!("{}.png", item.id))));
    written.into_iter().collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(dir.join(LABELS_FILE))?;
    for item in items {
        w.serialize(LabelRow {
            filename: format!("{}.png", item.id),
            label: item.label.as_u8(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Flips each image independently with probability `flip_prob`. One uniform
/// draw is consumed per image regardless of the outcome.
pub fn augment(batch: &[Image], flip_prob: f64, rng: &mut impl Rng) -> Vec<Image> {
    batch
        .iter()
        .map(|img| {
            if rng.gen::<f64>() < flip_prob {
                horizontal_flip(img)
            } else {
                img.clone()
            }
        })
        .collect()
}

/// Shuffled mini-batches of indices for one epoch. The permutation depends
/// only on `(n, shuffle_seed, epoch)`; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return arg_err("batch_size must be at least 1");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(shuffle_seed, &[tag("shuffle"), epoch as u64]));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Iterator over shuffled batches of borrowed items.
pub struct Batches<'a> {
    items: &'a [LabeledImage],
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Vec<&'a LabeledImage>;

    fn next(&mut self) -> Option<Self::Item> {
        self.batches
            .next()
            .map(|b| b.into_iter().map(|i| &self.items[i]).collect())
    }
}

pub fn batches(items: &[LabeledImage], batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Batches<'_>> {
    Ok(Batches {
        items,
        batches: batch_indices(items.len(), batch_size, shuffle_seed, epoch)?.into_iter(),
    })
}

/// Packs same-sized images into an `[n, 3, H, W]` tensor.
pub fn stack_images<F: Real>(images: &[&Image]) -> Result<Tensor<F>> {
    let Some(first) = images.first() else {
        return arg_err("cannot stack an empty batch");
    };
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        if !img.same_shape(first) {
            return crate::error::shape_err("batch images differ in size");
        }
        data.extend(img.data().iter().map(|&v| F::from_f64v(v as f64)));
    }
    Ok(Tensor::from_vec([images.len(), CHANNELS, h, w], data))
}

/// Inverse of [`stack_images`] for model outputs.
pub fn unstack_images<F: Real>(t: &Tensor<F>) -> Result<Vec<Image>> {
    let [n, c, h, w] = t.shape();
    if c != CHANNELS {
        return crate::error::shape_err(format!("expected 3 channels, got {c}"));
    }
    (0..n)
        .map(|i| Image::from_clamped(h, w, t.item(i).iter().map(|v| v.as_f64() as f32).collect()))
        .collect()
}
