//! Latent-space probes: dataset encoding, label-correlation ranking, top-k
//! selection and silhouette-based cluster separation.

use std::path::Path;

use crate::checkpoint;
use crate::dataset::{stack_images, Label, LabeledImage};
use crate::error::{arg_err, shape_err};
use crate::imaging::Image;
use crate::nn::Tensor;
use crate::umap::Embedding2D;
use crate::vae::Vae;
use crate::{Error, Result};

/// Top-k ratios `k / nl` used for the cluster plots: 10/128, 50/128 and all
/// features.
pub const PAPER_TOP_K_RATIOS: [f64; 3] = [10.0 / 128.0, 50.0 / 128.0, 1.0];

const ENCODE_CHUNK: usize = 32;

/// `N x nl` posterior means with labels and ids, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMatrix {
    ids: Vec<String>,
    labels: Vec<Label>,
    cols: usize,
    data: Vec<f64>,
}

impl LatentMatrix {
    pub fn new(ids: Vec<String>, labels: Vec<Label>, cols: usize, data: Vec<f64>) -> Result<Self> {
        if ids.len() != labels.len() {
            return shape_err(format!("{} ids but {} labels", ids.len(), labels.len()));
        }
        if cols == 0 || data.len() != labels.len() * cols {
            return shape_err(format!("{} values for {} rows of {cols}", data.len(), labels.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return arg_err("latent matrix contains non-finite values");
        }
        Ok(Self {
            ids,
            labels,
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn label_values(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.as_u8() as f64).collect()
    }

    /// Same rows with labels replaced.
    pub fn with_labels(&self, labels: Vec<Label>) -> Result<Self> {
        Self::new(self.ids.clone(), labels, self.cols, self.data.clone())
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            cols: self.cols,
            data: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
        }
    }

    /// Header `id,label,f0,...,f{nl-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.cols).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for i in 0..self.rows() {
            let mut rec = vec![self.ids[i].clone(), self.labels[i].to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Ingestion {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
            return Err(bad("expected header id,label,f0,...".into()));
        }
        let cols = header.len() - 2;
        let (mut ids, mut labels, mut data) = (Vec::new(), Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            ids.push(rec[0].to_string());
            labels.push(parse_label(&rec[1]).ok_or_else(|| bad(format!("bad label {:?}", &rec[1])))?);
            for v in rec.iter().skip(2) {
                data.push(v.parse::<f64>().map_err(|e| bad(format!("{v:?}: {e}")))?);
            }
        }
        Self::new(ids, labels, cols, data)
    }
}

pub(crate) fn parse_label(s: &str) -> Option<Label> {
    s.parse::<u8>().ok().and_then(Label::from_u8)
}

/// Posterior means for every image, in input order.
pub fn encode_with(model: &Vae<f32>, items: &[LabeledImage]) -> Result<LatentMatrix> {
    let nl = model.latent_size();
    let mut data = Vec::with_capacity(items.len() * nl);
    for chunk in items.chunks(ENCODE_CHUNK) {
        let imgs: Vec<&Image> = chunk.iter().map(|i| &i.image).collect();
        let x: Tensor<f32> = stack_images(&imgs)?;
        let (mu, _) = model.encode(&x)?;
        data.extend(mu.data().iter().map(|&v| v as f64));
    }
    LatentMatrix::new(
        items.iter().map(|i| i.id.clone()).collect(),
        items.iter().map(|i| i.label).collect(),
        nl,
        data,
    )
}

pub fn encode_dataset(checkpoint_path: &Path, items: &[LabeledImage]) -> Result<LatentMatrix> {
    let (model, _) = checkpoint::load::<f32>(checkpoint_path)?;
    encode_with(&model, items)
}

/// `(feature index, |r|)` sorted by non-increasing magnitude, lower index
/// first on ties.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRanking {
    pub entries: Vec<(usize, f64)>,
}

impl FeatureRanking {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rank", "feature", "abs_correlation"])?;
        for (rank, (f, r)) in self.entries.iter().enumerate() {
            w.write_record([rank.to_string(), f.to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn require_both_classes(labels: &[Label]) -> Result<()> {
    let pos = labels.iter().filter(|l| **l == Label::Glaucoma).count();
    if pos == 0 || pos == labels.len() {
        return arg_err("both classes must be present");
    }
    Ok(())
}

/// Pearson correlation of `x` with `y`; 0 when either has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Ranks features by absolute point-biserial correlation with the label.
pub fn rank_features(latents: &LatentMatrix) -> Result<FeatureRanking> {
    require_both_classes(latents.labels())?;
    let y = latents.label_values();
    let mut entries: Vec<(usize, f64)> = (0..latents.cols())
        .map(|j| (j, pearson(&latents.column(j), &y).abs()))
        .collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(FeatureRanking { entries })
}

/// The `k` highest-ranked columns, in rank order.
pub fn select_top_k(latents: &LatentMatrix, ranking: &FeatureRanking, k: usize) -> Result<LatentMatrix> {
    if k == 0 || k > latents.cols() {
        return arg_err(format!("k must be in 1..={}, got {k}", latents.cols()));
    }
    if ranking.entries.len() != latents.cols() {
        return shape_err("ranking does not match the latent width");
    }
    let cols: Vec<usize> = ranking.entries[..k].iter().map(|e| e.0).collect();
    let data = (0..latents.rows())
        .flat_map(|i| {
            let row = latents.row(i);
            cols.iter().map(move |&j| row[j])
        })
        .collect();
    LatentMatrix::new(latents.ids.clone(), latents.labels.clone(), k, data)
}

/// `k = round(ratio * nl)`, at least 1 and at most `nl`.
pub fn top_k_for_ratio(nl: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return arg_err(format!("top-k ratio must be in (0, 1], got {ratio}"));
    }
    Ok(((ratio * nl as f64).round() as usize).clamp(1, nl))
}

/// Mean silhouette coefficient of the label partition over `points`
/// (`n x dim`, row-major), Euclidean distance. Points in a singleton class
/// score 0.
pub fn silhouette(points: &[f64], dim: usize, labels: &[Label]) -> Result<f64> {
    if dim == 0 || points.len() != labels.len() * dim {
        return shape_err("points do not match labels");
    }
    require_both_classes(labels)?;
    let n = labels.len();
    let first = &points[..dim];
    if (1..n).all(|i| &points[i * dim..(i + 1) * dim] == first) {
        return arg_err("silhouette is undefined when all points coincide");
    }
    let counts = [
        labels.iter().filter(|l| **l == Label::Normal).count(),
        labels.iter().filter(|l| **l == Label::Glaucoma).count(),
    ];
    let scores = crate::par::map_range(n, |i| {
        let pi = &points[i * dim..(i + 1) * dim];
        let mut sums = [0.0f64; 2];
        for j in 0..n {
            if j != i {
                let pj = &points[j * dim..(j + 1) * dim];
                let d2: f64 = pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
                sums[labels[j].as_u8() as usize] += d2.sqrt();
            }
        }
        let own = labels[i].as_u8() as usize;
        if counts[own] < 2 {
            return 0.0;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = sums[1 - own] / counts[1 - own] as f64;
        let m = a.max(b);
        if m > 0.0 {
            (b - a) / m
        } else {
            0.0
        }
    });
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Silhouette of the label partition in a 2-D embedding.
pub fn cluster_separation(embedding: &Embedding2D, labels: &[Label]) -> Result<f64> {
    let flat: Vec<f64> = embedding.coords.iter().flat_map(|p| p.iter().copied()).collect();
    silhouette(&flat, 2, labels)
}
