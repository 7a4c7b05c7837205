//! Stratified k-fold model selection, hold-out evaluation and per-size trend
//! tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::metrics::{compute_metrics, MetricsReport, METRIC_NAMES};
use super::svm::{ClassWeight, Kernel, Svc, SvcParams};
use crate::analysis::LatentMatrix;
use crate::dataset::{stratified_split, Label};
use crate::error::arg_err;
use crate::rng::{self, tag};
use crate::Result;

pub const CV_FOLDS: usize = 5;
/// Held-out fraction for the train-test evaluation.
pub const TEST_SPLIT: f64 = 0.3;

/// Column-wise standardisation fitted on training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[f64], dim: usize) -> Self {
        let n = (x.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for row in x.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in x.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        x.chunks_exact(dim)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (v - m) / s)
            })
            .collect()
    }
}

/// Fold index per sample. Each class is shuffled and dealt round-robin, so
/// fold class counts differ by at most one.
pub fn stratified_folds(labels: &[Label], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return arg_err("need at least two folds");
    }
    let mut folds = vec![0usize; labels.len()];
    for class in [Label::Normal, Label::Glaucoma] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return arg_err(format!(
                "class {class} has {} samples; every one of {k} folds needs both classes",
                idx.len()
            ));
        }
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng::stream(seed, &[tag("folds"), class.as_u8() as u64]));
        for (p, i) in idx.into_iter().enumerate() {
            folds[i] = p % k;
        }
    }
    Ok(folds)
}

/// Standardise on `train`, fit, and score `test`.
pub fn fit_and_score(latents: &LatentMatrix, train: &[usize], test: &[usize], params: &SvcParams) -> Result<MetricsReport> {
    let dim = latents.cols();
    let tr = latents.select_rows(train);
    let te = latents.select_rows(test);
    let scaler = Standardizer::fit(tr.data(), dim);
    let svc = Svc::fit(&scaler.transform(tr.data()), dim, tr.labels(), params)?;
    let xt = scaler.transform(te.data());
    let scores = svc.decision_function(&xt)?;
    let preds: Vec<Label> = scores
        .iter()
        .map(|s| if *s > 0.0 { Label::Glaucoma } else { Label::Normal })
        .collect();
    compute_metrics(te.labels(), &scores, &preds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateResult {
    pub params: SvcParams,
    /// Per-fold metric values, `[accuracy, auc, f1, precision, recall]`.
    pub folds: Vec<[f64; 5]>,
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub candidates: Vec<CandidateResult>,
    pub best: usize,
}

impl CvReport {
    pub fn best_params(&self) -> SvcParams {
        self.candidates[self.best].params
    }

    pub fn best_mean_auc(&self) -> f64 {
        self.candidates[self.best].mean[1]
    }

    /// One row per candidate with mean and standard deviation per metric.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["C".to_string(), "kernel".into(), "class_weight".into(), "gamma".into()];
        for m in METRIC_NAMES {
            header.push(format!("mean_{m}"));
            header.push(format!("std_{m}"));
        }
        header.push("best".into());
        w.write_record(&header)?;
        for (i, c) in self.candidates.iter().enumerate() {
            let mut rec = vec![
                c.params.c.to_string(),
                match c.params.kernel {
                    Kernel::Linear => "linear".into(),
                    Kernel::Rbf => "rbf".into(),
                },
                match c.params.class_weight {
                    ClassWeight::None => "none".into(),
                    ClassWeight::Balanced => "balanced".into(),
                },
                c.params.gamma.map(|g| g.to_string()).unwrap_or_else(|| "scale".into()),
            ];
            for k in 0..5 {
                rec.push(c.mean[k].to_string());
                rec.push(c.std[k].to_string());
            }
            rec.push((i == self.best).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_std(values: &[[f64; 5]]) -> ([f64; 5], [f64; 5]) {
    let n = values.len() as f64;
    let mut mean = [0.0; 5];
    let mut std = [0.0; 5];
    for k in 0..5 {
        mean[k] = values.iter().map(|v| v[k]).sum::<f64>() / n;
        std[k] = (values.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
    }
    (mean, std)
}

/// Five-fold stratified cross-validation of every candidate; the best has
/// the highest mean AUC (earliest in `grid` on ties).
pub fn cross_validate(latents: &LatentMatrix, grid: &[SvcParams], seed: u64) -> Result<CvReport> {
    if grid.is_empty() {
        return arg_err("parameter grid is empty");
    }
    if latents.rows() < 10 {
        return arg_err(format!("cross-validation needs at least 10 samples, got {}", latents.rows()));
    }
    for p in grid {
        p.validate()?;
    }
    let folds = stratified_folds(latents.labels(), CV_FOLDS, seed)?;
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..CV_FOLDS)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..latents.rows()).partition(|&i| folds[i] == f);
            (train, test)
        })
        .collect();
    let jobs = grid.len() * CV_FOLDS;
    let results = crate::par::map_range(jobs, |j| {
        let (train, test) = &splits[j % CV_FOLDS];
        fit_and_score(latents, train, test, &grid[j / CV_FOLDS]).map(|m| m.values())
    });
    let results: Vec<[f64; 5]> = results.into_iter().collect::<Result<_>>()?;
    let candidates: Vec<CandidateResult> = grid
        .iter()
        .enumerate()
        .map(|(c, params)| {
            let fold_values = results[c * CV_FOLDS..(c + 1) * CV_FOLDS].to_vec();
            let (mean, std) = mean_std(&fold_values);
            CandidateResult {
                params: *params,
                folds: fold_values,
                mean,
                std,
            }
        })
        .collect();
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.mean[1] > candidates[best].mean[1] {
            best = i;
        }
    }
    Ok(CvReport { candidates, best })
}

/// Stratified hold-out evaluation: `split_ratio` of each class is held out.
pub fn train_test_evaluate(latents: &LatentMatrix, params: &SvcParams, split_ratio: f64, seed: u64) -> Result<MetricsReport> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return arg_err(format!("split_ratio must be in (0, 1), got {split_ratio}"));
    }
    let (train, test) = stratified_split(latents.labels(), split_ratio, rng::derive_seed(seed, &[tag("holdout")]));
    for (name, part) in [("test", &test), ("train", &train)] {
        let pos = part.iter().filter(|&&i| latents.labels()[i] == Label::Glaucoma).count();
        if pos == 0 || pos == part.len() {
            return arg_err(format!("{name} split contains a single class"));
        }
    }
    fit_and_score(latents, &train, &test, params)
}

#[derive(Debug, Serialize)]
struct TrendRow {
    nl: usize,
    accuracy: f64,
    auc: f64,
    f1: f64,
    precision: f64,
    recall: f64,
}

/// Metrics per latent size, ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendTable {
    pub rows: Vec<(usize, [f64; 5])>,
}

impl TrendTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for (nl, v) in &self.rows {
            w.serialize(TrendRow {
                nl: *nl,
                accuracy: v[0],
                auc: v[1],
                f1: v[2],
                precision: v[3],
                recall: v[4],
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn metric(&self, nl: usize, name: &str) -> Option<f64> {
        let k = METRIC_NAMES.iter().position(|m| *m == name)?;
        self.rows.iter().find(|r| r.0 == nl).map(|r| r.1[k])
    }
}

/// Tabulates reports across latent sizes.
pub fn metric_trends(reports: &BTreeMap<usize, MetricsReport>) -> Result<TrendTable> {
    if reports.is_empty() {
        return arg_err("no reports to tabulate");
    }
    Ok(TrendTable {
        rows: reports.iter().map(|(nl, r)| (*nl, r.values())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, dim: usize, sep: f64, seed: u64) -> LatentMatrix {
        let mut rng = rng::stream(seed, &[]);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = Label::from_u8((i % 2) as u8).unwrap();
            for d in 0..dim {
                let shift = if d == 0 && l == Label::Glaucoma { sep } else { 0.0 };
                data.push(shift + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(l);
        }
        LatentMatrix::new((0..n).map(|i| format!("s{i}")).collect(), labels, dim, data).unwrap()
    }

    /// Independent separability check: the first coordinate alone splits the
    /// classes at the midpoint between the class extremes.
    fn separable_on_first_axis(m: &LatentMatrix) -> bool {
        let max0 = (0..m.rows())
            .filter(|&i| m.labels()[i] == Label::Normal)
            .map(|i| m.row(i)[0])
            .fold(f64::NEG_INFINITY, f64::max);
        let min1 = (0..m.rows())
            .filter(|&i| m.labels()[i] == Label::Glaucoma)
            .map(|i| m.row(i)[0])
            .fold(f64::INFINITY, f64::min);
        max0 < min1
    }

    #[test]
    fn folds_partition_and_stratify() {
        let labels: Vec<Label> = (0..53).map(|i| Label::from_u8((i % 3 == 0) as u8).unwrap()).collect();
        let folds = stratified_folds(&labels, 5, 1).unwrap();
        let pos_total = labels.iter().filter(|l| **l == Label::Glaucoma).count() as f64;
        for f in 0..5 {
            let members: Vec<usize> = (0..53).filter(|&i| folds[i] == f).collect();
            let pos = members.iter().filter(|&&i| labels[i] == Label::Glaucoma).count() as f64;
            assert!((pos - pos_total / 5.0).abs() <= 1.0);
            assert!(!members.is_empty());
        }
        assert!(stratified_folds(&labels[..8], 5, 1).is_err());
    }

    #[test]
    fn separable_blobs_score_perfectly() {
        let m = blobs(120, 4, 12.0, 3);
        assert!(separable_on_first_axis(&m));
        let r = train_test_evaluate(&m, &SvcParams::paper_optimum(), TEST_SPLIT, 1).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.accuracy, 1.0);
        let cv = cross_validate(&m, &[SvcParams::paper_optimum()], 2).unwrap();
        assert_eq!(cv.best, 0);
        assert!(cv.candidates[0].mean[1] >= 0.95);
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let m = blobs(240, 4, 3.0, 4);
        let mut labels = m.labels().to_vec();
        labels.shuffle(&mut rng::stream(9, &[]));
        let shuffled = m.with_labels(labels).unwrap();
        let cv = cross_validate(&shuffled, &super::super::default_grid()[..4], 5).unwrap();
        assert!((0.4..=0.6).contains(&cv.best_mean_auc()), "{}", cv.best_mean_auc());
    }

    #[test]
    fn constant_features_give_chance_auc() {
        let n = 100;
        let labels: Vec<Label> = (0..n).map(|i| Label::from_u8((i % 2) as u8).unwrap()).collect();
        let m = LatentMatrix::new((0..n).map(|i| i.to_string()).collect(), labels, 3, vec![0.7; n * 3]).unwrap();
        let r = train_test_evaluate(&m, &SvcParams::paper_optimum(), TEST_SPLIT, 1).unwrap();
        assert!((r.auc - 0.5).abs() <= 0.05);
    }

    #[test]
    fn cv_is_deterministic_and_picks_max_auc() {
        let m = blobs(60, 3, 1.5, 8);
        let grid = super::super::default_grid();
        let a = cross_validate(&m, &grid, 3).unwrap();
        assert_eq!(a, cross_validate(&m, &grid, 3).unwrap());
        let max = a.candidates.iter().map(|c| c.mean[1]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best_mean_auc(), max);
        let dir = tempfile::tempdir().unwrap();
        a.write_csv(&dir.path().join("cv.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("cv.csv")).unwrap();
        assert_eq!(text.lines().count(), grid.len() + 1);
    }

    #[test]
    fn single_class_holdout_rejected() {
        let n = 12;
        let mut labels = vec![Label::Normal; n];
        labels[0] = Label::Glaucoma;
        let mut rng = rng::stream(1, &[]);
        let m = LatentMatrix::new((0..n).map(|i| i.to_string()).collect(), labels, 2, (0..2 * n).map(|_| rng.gen()).collect()).unwrap();
        assert!(train_test_evaluate(&m, &SvcParams::paper_optimum(), 0.3, 1).is_err());
    }

    #[test]
    fn trend_table() {
        let y = vec![Label::Normal, Label::Glaucoma];
        let r = compute_metrics(&y, &[0.0, 1.0], &y).unwrap();
        let mut reports = BTreeMap::new();
        reports.insert(128, r.clone());
        reports.insert(16, r);
        let t = metric_trends(&reports).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].0, 16);
        assert_eq!(t.metric(128, "auc"), Some(1.0));
        let dir = tempfile::tempdir().unwrap();
        t.write_csv(&dir.path().join("m.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert!(text.starts_with("nl,accuracy,auc,f1,precision,recall\n"));
    }

    #[test]
    fn standardizer_uses_train_statistics() {
        let s = Standardizer::fit(&[1.0, 10.0, 3.0, 10.0], 2);
        assert_eq!(s.transform(&[2.0, 10.0, 4.0, 11.0]), vec![0.0, 0.0, 2.0, 1.0]);
    }
}
