//! Threshold metrics and the ROC curve.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{arg_err, shape_err};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; the first point uses +inf.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub roc: Vec<RocPoint>,
}

impl MetricsReport {
    /// `[accuracy, auc, f1, precision, recall]`.
    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.auc, self.f1, self.precision, self.recall]
    }
}

pub const METRIC_NAMES: [&str; 5] = ["accuracy", "auc", "f1", "precision", "recall"];

/// ROC over every distinct score, from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(y_true: &[Label], y_score: &[f64]) -> Result<Vec<RocPoint>> {
    if y_true.len() != y_score.len() {
        return shape_err("labels and scores differ in length");
    }
    if y_true.is_empty() {
        return arg_err("ROC needs at least one sample");
    }
    if y_score.iter().any(|s| s.is_nan()) {
        return arg_err("scores contain NaN");
    }
    let pos = y_true.iter().filter(|l| **l == Label::Glaucoma).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return arg_err("ROC needs both classes");
    }
    let mut order: Vec<usize> = (0..y_true.len()).collect();
    order.sort_by(|&a, &b| y_score[b].total_cmp(&y_score[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = y_score[order[k]];
        while k < order.len() && y_score[order[k]] == t {
            if y_true[order[k]] == Label::Glaucoma {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a ROC curve.
pub fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Accuracy, precision, recall and F1 from `y_pred`; ROC and AUC from
/// `y_score`. Precision (and F1) is 0 when nothing is predicted positive.
pub fn compute_metrics(y_true: &[Label], y_score: &[f64], y_pred: &[Label]) -> Result<MetricsReport> {
    if y_true.len() != y_pred.len() {
        return shape_err("labels and predictions differ in length");
    }
    let roc = roc_curve(y_true, y_score)?;
    let auc = trapezoid_auc(&roc);
    let (mut tp, mut fp, mut tn, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (t, p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (Label::Glaucoma, Label::Glaucoma) => tp += 1,
            (Label::Normal, Label::Glaucoma) => fp += 1,
            (Label::Normal, Label::Normal) => tn += 1,
            (Label::Glaucoma, Label::Normal) => fne += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MetricsReport {
        accuracy: ratio(tp + tn, y_true.len()),
        auc,
        f1,
        precision,
        recall,
        roc,
    })
}
