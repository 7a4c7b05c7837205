//! Supervised probe of latent quality: SVC, cross-validation and metrics.

mod cv;
mod metrics;
mod svm;

pub use cv::{
    cross_validate, fit_and_score, metric_trends, stratified_folds, train_test_evaluate, CandidateResult, CvReport,
    Standardizer, TrendTable, CV_FOLDS, TEST_SPLIT,
};
pub use metrics::{compute_metrics, roc_curve, trapezoid_auc, MetricsReport, RocPoint, METRIC_NAMES};
pub use svm::{default_grid, ClassWeight, Kernel, Svc, SvcParams};

use std::path::Path;

/// Writes ROC points as `fpr,tpr,threshold`.
pub fn write_roc_csv(report: &MetricsReport, path: &Path) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in &report.roc {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
