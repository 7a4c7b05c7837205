//! Training recipe for one latent size, best-by-validation checkpointing, and
//! the latent-size sweep.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, CHECKPOINT_FILE};
use crate::dataset::{augment, batches, stack_images, unstack_images, DatasetSplit, LabeledImage};
use crate::error::arg_err;
use crate::extractor::FeatureExtractor;
use crate::imaging::{diff_mask, ssim, BinaryMask, Image};
use crate::loss::LossBreakdown;
use crate::nn::{Adam, AdamConfig, Tensor};
use crate::rng::{self, tag};
use crate::vae::{sample_noise, validate_latent_size, Vae, VaeConfig, LATENT_SIZES};
use crate::{Error, Result};

pub const HISTORY_FILE: &str = "history.csv";
pub const SWEEP_REPORT_FILE: &str = "sweep_report.csv";
/// Latent sizes of the desk-scale sweep.
pub const DESK_SWEEP: [usize; 3] = [4, 32, 256];
/// Threshold on `1 - local SSIM` used for review masks.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;
/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs between learning-rate decays.
    pub scheduler_step: usize,
    pub scheduler_gamma: f64,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            lr: 1e-3,
            scheduler_step: 140,
            scheduler_gamma: 0.1,
            flip_prob: 0.5,
            seed: 0,
        }
    }

    /// The paper schedule compressed 10x, with smaller batches so that a
    /// 400-image training split still gives enough optimiser steps.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            scheduler_step: 14,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return arg_err("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return arg_err("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return arg_err(format!("lr must be positive, got {}", self.lr));
        }
        if self.scheduler_step == 0 {
            return arg_err("scheduler_step must be at least 1");
        }
        if !(self.scheduler_gamma > 0.0 && self.scheduler_gamma <= 1.0) {
            return arg_err(format!("scheduler_gamma must be in (0, 1], got {}", self.scheduler_gamma));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return arg_err(format!("flip_prob must be in [0, 1], got {}", self.flip_prob));
        }
        Ok(())
    }

    /// Step schedule: `lr * gamma^floor(epoch / step)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.scheduler_gamma.powi((epoch / self.scheduler_step) as i32)
    }
}

/// KL weight of the desk preset. The feature loss is mean-reduced, so a unit
/// weight collapses the posterior within a few epochs; at 1e-3 the KL budget
/// still caps every latent size at roughly the same information content.
pub const DESK_KL_WEIGHT: f64 = 1e-5;

/// Model shape used by the desk preset: the paper's five stride-2 stages at
/// a quarter of the width.
pub fn desk_vae_config(latent_size: usize) -> VaeConfig {
    VaeConfig {
        latent_size,
        image_size: 128,
        encoder_widths: vec![8, 16, 32, 64, 128],
        decoder_widths: vec![128, 64, 32, 16, 8],
        kl_weight: DESK_KL_WEIGHT,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct HistoryRow {
    epoch: usize,
    train_total: f64,
    train_feat: f64,
    train_kl: f64,
    val_total: f64,
    val_feat: f64,
    val_kl: f64,
    lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.get(self.best_epoch)
    }

    /// Index of the first minimum of the validation total loss.
    pub fn argmin_validation(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, r) in self.records.iter().enumerate() {
            if best.is_none_or(|b| r.validation.total < self.records[b].validation.total) {
                best = Some(i);
            }
        }
        best
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(HistoryRow {
                epoch: r.epoch,
                train_total: r.train.total,
                train_feat: r.train.feature,
                train_kl: r.train.kl,
                val_total: r.validation.total,
                val_feat: r.validation.feature,
                val_kl: r.validation.kl,
                lr: r.lr,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for row in csv::Reader::from_path(path)?.deserialize::<HistoryRow>() {
            let r = row?;
            records.push(EpochRecord {
                epoch: r.epoch,
                train: LossBreakdown {
                    feature: r.train_feat,
                    kl: r.train_kl,
                    total: r.train_total,
                },
                validation: LossBreakdown {
                    feature: r.val_feat,
                    kl: r.val_kl,
                    total: r.val_total,
                },
                lr: r.lr,
            });
        }
        let mut h = Self {
            records,
            best_epoch: 0,
        };
        h.best_epoch = h.argmin_validation().unwrap_or(0);
        Ok(h)
    }
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: TrainHistory,
}

/// Mean evaluation-mode loss over `items` (posterior-mean reconstructions).
pub fn evaluate(model: &Vae<f32>, items: &[LabeledImage], extractor: &FeatureExtractor<f32>) -> Result<LossBreakdown> {
    if items.is_empty() {
        return arg_err("cannot evaluate an empty set");
    }
    let mut acc = LossBreakdown::default();
    let mut seen = 0usize;
    for chunk in items.chunks(EVAL_CHUNK) {
        let imgs: Vec<&Image> = chunk.iter().map(|i| &i.image).collect();
        let x: Tensor<f32> = stack_images(&imgs)?;
        let l = model.eval_loss(&x, extractor)?;
        acc = acc.blend(seen as f64, l, chunk.len() as f64);
        seen += chunk.len();
    }
    Ok(acc)
}

/// Trains one model for exactly `config.epochs` epochs, writing the
/// lowest-validation-loss weights to `out_dir/checkpoint.bin` and the
/// per-epoch history to `out_dir/history.csv`.
///
/// All randomness (initialisation, shuffling, flips, noise) is derived from
/// `(config.seed, latent_size)`.
pub fn train_one(
    config: &TrainConfig,
    vae_config: &VaeConfig,
    extractor: &FeatureExtractor<f32>,
    data: &DatasetSplit,
    out_dir: &Path,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    vae_config.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return arg_err("training and validation splits must be non-empty");
    }
    std::fs::create_dir_all(out_dir)?;
    let nl = vae_config.latent_size as u64;
    let seed = rng::derive_seed(config.seed, &[tag("run"), nl]);
    let mut model = Vae::<f32>::new(vae_config.clone(), seed)?;
    let mut adam = Adam::new(AdamConfig::default());
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let mut history = TrainHistory::default();
    let mut best_total = f64::INFINITY;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut train = LossBreakdown::default();
        let mut seen = 0usize;
        for (b, batch) in batches(&data.train, config.batch_size, seed, epoch)?.enumerate() {
            let tags = [epoch as u64, b as u64];
            let originals: Vec<Image> = batch.iter().map(|i| i.image.clone()).collect();
            let mut flip_rng = rng::stream(seed, &[tag("flip"), tags[0], tags[1]]);
            let images = augment(&originals, config.flip_prob, &mut flip_rng);
            let refs: Vec<&Image> = images.iter().collect();
            let x: Tensor<f32> = stack_images(&refs)?;
            let mut eps_rng = rng::stream(seed, &[tag("eps"), tags[0], tags[1]]);
            let eps = sample_noise([x.batch(), vae_config.latent_size, 1, 1], &mut eps_rng);
            let l = model.accumulate_gradients(&x, &eps, extractor)?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("training loss {l:?}"),
                });
            }
            adam.step(&mut model.params_mut(), lr);
            train = train.blend(seen as f64, l, x.batch() as f64);
            seen += x.batch();
        }
        let validation = evaluate(&model, &data.validation, extractor)?;
        if !validation.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                detail: format!("validation loss {validation:?}"),
            });
        }
        let record = EpochRecord {
            epoch,
            train,
            validation,
            lr,
        };
        if validation.total < best_total {
            best_total = validation.total;
            history.best_epoch = epoch;
            let meta = CheckpointMeta {
                vae_config: vae_config.clone(),
                epoch,
                validation,
            };
            checkpoint::save(&model, &meta, &checkpoint_path)?;
        }
        history.records.push(record);
        progress(&record);
    }
    history.write_csv(&out_dir.join(HISTORY_FILE))?;
    Ok(TrainOutcome {
        checkpoint: checkpoint_path,
        history,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionRecord {
    pub id: String,
    pub original: Image,
    pub reconstruction: Image,
    pub ssim: f64,
    pub mask: BinaryMask,
}

/// Posterior-mean reconstructions of `items` with per-image SSIM and
/// difference masks.
pub fn reconstruct_with(
    model: &Vae<f32>,
    items: &[LabeledImage],
    mask_threshold: f64,
) -> Result<Vec<ReconstructionRecord>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_CHUNK) {
        let imgs: Vec<&Image> = chunk.iter().map(|i| &i.image).collect();
        let x: Tensor<f32> = stack_images(&imgs)?;
        let recs = unstack_images(&model.reconstruct(&x)?)?;
        for (item, rec) in chunk.iter().zip(recs) {
            out.push(ReconstructionRecord {
                id: item.id.clone(),
                ssim: ssim(&item.image, &rec)?.value(),
                mask: diff_mask(&item.image, &rec, mask_threshold)?,
                original: item.image.clone(),
                reconstruction: rec,
            });
        }
    }
    Ok(out)
}

pub fn reconstruct_validation(checkpoint_path: &Path, items: &[LabeledImage]) -> Result<Vec<ReconstructionRecord>> {
    let (model, _) = checkpoint::load::<f32>(checkpoint_path)?;
    reconstruct_with(&model, items, DEFAULT_MASK_THRESHOLD)
}

pub fn mean_ssim(records: &[ReconstructionRecord]) -> f64 {
    records.iter().map(|r| r.ssim).sum::<f64>() / records.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub latent_size: usize,
    pub best_epoch: usize,
    pub validation: LossBreakdown,
    pub mean_ssim: f64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub records: Vec<SweepRecord>,
    /// Latent sizes whose run failed, with the error text.
    pub failures: Vec<(usize, String)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepRow {
    latent_size: usize,
    status: String,
    best_epoch: Option<usize>,
    val_total: Option<f64>,
    val_feat: Option<f64>,
    val_kl: Option<f64>,
    mean_ssim: Option<f64>,
    checkpoint: String,
    error: String,
}

impl SweepReport {
    pub fn record(&self, nl: usize) -> Option<&SweepRecord> {
        self.records.iter().find(|r| r.latent_size == nl)
    }

    /// Rows ordered by latent size. Checkpoint paths are written relative to
    /// `base` when possible.
    pub fn write_csv(&self, path: &Path, base: &Path) -> Result<()> {
        let mut rows: Vec<SweepRow> = self
            .records
            .iter()
            .map(|r| SweepRow {
                latent_size: r.latent_size,
                status: "ok".into(),
                best_epoch: Some(r.best_epoch),
                val_total: Some(r.validation.total),
                val_feat: Some(r.validation.feature),
                val_kl: Some(r.validation.kl),
                mean_ssim: Some(r.mean_ssim),
                checkpoint: r
                    .checkpoint
                    .strip_prefix(base)
                    .unwrap_or(&r.checkpoint)
                    .display()
                    .to_string(),
                error: String::new(),
            })
            .chain(self.failures.iter().map(|(nl, e)| SweepRow {
                latent_size: *nl,
                status: "failed".into(),
                best_epoch: None,
                val_total: None,
                val_feat: None,
                val_kl: None,
                mean_ssim: None,
                checkpoint: String::new(),
                error: e.clone(),
            }))
            .collect();
        rows.sort_by_key(|r| r.latent_size);
        let mut w = csv::Writer::from_path(path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, base: &Path) -> Result<Self> {
        let mut report = Self::default();
        for row in csv::Reader::from_path(path)?.deserialize::<SweepRow>() {
            let r = row?;
            match (r.status.as_str(), r.best_epoch, r.val_total, r.val_feat, r.val_kl, r.mean_ssim) {
                ("ok", Some(best_epoch), Some(total), Some(feature), Some(kl), Some(mean_ssim)) => {
                    report.records.push(SweepRecord {
                        latent_size: r.latent_size,
                        best_epoch,
                        validation: LossBreakdown { feature, kl, total },
                        mean_ssim,
                        checkpoint: base.join(r.checkpoint),
                    })
                }
                _ => report.failures.push((r.latent_size, r.error)),
            }
        }
        Ok(report)
    }
}

pub fn validate_sweep_set(sweep_set: &[usize]) -> Result<()> {
    if sweep_set.is_empty() {
        return arg_err("sweep set must not be empty");
    }
    for &nl in sweep_set {
        validate_latent_size(nl)?;
    }
    let mut sorted = sweep_set.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != sweep_set.len() {
        return arg_err("sweep set contains duplicates");
    }
    Ok(())
}

/// The paper's full sweep, `2^1 ..= 2^11`.
pub fn paper_sweep() -> Vec<usize> {
    LATENT_SIZES.to_vec()
}

/// Trains one model per latent size under `run_dir/nl<k>/`. A failing size
/// is recorded and the remaining sizes still run.
pub fn sweep(
    config: &TrainConfig,
    base_model: &VaeConfig,
    sweep_set: &[usize],
    extractor: &FeatureExtractor<f32>,
    data: &DatasetSplit,
    run_dir: &Path,
    mut progress: impl FnMut(usize, &EpochRecord),
) -> Result<SweepReport> {
    config.validate()?;
    validate_sweep_set(sweep_set)?;
    let mut report = SweepReport::default();
    for &nl in sweep_set {
        let vae_config = base_model.clone().with_latent_size(nl);
        let dir = run_dir.join(format!("nl{nl}"));
        let result = train_one(config, &vae_config, extractor, data, &dir, |r| progress(nl, r)).and_then(|outcome| {
            let recs = reconstruct_validation(&outcome.checkpoint, &data.validation)?;
            let best = *outcome.history.best().expect("at least one epoch");
            Ok(SweepRecord {
                latent_size: nl,
                best_epoch: outcome.history.best_epoch,
                validation: best.validation,
                mean_ssim: mean_ssim(&recs),
                checkpoint: outcome.checkpoint,
            })
        });
        match result {
            Ok(r) => report.records.push(r),
            Err(e) => report.failures.push((nl, e.to_string())),
        }
    }
    report.write_csv(&run_dir.join(SWEEP_REPORT_FILE), run_dir)?;
    Ok(report)
}
