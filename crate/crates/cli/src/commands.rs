//! Pipeline stages. Each writes only inside the run directory and checks
//! its inputs before producing anything.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use dfcvae::analysis::{
    cluster_separation, encode_dataset, rank_features, select_top_k, top_k_for_ratio, LatentMatrix,
};
use dfcvae::checkpoint::CHECKPOINT_FILE;
use dfcvae::classify::{
    cross_validate, fit_and_score, ClassWeight, Kernel, metric_trends, train_test_evaluate, write_roc_csv, MetricsReport, METRIC_NAMES,
};
use dfcvae::dataset::{write_image_directory, DatasetSplit, Label, LabeledImage};
use dfcvae::extractor::FeatureExtractor;
use dfcvae::plot::{review_sheet, Figure, Series};
use dfcvae::train::{
    mean_ssim, reconstruct_validation, sweep, train_one, EpochRecord, SweepRecord, SweepReport, TrainHistory,
    HISTORY_FILE, SWEEP_REPORT_FILE,
};
use dfcvae::umap::umap_embed;
use serde::Serialize;

use crate::config::{Resolved, RunConfig};
use crate::error::{config_err, CliError, Result};

pub const DATASET_DIR: &str = "dataset";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FIGURES_DIR: &str = "figures";
pub const ANALYSIS_DIR: &str = "analysis";
pub const CLASSIFY_DIR: &str = "classify";
pub const LATENTS_FILE: &str = "latents.csv";
pub const TEST_LATENTS_FILE: &str = "latents_test.csv";
pub const RANKING_FILE: &str = "ranking.csv";
pub const SEPARATION_FILE: &str = "separation.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SELECTED_FILE: &str = "selected_params.csv";
pub const CV_REPORT_FILE: &str = "cv_report.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const SSIM_FILE: &str = "ssim.csv";
pub const REVIEW_FILE: &str = "review.png";
/// Validation images shown on each reconstruction review sheet.
const REVIEW_ROWS: usize = 6;

pub fn nl_dir(run_dir: &Path, nl: usize) -> PathBuf {
    run_dir.join(format!("nl{nl}"))
}

pub fn analysis_dir(run_dir: &Path, nl: usize) -> PathBuf {
    run_dir.join(ANALYSIS_DIR).join(format!("nl{nl}"))
}

pub fn classify_dir(run_dir: &Path, nl: usize) -> PathBuf {
    run_dir.join(CLASSIFY_DIR).join(format!("nl{nl}"))
}

pub fn embedding_file(k: usize) -> String {
    format!("embedding_k{k}.csv")
}

pub fn scatter_file(k: usize) -> String {
    format!("scatter_k{k}.png")
}

fn progress_line(nl: usize, r: &EpochRecord) {
    eprintln!(
        "nl={nl} epoch {:>3} lr {:.1e} train {:.5} (feat {:.5} kl {:.3}) val {:.5} (feat {:.5} kl {:.3})",
        r.epoch, r.lr, r.train.total, r.train.feature, r.train.kl, r.validation.total, r.validation.feature, r.validation.kl
    );
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    files: usize,
    n_normal: usize,
    n_glaucoma: usize,
    synthetic: &'a dfcvae::dataset::SyntheticDatasetConfig,
}

/// Renders the synthetic dataset into `run_dir/dataset`: one PNG per image,
/// `labels.csv` and a manifest recording the seed.
pub fn generate(r: &Resolved) -> Result<PathBuf> {
    let Some(synthetic) = &r.config.dataset.synthetic else {
        return config_err("generate needs a [dataset.synthetic] section");
    };
    let items = synthetic.generate(r.config.seed)?;
    let dir = r.run_dir.join(DATASET_DIR);
    write_image_directory(&items, &dir)?;
    let manifest = Manifest {
        seed: r.config.seed,
        files: items.len(),
        n_normal: count(&items, Label::Normal),
        n_glaucoma: count(&items, Label::Glaucoma),
        synthetic,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(dir)
}

fn count(items: &[LabeledImage], label: Label) -> usize {
    items.iter().filter(|i| i.label == label).count()
}

fn extractor(config: &RunConfig) -> Result<FeatureExtractor<f32>> {
    Ok(config.extractor.build()?)
}

/// Trains `train.latent_size` and merges its row into the sweep report.
pub fn train(r: &Resolved) -> Result<SweepReport> {
    let c = &r.config;
    let ex = extractor(c)?;
    let data = c.load_data()?;
    let nl = c.train.latent_size;
    let outcome = train_one(
        &c.train.train_config(c.seed),
        &c.model.vae_config(nl),
        &ex,
        &data,
        &nl_dir(&r.run_dir, nl),
        |rec| progress_line(nl, rec),
    )?;
    let best = *outcome.history.best().expect("at least one epoch");
    let ssim = review(&r.run_dir, nl, &outcome.checkpoint, &data)?;
    let report_path = r.run_dir.join(SWEEP_REPORT_FILE);
    let mut report = if report_path.exists() {
        SweepReport::read_csv(&report_path, &r.run_dir)?
    } else {
        SweepReport::default()
    };
    report.records.retain(|x| x.latent_size != nl);
    report.failures.retain(|x| x.0 != nl);
    report.records.push(SweepRecord {
        latent_size: nl,
        best_epoch: outcome.history.best_epoch,
        validation: best.validation,
        mean_ssim: ssim,
        checkpoint: outcome.checkpoint,
    });
    report.write_csv(&report_path, &r.run_dir)?;
    sweep_figures(&r.run_dir, &report)?;
    Ok(report)
}

/// Trains every latent size of the sweep set. Sizes that fail are listed in
/// the report and make the command fail after the others finish.
pub fn sweep_cmd(r: &Resolved) -> Result<SweepReport> {
    let c = &r.config;
    let ex = extractor(c)?;
    let data = c.load_data()?;
    let report = sweep(
        &c.train.train_config(c.seed),
        &c.model.vae_config(c.sweep.latent_sizes[0]),
        &c.sweep.latent_sizes,
        &ex,
        &data,
        &r.run_dir,
        progress_line,
    )?;
    for rec in &report.records {
        review(&r.run_dir, rec.latent_size, &rec.checkpoint, &data)?;
    }
    sweep_figures(&r.run_dir, &report)?;
    for (nl, e) in &report.failures {
        eprintln!("nl={nl} failed: {e}");
    }
    if !report.failures.is_empty() {
        return Err(CliError::StageFailed {
            stage: "sweep",
            sizes: report.failures.iter().map(|f| f.0).collect(),
        });
    }
    Ok(report)
}

/// Writes per-image SSIM and a review sheet for one checkpoint; returns the
/// mean SSIM.
fn review(run_dir: &Path, nl: usize, checkpoint: &Path, data: &DatasetSplit) -> Result<f64> {
    let recs = reconstruct_validation(checkpoint, &data.validation)?;
    let dir = nl_dir(run_dir, nl);
    let mut w = csv::Writer::from_path(dir.join(SSIM_FILE)).map_err(dfcvae::Error::from)?;
    w.write_record(["id", "ssim"]).map_err(dfcvae::Error::from)?;
    for rec in &recs {
        w.write_record([rec.id.clone(), rec.ssim.to_string()])
            .map_err(dfcvae::Error::from)?;
    }
    w.flush()?;
    let rows: Vec<_> = recs
        .iter()
        .take(REVIEW_ROWS)
        .map(|r| (&r.original, &r.reconstruction, &r.mask))
        .collect();
    review_sheet(&rows, &dir.join(REVIEW_FILE))?;
    Ok(mean_ssim(&recs))
}

fn sweep_figures(run_dir: &Path, report: &SweepReport) -> Result<()> {
    let dir = run_dir.join(FIGURES_DIR);
    std::fs::create_dir_all(&dir)?;
    let mut records: Vec<&SweepRecord> = report.records.iter().collect();
    records.sort_by_key(|r| r.latent_size);

    let mut curves = Vec::new();
    for rec in &records {
        let h = TrainHistory::read_csv(&nl_dir(run_dir, rec.latent_size).join(HISTORY_FILE))?;
        let pts = |f: fn(&EpochRecord) -> f64| h.records.iter().map(|e| (e.epoch as f64, f(e))).collect();
        curves.push(Series::line(format!("nl={} train", rec.latent_size), pts(|e| e.train.total)));
        curves.push(Series::line(format!("nl={} val", rec.latent_size), pts(|e| e.validation.total)));
    }
    Figure {
        title: "Loss curves".into(),
        x_label: "epoch".into(),
        y_label: "total loss".into(),
        series: curves,
        ..Default::default()
    }
    .save(&dir.join("loss_curves.png"))?;

    let by_nl = |f: fn(&SweepRecord) -> f64| records.iter().map(|r| (r.latent_size as f64, f(r))).collect();
    Figure {
        title: "Mean validation SSIM vs latent size".into(),
        x_label: "latent size".into(),
        y_label: "SSIM".into(),
        log2_x: true,
        series: vec![Series::line("mean SSIM", by_nl(|r| r.mean_ssim))],
        ..Default::default()
    }
    .save(&dir.join("ssim_vs_nl.png"))?;
    Figure {
        title: "Best validation loss vs latent size".into(),
        x_label: "latent size".into(),
        y_label: "total loss".into(),
        log2_x: true,
        series: vec![Series::line("best val loss", by_nl(|r| r.validation.total))],
        ..Default::default()
    }
    .save(&dir.join("loss_vs_nl.png"))?;
    Ok(())
}

#[derive(Serialize)]
struct SeparationRow {
    nl: usize,
    k: usize,
    silhouette: f64,
}

/// Encodes the validation set (and the test set, when configured) for each
/// analysed latent size, ranks features and embeds the top-k subsets.
pub fn analyze(r: &Resolved) -> Result<Vec<(usize, usize, f64)>> {
    let c = &r.config;
    let sizes = c.analysis_sizes();
    let checkpoints: Vec<PathBuf> = sizes.iter().map(|&nl| nl_dir(&r.run_dir, nl).join(CHECKPOINT_FILE)).collect();
    for (&nl, path) in sizes.iter().zip(&checkpoints) {
        if !path.is_file() {
            return Err(CliError::MissingArtifact { nl, path: path.clone() });
        }
    }
    let data = c.load_data()?;
    let params = c.analysis.umap.params(c.seed);
    let mut rows = Vec::new();
    for (&nl, ckpt) in sizes.iter().zip(&checkpoints) {
        let dir = analysis_dir(&r.run_dir, nl);
        std::fs::create_dir_all(&dir)?;
        let latents = encode_dataset(ckpt, &data.validation)?;
        latents.write_csv(&dir.join(LATENTS_FILE))?;
        if !data.test.is_empty() {
            encode_dataset(ckpt, &data.test)?.write_csv(&dir.join(TEST_LATENTS_FILE))?;
        }
        let ranking = rank_features(&latents)?;
        ranking.write_csv(&dir.join(RANKING_FILE))?;
        let mut ks = BTreeSet::from([nl]);
        for &ratio in &c.analysis.top_k_ratios {
            ks.insert(top_k_for_ratio(nl, ratio)?);
        }
        for k in ks {
            let subset = if k == nl {
                latents.clone()
            } else {
                select_top_k(&latents, &ranking, k)?
            };
            let emb = umap_embed(&subset, &params)?;
            emb.write_csv(&dir.join(embedding_file(k)), latents.ids(), latents.labels())?;
            let s = cluster_separation(&emb, latents.labels())?;
            scatter(&emb.coords, latents.labels(), nl, k, s, &dir.join(scatter_file(k)))?;
            rows.push((nl, k, s));
        }
    }
    let mut w = csv::Writer::from_path(r.run_dir.join(ANALYSIS_DIR).join(SEPARATION_FILE)).map_err(dfcvae::Error::from)?;
    for &(nl, k, silhouette) in &rows {
        w.serialize(SeparationRow { nl, k, silhouette })
            .map_err(dfcvae::Error::from)?;
    }
    w.flush()?;
    Ok(rows)
}

fn scatter(coords: &[[f64; 2]], labels: &[Label], nl: usize, k: usize, s: f64, path: &Path) -> Result<()> {
    let class = |l: Label| {
        coords
            .iter()
            .zip(labels)
            .filter(|(_, x)| **x == l)
            .map(|(c, _)| (c[0], c[1]))
            .collect()
    };
    Figure {
        title: format!("UMAP nl={nl} top-{k} silhouette {s:.3}"),
        x_label: "u0".into(),
        y_label: "u1".into(),
        series: vec![
            Series::points("normal", class(Label::Normal)),
            Series::points("glaucoma", class(Label::Glaucoma)),
        ],
        ..Default::default()
    }
    .save(path)?;
    Ok(())
}

#[derive(Serialize)]
struct SelectedRow {
    nl: usize,
    #[serde(rename = "C")]
    c: f64,
    kernel: &'static str,
    class_weight: &'static str,
    cv_mean_auc: f64,
    evaluation: &'static str,
}

/// Cross-validates the grid on each latent matrix, then evaluates the
/// selected parameters: on the disjoint test latents when present,
/// otherwise on a stratified train-test split.
pub fn classify(r: &Resolved) -> Result<BTreeMap<usize, MetricsReport>> {
    let c = &r.config;
    let sizes = c.analysis_sizes();
    for &nl in &sizes {
        let path = analysis_dir(&r.run_dir, nl).join(LATENTS_FILE);
        if !path.is_file() {
            return Err(CliError::MissingArtifact { nl, path });
        }
    }
    let mut reports = BTreeMap::new();
    let mut selected = Vec::new();
    for &nl in &sizes {
        let adir = analysis_dir(&r.run_dir, nl);
        let latents = LatentMatrix::read_csv(&adir.join(LATENTS_FILE))?;
        let cv = cross_validate(&latents, &c.classify.grid, c.seed)?;
        let dir = classify_dir(&r.run_dir, nl);
        std::fs::create_dir_all(&dir)?;
        cv.write_csv(&dir.join(CV_REPORT_FILE))?;
        let best = cv.best_params();
        let test_path = adir.join(TEST_LATENTS_FILE);
        let (metrics, evaluation) = if test_path.is_file() {
            let test = LatentMatrix::read_csv(&test_path)?;
            (held_out(&latents, &test, &best)?, "test_set")
        } else {
            (
                train_test_evaluate(&latents, &best, c.classify.split_ratio, c.seed)?,
                "split",
            )
        };
        write_roc_csv(&metrics, &dir.join(ROC_FILE))?;
        selected.push(SelectedRow {
            nl,
            c: best.c,
            kernel: match best.kernel {
                Kernel::Linear => "linear",
                Kernel::Rbf => "rbf",
            },
            class_weight: match best.class_weight {
                ClassWeight::None => "none",
                ClassWeight::Balanced => "balanced",
            },
            cv_mean_auc: cv.best_mean_auc(),
            evaluation,
        });
        reports.insert(nl, metrics);
    }
    let out = r.run_dir.join(CLASSIFY_DIR);
    metric_trends(&reports)?.write_csv(&out.join(METRICS_FILE))?;
    let mut w = csv::Writer::from_path(out.join(SELECTED_FILE)).map_err(dfcvae::Error::from)?;
    for s in &selected {
        w.serialize(s).map_err(dfcvae::Error::from)?;
    }
    w.flush()?;
    classify_figures(&out, &reports)?;
    Ok(reports)
}

/// Fits on `train` and scores `test` by stacking both into one matrix.
fn held_out(
    train: &LatentMatrix,
    test: &LatentMatrix,
    params: &dfcvae::classify::SvcParams,
) -> Result<MetricsReport> {
    if train.cols() != test.cols() {
        return Err(dfcvae::Error::Shape("train and test latents differ in width".into()).into());
    }
    let ids = train.ids().iter().chain(test.ids()).cloned().collect();
    let labels = train.labels().iter().chain(test.labels()).copied().collect();
    let data = train.data().iter().chain(test.data()).copied().collect();
    let all = LatentMatrix::new(ids, labels, train.cols(), data)?;
    let tr: Vec<usize> = (0..train.rows()).collect();
    let te: Vec<usize> = (train.rows()..all.rows()).collect();
    Ok(fit_and_score(&all, &tr, &te, params)?)
}

fn classify_figures(dir: &Path, reports: &BTreeMap<usize, MetricsReport>) -> Result<()> {
    Figure {
        title: "ROC per latent size".into(),
        x_label: "false positive rate".into(),
        y_label: "true positive rate".into(),
        x_range: Some((0.0, 1.0)),
        y_range: Some((0.0, 1.0)),
        series: reports
            .iter()
            .map(|(nl, m)| {
                Series::line(
                    format!("nl={nl} AUC {:.3}", m.auc),
                    m.roc.iter().map(|p| (p.fpr, p.tpr)).collect(),
                )
            })
            .collect(),
        ..Default::default()
    }
    .save(&dir.join("roc_overlay.png"))?;
    Figure {
        title: "Classification metrics vs latent size".into(),
        x_label: "latent size".into(),
        y_label: "score".into(),
        log2_x: true,
        y_range: Some((0.0, 1.0)),
        series: METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| Series::line(*name, reports.iter().map(|(nl, m)| (*nl as f64, m.values()[k])).collect()))
            .collect(),
        ..Default::default()
    }
    .save(&dir.join("metric_trends.png"))?;
    Ok(())
}
