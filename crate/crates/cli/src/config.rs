//! Run configuration: a TOML document layered over a built-in preset.
//!
//! Tables are merged key by key, except `[dataset]`, which replaces the
//! preset's dataset section as a whole so that choosing a directory source
//! does not inherit the preset's synthetic generator.

use std::path::{Path, PathBuf};

use dfcvae::analysis::PAPER_TOP_K_RATIOS;
use dfcvae::classify::{default_grid, SvcParams, TEST_SPLIT};
use dfcvae::dataset::{
    build_synthetic_dataset_with, load_image_directory_sized, split_dataset, DatasetSplit, SyntheticDatasetConfig,
    LABELS_FILE,
};
use dfcvae::extractor::ExtractorConfig;
use dfcvae::train::{desk_vae_config, paper_sweep, validate_sweep_set, TrainConfig, DESK_SWEEP};
use dfcvae::umap::UmapParams;
use dfcvae::vae::{validate_latent_size, VaeConfig};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, CliError, Result};

/// Overrides `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "DFCVAE_OUTPUT_ROOT";
/// Overrides `extractor.weights`.
pub const EXTRACTOR_WEIGHTS_ENV: &str = "DFCVAE_EXTRACTOR_WEIGHTS";

/// Keys whose tables replace the preset's instead of merging into it.
const REPLACED_TABLES: [&str; 1] = ["dataset"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-scale recipe: 300 epochs, batch 64, eleven latent sizes.
    Paper,
    /// 500 synthetic images, 30 epochs, latent sizes {4, 32, 256}.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Parent of the run directory.
    pub output_dir: PathBuf,
    /// Drives dataset generation and splitting, training, UMAP and
    /// cross-validation.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub extractor: ExtractorConfig,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub analysis: AnalysisSection,
    pub classify: ClassifySection,
}

/// Where images come from. Training uses `directory` when present and the
/// synthetic generator otherwise.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub synthetic: Option<SyntheticDatasetConfig>,
    pub directory: Option<DirectorySource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectorySource {
    pub path: PathBuf,
    /// Defaults to `labels.csv` inside `path`.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub test_ratio: f64,
}

fn default_split_ratio() -> f64 {
    0.2
}

impl DirectorySource {
    pub fn labels_path(&self) -> PathBuf {
        self.labels.clone().unwrap_or_else(|| self.path.join(LABELS_FILE))
    }
}

/// Everything in the model configuration except the latent size, which
/// comes from `train.latent_size` or the sweep set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub kl_weight: f64,
}

impl ModelSection {
    pub fn vae_config(&self, latent_size: usize) -> VaeConfig {
        VaeConfig {
            latent_size,
            image_size: self.image_size,
            encoder_widths: self.encoder_widths.clone(),
            decoder_widths: self.decoder_widths.clone(),
            kl_weight: self.kl_weight,
        }
    }
}

impl From<VaeConfig> for ModelSection {
    fn from(c: VaeConfig) -> Self {
        Self {
            image_size: c.image_size,
            encoder_widths: c.encoder_widths,
            decoder_widths: c.decoder_widths,
            kl_weight: c.kl_weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Latent size trained by the `train` command.
    pub latent_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scheduler_step: usize,
    pub scheduler_gamma: f64,
    pub flip_prob: f64,
}

impl TrainSection {
    fn from_config(latent_size: usize, c: TrainConfig) -> Self {
        Self {
            latent_size,
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            scheduler_step: c.scheduler_step,
            scheduler_gamma: c.scheduler_gamma,
            flip_prob: c.flip_prob,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            scheduler_step: self.scheduler_step,
            scheduler_gamma: self.scheduler_gamma,
            flip_prob: self.flip_prob,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub latent_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Top-k sizes as fractions of nl; the all-feature embedding is always
    /// produced as well.
    pub top_k_ratios: Vec<f64>,
    /// Latent sizes to analyse; defaults to the sweep set.
    #[serde(default)]
    pub latent_sizes: Option<Vec<usize>>,
    pub umap: UmapSection,
}

/// UMAP parameters; the seed is the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UmapSection {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    #[serde(default)]
    pub n_epochs: Option<usize>,
    pub learning_rate: f64,
    pub negative_sample_rate: usize,
    pub repulsion_strength: f64,
}

impl UmapSection {
    pub fn params(&self, seed: u64) -> UmapParams {
        UmapParams {
            n_neighbors: self.n_neighbors,
            min_dist: self.min_dist,
            spread: self.spread,
            n_epochs: self.n_epochs,
            learning_rate: self.learning_rate,
            negative_sample_rate: self.negative_sample_rate,
            repulsion_strength: self.repulsion_strength,
            seed,
        }
    }
}

impl Default for UmapSection {
    fn default() -> Self {
        let p = UmapParams::default();
        Self {
            n_neighbors: p.n_neighbors,
            min_dist: p.min_dist,
            spread: p.spread,
            n_epochs: p.n_epochs,
            learning_rate: p.learning_rate,
            negative_sample_rate: p.negative_sample_rate,
            repulsion_strength: p.repulsion_strength,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    /// Candidates for 5-fold cross-validation.
    pub grid: Vec<SvcParams>,
    /// Held-out fraction for the final train-test evaluation.
    pub split_ratio: f64,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let analysis = AnalysisSection {
            top_k_ratios: PAPER_TOP_K_RATIOS.to_vec(),
            latent_sizes: None,
            umap: UmapSection::default(),
        };
        let classify = ClassifySection {
            grid: default_grid(),
            split_ratio: TEST_SPLIT,
        };
        match preset {
            Preset::Paper => Self {
                name: "paper".into(),
                output_dir: "runs".into(),
                seed: 0,
                dataset: DatasetSection {
                    synthetic: Some(SyntheticDatasetConfig::paper_counts()),
                    directory: None,
                },
                model: VaeConfig::default().into(),
                extractor: ExtractorConfig::default(),
                train: TrainSection::from_config(128, TrainConfig::paper()),
                sweep: SweepSection {
                    latent_sizes: paper_sweep(),
                },
                analysis,
                classify,
            },
            Preset::Desk => Self {
                name: "desk".into(),
                output_dir: "runs".into(),
                seed: 0,
                dataset: DatasetSection {
                    synthetic: Some(SyntheticDatasetConfig::default()),
                    directory: None,
                },
                model: desk_vae_config(32).into(),
                extractor: ExtractorConfig {
                    widths: [8, 8, 16],
                    weights: None,
                    seed: 0,
                },
                train: TrainSection::from_config(32, TrainConfig::desk()),
                sweep: SweepSection {
                    latent_sizes: DESK_SWEEP.to_vec(),
                },
                analysis,
                classify,
            },
        }
    }

    /// Latent sizes the analysis and classification stages cover.
    pub fn analysis_sizes(&self) -> Vec<usize> {
        self.analysis
            .latent_sizes
            .clone()
            .unwrap_or_else(|| self.sweep.latent_sizes.clone())
    }

    /// Checks every section. Paths must already be resolved.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return config_err(format!("name {:?} is not a valid directory name", self.name));
        }
        self.validate_dataset()?;
        let vae = self.model.vae_config(self.train.latent_size);
        vae.validate().map_err(|e| section_err("model", e))?;
        if let Some(w) = &self.extractor.weights {
            if !w.is_file() {
                return config_err(format!("extractor weights {} not found", w.display()));
            }
        }
        if self.extractor.widths.contains(&0) {
            return config_err("extractor widths must be positive");
        }
        self.train
            .train_config(self.seed)
            .validate()
            .map_err(|e| section_err("train", e))?;
        validate_latent_size(self.train.latent_size).map_err(|e| section_err("train", e))?;
        validate_sweep_set(&self.sweep.latent_sizes).map_err(|e| section_err("sweep", e))?;
        if let Some(sizes) = &self.analysis.latent_sizes {
            validate_sweep_set(sizes).map_err(|e| section_err("analysis", e))?;
        }
        for r in &self.analysis.top_k_ratios {
            if !(*r > 0.0 && *r <= 1.0) {
                return config_err(format!("analysis: top-k ratio {r} is not in (0, 1]"));
            }
        }
        self.analysis
            .umap
            .params(self.seed)
            .validate()
            .map_err(|e| section_err("analysis.umap", e))?;
        if self.classify.grid.is_empty() {
            return config_err("classify: grid must not be empty");
        }
        for p in &self.classify.grid {
            p.validate().map_err(|e| section_err("classify", e))?;
        }
        if !(self.classify.split_ratio > 0.0 && self.classify.split_ratio < 1.0) {
            return config_err(format!(
                "classify: split_ratio must be in (0, 1), got {}",
                self.classify.split_ratio
            ));
        }
        Ok(())
    }

    fn validate_dataset(&self) -> Result<()> {
        let d = &self.dataset;
        if d.synthetic.is_none() && d.directory.is_none() {
            return config_err("dataset: needs a [dataset.synthetic] or [dataset.directory] section");
        }
        if let Some(s) = &d.synthetic {
            s.validate().map_err(|e| section_err("dataset.synthetic", e))?;
            if d.directory.is_none() && s.params.image_size != self.model.image_size {
                return config_err(format!(
                    "dataset.synthetic image_size {} differs from model image_size {}",
                    s.params.image_size, self.model.image_size
                ));
            }
        }
        if let Some(dir) = &d.directory {
            if !dir.path.is_dir() {
                return config_err(format!("dataset.directory: {} is not a directory", dir.path.display()));
            }
            let labels = dir.labels_path();
            if !labels.is_file() {
                return config_err(format!("dataset.directory: labels file {} not found", labels.display()));
            }
            if !(dir.split_ratio > 0.0 && dir.split_ratio < 1.0)
                || !(0.0..1.0).contains(&dir.test_ratio)
                || dir.split_ratio + dir.test_ratio >= 1.0
            {
                return config_err("dataset.directory: split_ratio and test_ratio must leave a non-empty training set");
            }
        }
        Ok(())
    }

    /// Loads or generates the dataset and splits it.
    pub fn load_data(&self) -> Result<DatasetSplit> {
        match (&self.dataset.directory, &self.dataset.synthetic) {
            (Some(dir), _) => {
                let items = load_image_directory_sized(&dir.path, &dir.labels_path(), self.model.image_size)?;
                Ok(split_dataset(items, dir.split_ratio, dir.test_ratio, self.seed)?)
            }
            (None, Some(s)) => Ok(build_synthetic_dataset_with(s, self.seed)?),
            (None, None) => config_err("no dataset source configured"),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        if let Some(w) = self.extractor.weights.as_mut() {
            join(w);
        }
        if let Some(dir) = self.dataset.directory.as_mut() {
            join(&mut dir.path);
            if let Some(l) = dir.labels.as_mut() {
                join(l);
            }
        }
    }
}

fn section_err(section: &str, e: dfcvae::Error) -> CliError {
    CliError::Config(format!("{section}: {e}"))
}

/// Recursively overlays `user` onto `base`.
fn merge(base: &mut toml::Table, user: toml::Table, replace: &[&str]) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !replace.contains(&k.as_str()) => merge(b, u, &[]),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
    pub output_root: Option<PathBuf>,
    pub extractor_weights: Option<PathBuf>,
}

impl Overrides {
    /// Reads the output-root and extractor-weights environment variables.
    pub fn with_env(mut self) -> Self {
        let var = |k| std::env::var_os(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        if self.output_root.is_none() {
            self.output_root = var(OUTPUT_ROOT_ENV);
        }
        if self.extractor_weights.is_none() {
            self.extractor_weights = var(EXTRACTOR_WEIGHTS_ENV);
        }
        self
    }
}

/// A validated configuration and the directory its run writes to.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub run_dir: PathBuf,
}

/// Parses `text`, layers it over the preset, applies overrides, resolves
/// relative paths against `base_dir` and validates the result.
///
/// The preset comes from `overrides.preset`, else a top-level `preset`
/// key, else `desk`.
pub fn resolve_str(text: &str, source: &Path, base_dir: &Path, overrides: &Overrides) -> Result<Resolved> {
    let mut user: toml::Table = toml::from_str(text).map_err(|e| CliError::Parse {
        path: source.to_path_buf(),
        source: e,
    })?;
    let file_preset = match user.remove("preset") {
        None => None,
        Some(v) => Some(
            Preset::deserialize(v).map_err(|e| CliError::Config(format!("preset: {e} (expected paper or desk)")))?,
        ),
    };
    let preset = overrides.preset.or(file_preset).unwrap_or(Preset::Desk);
    let mut table = toml::Table::try_from(RunConfig::preset(preset)).expect("presets serialize to TOML");
    merge(&mut table, user, &REPLACED_TABLES);
    let mut config = RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Parse {
        path: source.to_path_buf(),
        source: e,
    })?;
    config.resolve_paths(base_dir);
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(root) = &overrides.output_root {
        config.output_dir = root.clone();
    }
    if let Some(w) = &overrides.extractor_weights {
        config.extractor.weights = Some(w.clone());
    }
    config.validate()?;
    let run_dir = overrides
        .run_dir
        .clone()
        .unwrap_or_else(|| config.output_dir.join(&config.name));
    Ok(Resolved { config, run_dir })
}

/// Reads and resolves a config file; relative paths inside it are taken
/// relative to the file's directory.
pub fn resolve_file(path: &Path, overrides: &Overrides) -> Result<Resolved> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    resolve_str(&text, path, base, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str) -> Result<Resolved> {
        resolve_str(text, Path::new("test.toml"), Path::new("/base"), &Overrides::default())
    }

    #[test]
    fn empty_file_is_the_desk_preset() {
        let r = resolve("").unwrap();
        assert_eq!(r.config.sweep.latent_sizes, vec![4, 32, 256]);
        assert_eq!(r.config.train.epochs, 30);
        assert_eq!(r.run_dir, Path::new("/base/runs/desk"));
        let s = r.config.dataset.synthetic.unwrap();
        assert_eq!((s.n_normal, s.n_glaucoma), (250, 250));
    }

    #[test]
    fn paper_preset_values() {
        let o = Overrides {
            preset: Some(Preset::Paper),
            ..Default::default()
        };
        let c = resolve_str("", Path::new("t"), Path::new("/"), &o).unwrap().config;
        let t = c.train.train_config(c.seed);
        assert_eq!((t.epochs, t.batch_size, t.scheduler_step), (300, 64, 140));
        assert_eq!((t.lr, t.scheduler_gamma), (1e-3, 0.1));
        assert_eq!(c.sweep.latent_sizes.len(), 11);
        assert_eq!(c.model.encoder_widths, vec![32, 64, 128, 256, 512]);
        assert!(c.classify.grid.contains(&SvcParams::paper_optimum()));
        let s = c.dataset.synthetic.unwrap();
        assert_eq!(s.n_normal + s.n_glaucoma, 6902);
    }

    #[test]
    fn file_preset_key_and_flag_precedence() {
        assert_eq!(resolve("preset = \"paper\"").unwrap().config.train.epochs, 300);
        let o = Overrides {
            preset: Some(Preset::Desk),
            ..Default::default()
        };
        let r = resolve_str("preset = \"paper\"", Path::new("t"), Path::new("/"), &o).unwrap();
        assert_eq!(r.config.train.epochs, 30);
        assert!(resolve("preset = \"huge\"").is_err());
    }

    #[test]
    fn merges_nested_keys() {
        let r = resolve("seed = 7\n[train]\nepochs = 3\n[analysis.umap]\nn_neighbors = 5\n").unwrap();
        assert_eq!(r.config.seed, 7);
        assert_eq!(r.config.train.epochs, 3);
        assert_eq!(r.config.train.batch_size, 16);
        assert_eq!(r.config.analysis.umap.n_neighbors, 5);
        assert_eq!(r.config.analysis.umap.params(7).seed, 7);
        assert_eq!(r.config.train.train_config(7).seed, 7);
    }

    #[test]
    fn dataset_table_replaces_the_preset() {
        let r = resolve("[dataset.synthetic]\nn_normal = 10\nn_glaucoma = 12\n").unwrap();
        let s = r.config.dataset.synthetic.unwrap();
        assert_eq!((s.n_normal, s.n_glaucoma, s.split_ratio), (10, 12, 0.2));
        let err = resolve("[dataset.directory]\npath = \"/definitely/missing\"\n").unwrap_err();
        assert!(err.to_string().contains("not a directory"), "{err}");
        assert!(resolve("[dataset]\n").is_err());
    }

    #[test]
    fn rejects_malformed_configs() {
        for bad in [
            "[sweep]\nlatent_sizes = [4, 100]",
            "[sweep]\nlatent_sizes = []",
            "[train]\nlr = -1.0",
            "[train]\nlatent_size = 3",
            "[train]\nunknown = 1",
            "[analysis]\ntop_k_ratios = [0.0]",
            "[classify]\ngrid = []",
            "[classify]\nsplit_ratio = 1.0",
            "[model]\nimage_size = 100",
            "[extractor]\nweights = \"missing.safetensors\"",
            "name = \"a/b\"",
            "bogus = 1",
            "seed = \"x\"",
            "[[[",
        ] {
            let err = resolve(bad).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{bad}: {err}");
        }
    }

    #[test]
    fn sweep_error_names_the_bad_size() {
        let err = resolve("[sweep]\nlatent_sizes = [4, 100]").unwrap_err();
        assert!(err.to_string().contains("100"), "{err}");
    }

    #[test]
    fn overrides() {
        let o = Overrides {
            seed: Some(9),
            output_root: Some("/out".into()),
            ..Default::default()
        };
        let r = resolve_str("name = \"x\"", Path::new("t"), Path::new("/b"), &o).unwrap();
        assert_eq!((r.config.seed, r.run_dir.as_path()), (9, Path::new("/out/x")));
        let o = Overrides {
            run_dir: Some("/elsewhere".into()),
            ..Default::default()
        };
        let r = resolve_str("", Path::new("t"), Path::new("/b"), &o).unwrap();
        assert_eq!(r.run_dir, Path::new("/elsewhere"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("w.safetensors"), b"").unwrap();
        let r = resolve_str(
            "output_dir = \"out\"\n[extractor]\nweights = \"w.safetensors\"\n",
            Path::new("t"),
            dir.path(),
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!(r.config.output_dir, dir.path().join("out"));
        assert_eq!(r.config.extractor.weights.unwrap(), dir.path().join("w.safetensors"));
    }

    #[test]
    fn presets_roundtrip_through_toml() {
        for p in [Preset::Paper, Preset::Desk] {
            let c = RunConfig::preset(p);
            let text = toml::to_string(&c).unwrap();
            let back: RunConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, c);
        }
    }
}
