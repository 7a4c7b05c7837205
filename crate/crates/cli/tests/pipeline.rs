use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seed = 3

[dataset.synthetic]
n_normal = 40
n_glaucoma = 40
[dataset.synthetic.params]
image_size = 32

[model]
image_size = 32
encoder_widths = [4, 8]
decoder_widths = [8, 4]
kl_weight = 0.001

[extractor]
widths = [4, 4, 8]

[train]
latent_size = 4
epochs = 2
batch_size = 16

[sweep]
latent_sizes = [2, 4]

[analysis]
top_k_ratios = [0.5, 1.0]
[analysis.umap]
n_neighbors = 5
n_epochs = 50

[classify]
grid = [
  { c = 1.0, kernel = "rbf", class_weight = "balanced" },
  { c = 1.0, kernel = "linear", class_weight = "none" },
]
"#;

fn dfcvae(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfcvae"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DFCVAE_OUTPUT_ROOT")
        .env_remove("DFCVAE_EXTRACTOR_WEIGHTS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = dfcvae(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let run = dir.path().join("runs").join("tiny");
    (dir, run)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn pipeline(cwd: &Path) {
    for cmd in ["generate", "sweep", "analyze", "classify", "report"] {
        ok(&[cmd, "--config", "run.toml"], cwd);
    }
}

const DETERMINISTIC: [&str; 11] = [
    "nl2/history.csv",
    "nl4/history.csv",
    "nl4/checkpoint.bin",
    "sweep_report.csv",
    "analysis/nl4/latents.csv",
    "analysis/nl4/embedding_k2.csv",
    "analysis/separation.csv",
    "classify/metrics.csv",
    "classify/nl4/cv_report.csv",
    "dataset/labels.csv",
    "report.md",
];

#[test]
fn full_pipeline_produces_artifacts_and_is_rerunnable() {
    let (dir, run) = setup(TINY);
    pipeline(dir.path());

    let labels = std::fs::read_to_string(run.join("dataset/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 81);
    let pngs = std::fs::read_dir(run.join("dataset"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 80);
    let manifest = std::fs::read_to_string(run.join("dataset/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3"), "{manifest}");

    for f in [
        "nl2/checkpoint.bin",
        "nl4/review.png",
        "nl4/ssim.csv",
        "figures/loss_curves.png",
        "figures/ssim_vs_nl.png",
        "analysis/nl2/ranking.csv",
        "analysis/nl2/scatter_k1.png",
        "analysis/nl4/scatter_k4.png",
        "classify/roc_overlay.png",
        "classify/metric_trends.png",
        "classify/nl2/roc.csv",
        "classify/selected_params.csv",
        "config.resolved.toml",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(!run.join(".lock").exists());

    let history = std::fs::read_to_string(run.join("nl4/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_total,train_feat,train_kl,val_total,val_feat,val_kl,lr\n"));
    assert_eq!(history.lines().count(), 3);
    let metrics = std::fs::read_to_string(run.join("classify/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "nl,accuracy,auc,f1,precision,recall");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2,") && lines[2].starts_with("4,"));
    let latents = std::fs::read_to_string(run.join("analysis/nl4/latents.csv")).unwrap();
    assert!(latents.starts_with("id,label,f0,f1,f2,f3\n"));
    let report = std::fs::read_to_string(run.join("report.md")).unwrap();
    for section in ["## Training", "## Reconstruction similarity", "## Cluster separation", "## Classification"] {
        assert!(report.contains(section), "{section}");
    }
    assert!(!report.contains("Section absent"));

    let first: Vec<Vec<u8>> = DETERMINISTIC.iter().map(|f| read(&run.join(f))).collect();
    pipeline(dir.path());
    for (f, a) in DETERMINISTIC.iter().zip(&first) {
        assert!(*a == read(&run.join(f)), "{f} changed on rerun");
    }
}

#[test]
fn train_command_trains_one_size_and_report_flags_missing_stages() {
    let (dir, run) = setup(TINY);
    ok(&["train", "--config", "run.toml"], dir.path());
    assert!(run.join("nl4/checkpoint.bin").is_file());
    assert!(!run.join("nl2").exists());
    let report = std::fs::read_to_string(run.join("sweep_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2);

    // The sweep set still names nl=2, which has no checkpoint.
    let out = dfcvae(&["analyze", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nl=2"), "{err}");
    assert!(!run.join("analysis").exists());

    ok(&["report", "--config", "run.toml"], dir.path());
    let md = std::fs::read_to_string(run.join("report.md")).unwrap();
    assert!(md.contains("Missing sections: clusters, classification."), "{md}");
    assert!(md.contains("## Training"));
}

#[test]
fn invalid_config_fails_before_side_effects() {
    let bad = TINY.replace("latent_sizes = [2, 4]", "latent_sizes = [2, 100]");
    let (dir, run) = setup(&bad);
    let out = dfcvae(&["sweep", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("100"));
    assert!(!run.exists());
    assert!(!dir.path().join("runs").exists());

    let out = dfcvae(&["sweep", "--config", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = dfcvae(&["frobnicate", "--config", "run.toml"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn generate_without_synthetic_section_is_a_config_error() {
    let (dir, run) = setup(TINY);
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::write(dir.path().join("images/labels.csv"), "filename,label\n").unwrap();
    let cfg = TINY.replace(
        "[dataset.synthetic]\nn_normal = 40\nn_glaucoma = 40\n[dataset.synthetic.params]\nimage_size = 32\n",
        "[dataset.directory]\npath = \"images\"\n",
    );
    std::fs::write(dir.path().join("run.toml"), cfg).unwrap();
    let out = dfcvae(&["generate", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synthetic"));
    assert!(!run.exists());
}

#[test]
fn trains_from_a_generated_directory() {
    let (dir, _) = setup(TINY);
    ok(&["generate", "--config", "run.toml", "--run-dir", "gen"], dir.path());
    let cfg = TINY.replace(
        "[dataset.synthetic]\nn_normal = 40\nn_glaucoma = 40\n[dataset.synthetic.params]\nimage_size = 32\n",
        "[dataset.directory]\npath = \"gen/dataset\"\n",
    );
    std::fs::write(dir.path().join("dir.toml"), cfg).unwrap();
    ok(&["train", "--config", "dir.toml", "--run-dir", "fromdir"], dir.path());
    assert!(dir.path().join("fromdir/nl4/checkpoint.bin").is_file());
}

#[test]
fn lock_file_blocks_a_second_invocation() {
    let (dir, run) = setup(TINY);
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "1\n").unwrap();
    let out = dfcvae(&["generate", "--config", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    assert!(!run.join("dataset").exists());
}

#[test]
fn seed_flag_and_output_root_env() {
    let (dir, _) = setup(TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_dfcvae"))
        .args(["generate", "--config", "run.toml", "--seed", "11"])
        .current_dir(dir.path())
        .env("DFCVAE_OUTPUT_ROOT", dir.path().join("elsewhere"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("elsewhere/tiny/dataset/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 11"));
}

#[test]
fn default_desk_generate_writes_500_images() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "preset = \"desk\"\n").unwrap();
    ok(&["generate", "--config", "run.toml"], dir.path());
    let data = dir.path().join("runs/desk/dataset");
    let labels = std::fs::read_to_string(data.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 501);
    let pngs = std::fs::read_dir(&data)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 500);
    let before = read(&data.join("labels.csv"));
    let img = read(&data.join("normal_00007.png"));
    ok(&["generate", "--config", "run.toml"], dir.path());
    assert_eq!(before, read(&data.join("labels.csv")));
    assert_eq!(img, read(&data.join("normal_00007.png")));
}
