//! Command-line driver for the latent-size sweep pipeline.

pub mod commands;
pub mod config;
mod error;
pub mod lock;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::{CliError, Result};

use config::{Overrides, Preset, Resolved};
use lock::RunLock;

/// Resolved configuration written into the run directory by every command.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Parser)]
#[command(name = "dfcvae", version, about = "Train DFC-VAEs across latent sizes and probe their latent spaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub args: CommonArgs,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to `<output_dir>/<name>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Base preset the config file is layered over.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset to PNGs and labels.csv.
    Generate,
    /// Train the single latent size `train.latent_size`.
    Train,
    /// Train every latent size of the sweep set.
    Sweep,
    /// Encode, rank features and embed with UMAP.
    Analyze,
    /// Cross-validate SVCs on the latents and evaluate the best.
    Classify,
    /// Summarise the run directory as report.md.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Sweep => "sweep",
            Command::Analyze => "analyze",
            Command::Classify => "classify",
            Command::Report => "report",
        }
    }
}

/// Resolves the configuration, validating it completely before anything is
/// written.
pub fn resolve(args: &CommonArgs) -> Result<Resolved> {
    let overrides = Overrides {
        preset: args.preset,
        seed: args.seed,
        run_dir: args.run_dir.clone(),
        ..Default::default()
    }
    .with_env();
    match &args.config {
        Some(path) => config::resolve_file(path, &overrides),
        None => {
            let cwd = std::env::current_dir()?;
            config::resolve_str("", std::path::Path::new("<preset>"), &cwd, &overrides)
        }
    }
}

/// Runs one command against a resolved configuration.
pub fn execute(command: Command, r: &Resolved) -> Result<()> {
    if command == Command::Generate && r.config.dataset.synthetic.is_none() {
        return Err(CliError::Config("generate needs a [dataset.synthetic] section".into()));
    }
    let _lock = RunLock::acquire(&r.run_dir)?;
    let text = toml::to_string(&r.config).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(r.run_dir.join(RESOLVED_CONFIG_FILE), text)?;
    match command {
        Command::Generate => {
            let dir = commands::generate(r)?;
            eprintln!("wrote dataset to {}", dir.display());
        }
        Command::Train => {
            commands::train(r)?;
        }
        Command::Sweep => {
            commands::sweep_cmd(r)?;
        }
        Command::Analyze => {
            for (nl, k, s) in commands::analyze(r)? {
                eprintln!("nl={nl} k={k} silhouette {s:.4}");
            }
        }
        Command::Classify => {
            for (nl, m) in commands::classify(r)? {
                eprintln!("nl={nl} auc {:.4} accuracy {:.4}", m.auc, m.accuracy);
            }
        }
        Command::Report => {
            let out = report::write_report(&r.run_dir, &r.config.name)?;
            if !out.missing.is_empty() {
                eprintln!("report written with missing sections: {}", out.missing.join(", "));
            }
        }
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let r = resolve(&cli.args)?;
    execute(cli.command, &r)
}
