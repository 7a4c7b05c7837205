//! Deep-feature-consistent variational autoencoder (DFC-VAE) for optic disc
//! images, together with the tooling used to probe what its latent space has
//! learned: reconstruction similarity, correlated-feature clustering and a
//! support-vector classification probe.
//!
//! The crate is organised bottom-up:
//!
//! * [`imaging`]: image type, resizing, flips, SSIM and difference masks.
//! * [`dataset`]: synthetic optic-disc generator, directory ingestion,
//!   stratified splits, batching and augmentation.
//! * [`nn`]: a small CPU tensor engine (convolutions, batch norm, Adam).
//! * [`vae`], [`extractor`], [`loss`]: the model and its objective.
//! * [`train`]: the training recipe, checkpoints and latent-size sweeps.
//! * [`analysis`], [`umap`]: latent feature ranking and 2-D embeddings.
//! * [`classify`]: SVC probe, cross-validation and ROC metrics.
//! * [`plot`]: static PNG figures.

pub mod analysis;
pub mod checkpoint;
pub mod classify;
pub mod dataset;
mod error;
pub mod extractor;
pub mod imaging;
pub mod loss;
pub mod nn;
pub mod par;
pub mod plot;
pub mod rng;
pub mod train;
pub mod umap;
pub mod vae;

pub use error::{Error, Result};
