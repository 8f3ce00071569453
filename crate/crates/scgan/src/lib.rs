//! Selfie cartoonization with attentive cycle-consistent adversarial training.
//!
//! The library is organized around the training pipeline:
//!
//! - [`data`]: image tensors, corpus loading, unpaired batch sampling.
//! - [`regions`]: facial region boxes and per-region attention weights.
//! - [`networks`]: U-Net generators, patch discriminators, and the frozen
//!   feature extractor used by the perceptual loss.
//! - [`losses`]: adversarial, cycle, attentive cycle, total variation, and
//!   perceptual terms plus the combined objective.
//! - [`train`]: optimization loop, replay pools, and checkpointing.
//! - [`eval`]: gradient statistics and survey aggregation.
//! - [`config`]: run configuration for the command line.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod regions;
pub mod tensorfile;
pub mod train;
pub mod vgg;

pub use error::{Error, Result};
