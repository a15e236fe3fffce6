//! Single-pass adversarial patch generation against retrieval embedders.
//!
//! The crate covers the whole attack pipeline: dataset ingestion, a registry
//! of frozen embedders, the conditional patch generator, differentiable patch
//! blending, cosine pull/push objectives, naturalistic (latent-space and GAN)
//! patch synthesis, training loops, retrieval/ASR evaluation and
//! activation-map / PCA diagnostics.

pub mod cli;
pub mod composer;
pub mod config;
pub mod data;
pub mod embedders;
pub mod error;
pub mod evalkit;
pub mod explain;
pub mod fixture;
pub mod imageops;
pub mod naturalizer;
pub mod objectives;
pub mod params;
pub mod patchgen;
pub mod trainer;

pub use error::{Error, Result};
