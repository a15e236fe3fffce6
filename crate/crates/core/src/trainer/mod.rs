//! Optimisation loops: the patch generator against frozen embedders, and
//! the desk-scale embedders themselves.

mod embedder;
mod generator;

use candle_core::Tensor;
use candle_core::Var;
use candle_nn::{AdamW, Optimizer, ParamsAdamW, SGD};
use serde::{Deserialize, Serialize};

use crate::composer::TransformSpec;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;

pub use embedder::{train_embedder, EmbedderTrainConfig};
pub use generator::{
    probe_loss, train_generator, Checkpoint, EpochStats, GanConfig, GeneratorRun, Naturalistic,
    StepLoss,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub weights: LossWeights,
    pub transform: TransformSpec,
    pub patch_size: (usize, usize),
    pub naturalistic: bool,
    /// Save an intermediate checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Optimiser steps per epoch; `None` means one pass over the training split.
    pub steps_per_epoch: Option<usize>,
    pub decoder_widths: [usize; 4],
    pub gan: Option<GanConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 2e-4,
            batch_size: 16,
            optimizer: OptimizerKind::Adaptive,
            seed: 0,
            weights: LossWeights::default(),
            transform: TransformSpec::default(),
            patch_size: (64, 64),
            naturalistic: false,
            checkpoint_every: 0,
            steps_per_epoch: None,
            decoder_widths: [256, 128, 64, 32],
            gan: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.patch_size.0 == 0 || self.patch_size.1 == 0 {
            return Err(Error::config("train.patch_size", "must be nonzero"));
        }
        if self.decoder_widths.contains(&0) {
            return Err(Error::config("train.decoder_widths", "must be nonzero"));
        }
        self.weights.validate()?;
        self.transform.validate()
    }

    /// Stable digest of the serialised config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Cosine decay from `lr0` to 0 over `total` steps.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

pub(crate) enum Opt {
    Sgd(SGD),
    Adam(AdamW),
}

impl Opt {
    pub(crate) fn new(kind: OptimizerKind, vars: Vec<Var>, lr: f64) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Sgd => Opt::Sgd(SGD::new(vars, lr)?),
            OptimizerKind::Adaptive => Opt::Adam(AdamW::new(
                vars,
                ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() },
            )?),
        })
    }

    pub(crate) fn step(&mut self, loss: &Tensor, lr: f64) -> Result<()> {
        match self {
            Opt::Sgd(o) => {
                o.set_learning_rate(lr);
                o.backward_step(loss)?;
            }
            Opt::Adam(o) => {
                o.set_learning_rate(lr);
                o.backward_step(loss)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 100);
        assert_eq!(c.lr, 2e-4);
        assert_eq!(c.batch_size, 16);
        c.validate().unwrap();
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(bad.validate().unwrap_err().is_config());
        let bad = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().unwrap_err().is_config());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_tracks_changes() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..TrainConfig::default() };
        assert_eq!(a.fingerprint(), TrainConfig::default().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
