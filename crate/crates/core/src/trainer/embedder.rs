use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::loss::cross_entropy;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cosine_lr, Opt, OptimizerKind};
use crate::data::{load_batch, DatasetIndex};
use crate::embedders::{build_trainable, l2_normalize, Arch, EmbedderHandle, ModelManifest, Role};
use crate::error::{Error, Result};
use crate::params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderTrainConfig {
    pub arch: Arch,
    pub width: Option<usize>,
    pub embedding_dim: Option<usize>,
    pub input_size: (usize, usize),
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Identities per batch (P of a P×K batch).
    pub identities_per_batch: usize,
    /// Images per identity (K of a P×K batch).
    pub instances_per_identity: usize,
    pub triplet_margin: f64,
    /// Probability of erasing a random rectangle from each training image.
    pub erase_prob: f64,
    /// Range of the erased rectangle's area as a fraction of the image.
    pub erase_area: (f64, f64),
    pub flip: bool,
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    /// Role of the returned handle.
    pub role: Role,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::SmallCnn,
            width: None,
            embedding_dim: None,
            input_size: (256, 128),
            epochs: 60,
            lr: 1e-3,
            optimizer: OptimizerKind::Adaptive,
            identities_per_batch: 8,
            instances_per_identity: 4,
            triplet_margin: 0.3,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            flip: true,
            steps_per_epoch: None,
            seed: 0,
            role: Role::TargetWhitebox,
        }
    }
}

impl EmbedderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("embedder.lr", "must be positive"));
        }
        if self.identities_per_batch < 2 || self.instances_per_identity < 1 {
            return Err(Error::config(
                "embedder.identities_per_batch",
                "need at least 2 identities and 1 instance per batch",
            ));
        }
        if !(0.0..=1.0).contains(&self.erase_prob) {
            return Err(Error::config("embedder.erase_prob", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.erase_area;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config("embedder.erase_area", "need 0 < min <= max <= 1"));
        }
        if self.triplet_margin < 0.0 {
            return Err(Error::config("embedder.triplet_margin", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Batch-hard triplet loss on unit-norm embeddings: for each anchor, the
/// farthest positive and the closest negative under Euclidean distance.
pub fn batch_hard_triplet(emb: &Tensor, labels: &[u32], margin: f64) -> Result<Tensor> {
    let b = labels.len();
    let gram = emb.matmul(&emb.t()?)?;
    let dist = gram.affine(-2.0, 2.0)?.clamp(1e-12, 4.0)?.sqrt()?;
    let mut same = vec![0f32; b * b];
    for i in 0..b {
        for j in 0..b {
            if labels[i] == labels[j] && i != j {
                same[i * b + j] = 1.0;
            }
        }
    }
    let pos = Tensor::from_vec(same.clone(), (b, b), emb.device())?;
    let neg: Vec<f32> = (0..b * b)
        .map(|k| if labels[k / b] != labels[k % b] { 1.0 } else { 0.0 })
        .collect();
    let neg = Tensor::from_vec(neg, (b, b), emb.device())?;
    let hardest_pos = (&dist * &pos)?.max(D::Minus1)?;
    let blocked = neg.affine(-10.0, 10.0)?;
    let hardest_neg = (&dist + &blocked)?.min(D::Minus1)?;
    Ok((hardest_pos - hardest_neg)?.affine(1.0, margin)?.relu()?.mean_all()?)
}

fn augment(x: &Tensor, cfg: &EmbedderTrainConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let mut data: Vec<f32> = x.flatten_all()?.to_vec1()?;
    let plane = h * w;
    for i in 0..b {
        let img = &mut data[i * c * plane..(i + 1) * c * plane];
        if cfg.flip && rng.random_bool(0.5) {
            for ch in 0..c {
                for row in 0..h {
                    img[ch * plane + row * w..ch * plane + (row + 1) * w].reverse();
                }
            }
        }
        if rng.random_bool(cfg.erase_prob) {
            let area = rng.random_range(cfg.erase_area.0..=cfg.erase_area.1) * plane as f64;
            let aspect = rng.random_range(0.3f64..3.3);
            let eh = ((area * aspect).sqrt() as usize).clamp(1, h);
            let ew = ((area / aspect).sqrt() as usize).clamp(1, w);
            let y0 = rng.random_range(0..=h - eh);
            let x0 = rng.random_range(0..=w - ew);
            for ch in 0..c {
                for row in y0..y0 + eh {
                    for col in x0..x0 + ew {
                        img[ch * plane + row * w + col] = rng.random_range(-1.0f32..1.0);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (b, c, h, w), &Device::Cpu)?)
}

/// Train a registry architecture with cross-entropy plus batch-hard triplet
/// loss and return it as a frozen handle with the configured role.
pub fn train_embedder(
    config: &EmbedderTrainConfig,
    data: &DatasetIndex,
    workers: usize,
) -> Result<EmbedderHandle> {
    config.validate()?;
    let records: Vec<_> = data.usable().collect();
    let mut by_id: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_id.entry(r.identity).or_default().push(i);
    }
    if by_id.len() < 2 {
        return Err(Error::InsufficientIdentities { needed: 2, found: by_id.len() });
    }
    let groups: Vec<(u32, Vec<usize>)> = by_id
        .into_values()
        .enumerate()
        .map(|(label, idx)| (label as u32, idx))
        .collect();
    let (h, w) = config.input_size;
    let arch = config.arch;
    let width = config.width.unwrap_or(arch.default_width());
    let dim = config.embedding_dim.unwrap_or(arch.default_embedding_dim());
    let (varmap, net) = build_trainable(arch, width, dim, Some(groups.len()), config.seed)?;

    let steps_per_epoch = config.steps_per_epoch.unwrap_or_else(|| {
        let batch = config.identities_per_batch * config.instances_per_identity;
        records.len().div_ceil(batch).max(1)
    });
    let total = steps_per_epoch * config.epochs;
    if total > 0 {
        let images = load_batch(&records, h, w, workers)?;
        let mut opt = Opt::new(config.optimizer, params::trainable_vars(&varmap), config.lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let p = config.identities_per_batch.min(groups.len());
        for step in 0..total {
            let mut order: Vec<usize> = (0..groups.len()).collect();
            order.shuffle(&mut rng);
            let mut idx = Vec::new();
            let mut labels = Vec::new();
            for &g in &order[..p] {
                let (label, members) = &groups[g];
                for _ in 0..config.instances_per_identity {
                    idx.push(members[rng.random_range(0..members.len())] as u32);
                    labels.push(*label);
                }
            }
            let x = images.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?;
            let x = augment(&x, config, &mut rng)?;
            let (raw, _) = net.forward_t(&x, true)?;
            let logits = net.classify(&raw)?;
            let targets = Tensor::new(labels.as_slice(), &Device::Cpu)?;
            let ce = cross_entropy(&logits, &targets)?;
            let tri = batch_hard_triplet(&l2_normalize(&raw)?, &labels, config.triplet_margin)?;
            let loss = (ce + tri)?;
            opt.step(&loss, cosine_lr(config.lr, step, total))?;
            if step % steps_per_epoch.max(1) == 0 {
                log::info!("embedder step {step}/{total}: loss {:.4}", loss.to_dtype(DType::F32)?.to_scalar::<f32>()?);
            }
        }
    }
    let manifest = ModelManifest {
        arch,
        embedding_dim: dim,
        width,
        input_size: config.input_size,
        train_dataset: format!("{:?}:{}ids", data.layout, groups.len()),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let id = format!("{arch}-trained-seed{}", config.seed);
    EmbedderHandle::from_tensors(params::snapshot(&varmap, Some("classifier"))?, manifest, config.role, id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_zero_when_well_separated() {
        let e = Tensor::new(&[[1f32, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], &Device::Cpu).unwrap();
        let l: f32 = batch_hard_triplet(&e, &[0, 0, 1, 1], 0.3).unwrap().to_scalar().unwrap();
        assert!(l.abs() < 1e-5);
    }

    #[test]
    fn triplet_matches_hand_value() {
        // All four points coincide: hardest positive 0, hardest negative 0.
        let e = Tensor::new(&[[1f32, 0.0]; 4], &Device::Cpu).unwrap();
        let l: f32 = batch_hard_triplet(&e, &[0, 0, 1, 1], 0.3).unwrap().to_scalar().unwrap();
        assert!((l - 0.3).abs() < 1e-4);
    }
}
