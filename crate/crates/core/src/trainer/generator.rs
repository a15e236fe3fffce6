use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cosine_lr, Opt, TrainConfig};
use crate::composer::{compose_batch, sample_placement, transform_batch};
use crate::data::{load_batch, AttackMode, DatasetIndex, PairSampler, PersonRecord};
use crate::embedders::{register_embedder, EmbedderHandle, ModelSpec, Role};
use crate::error::{Error, Result};
use crate::naturalizer::{
    gan_discriminator_loss_tensor, gan_generator_loss_tensor, latent_regularizer_tensor,
    DecoderKind, Discriminator, LatentCode, LatentDecoder,
};
use crate::objectives::total_loss_tensor;
use crate::params;
use crate::patchgen::{
    Attacker, EncodedBatch, GeneratorConfig, NaturalHead, NaturalManifest,
    OutputKind, PatchGenerator,
};

/// Noise channels appended at fusion when the GAN objective is on.
const GAN_NOISE_CHANNELS: usize = 8;
const PROBE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub lambda_adv: f64,
    pub disc_width: usize,
    pub disc_lr: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self { lambda_adv: 1.0, disc_width: 16, disc_lr: 2e-4 }
    }
}

/// Frozen decoder and clean latent for the naturalistic path.
pub struct Naturalistic {
    pub decoder: Box<dyn LatentDecoder>,
    pub latent: LatentCode,
    pub kind: DecoderKind,
    pub dir: PathBuf,
    pub weight: f64,
}

pub struct GeneratorRun<'a> {
    pub config: &'a TrainConfig,
    /// Training records; every usable record is a candidate source/target.
    pub data: &'a DatasetIndex,
    /// White-box embedder the loss is computed against.
    pub target: &'a EmbedderHandle,
    /// Frozen backbone the generator encodes images with.
    pub backbone: &'a ModelSpec,
    pub out_dir: &'a Path,
    pub naturalistic: Option<Naturalistic>,
    pub workers: usize,
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_pull: f64,
    pub loss_push: f64,
    pub loss_reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_pull: f64,
    pub mean_push: f64,
    pub mean_reg: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub path: PathBuf,
    pub epoch: usize,
    pub epochs: Vec<EpochStats>,
    pub steps: Vec<StepLoss>,
    pub fingerprint: String,
    /// Loss of the deterministic probe batch at save time.
    pub probe_loss: f64,
    pub loss_log: PathBuf,
}

/// Cached inputs shared by the training loop and the probe batch.
struct Cache {
    images: Tensor,
    encoded: EncodedBatch,
    embeddings: Tensor,
    position: HashMap<PathBuf, usize>,
}

impl Cache {
    fn build(records: &[&PersonRecord], attacker: &Attacker, target: &EmbedderHandle, workers: usize) -> Result<Self> {
        let (h, w) = target.input_size();
        let images = load_batch(records, h, w, workers)?;
        let encoded = attacker.encode(&images)?;
        let n = images.dim(0)?;
        let mut chunks = Vec::new();
        let mut start = 0;
        while start < n {
            let len = 16.min(n - start);
            chunks.push(target.embed_batch(&images.narrow(0, start, len)?)?.detach());
            start += len;
        }
        let position = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_path.clone(), i))
            .collect();
        Ok(Self { images, encoded, embeddings: Tensor::cat(&chunks, 0)?, position })
    }

    fn index(&self, idx: &[u32]) -> Result<Tensor> {
        Ok(Tensor::new(idx, self.images.device())?)
    }
}

struct BatchLoss {
    total: Tensor,
    pull: Tensor,
    push: Tensor,
    reg: Tensor,
    patches: Tensor,
}

#[allow(clippy::too_many_arguments)]
fn batch_loss(
    attacker: &Attacker,
    target: &EmbedderHandle,
    cache: &Cache,
    config: &TrainConfig,
    sampler: &mut PairSampler,
    rng: &mut ChaCha8Rng,
    noise_seed: u64,
    train: bool,
) -> Result<BatchLoss> {
    let b = config.batch_size;
    let mut s_idx = Vec::with_capacity(b);
    let mut t_idx = Vec::with_capacity(b);
    for _ in 0..b {
        let (s, t) = sampler.next_pair();
        s_idx.push(cache.position[&s.image_path] as u32);
        if let Some(t) = t {
            t_idx.push(cache.position[&t.image_path] as u32);
        }
    }
    let si = cache.index(&s_idx)?;
    let src = cache.encoded.index_select(&si)?;
    let (tgt, z_t) = if config.weights.mode == AttackMode::Targeted {
        let ti = cache.index(&t_idx)?;
        (Some(cache.encoded.index_select(&ti)?), Some(cache.embeddings.index_select(&ti, 0)?))
    } else {
        (None, None)
    };
    let noise = attacker.generator.noise_for(b, noise_seed)?;
    let (patches, delta) = attacker.patches(&src, tgt.as_ref(), noise.as_ref(), train)?;

    let (ih, iw) = target.input_size();
    let (ph, pw) = config.patch_size;
    let mut params = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    for _ in 0..b {
        params.push(config.transform.sample(rng));
        masks.push(sample_placement(ih, iw, ph, pw, rng)?);
    }
    let transformed = transform_batch(&patches, &params)?;
    let adv = compose_batch(&cache.images.index_select(&si, 0)?, &transformed, &masks)?;
    let z_adv = target.embed_batch(&adv)?;
    let z_s = cache.embeddings.index_select(&si, 0)?;
    let tl = total_loss_tensor(&config.weights, &z_adv, &z_s, z_t.as_ref())?;
    let reg = match (&delta, &attacker.natural) {
        (Some(d), Some(head)) => latent_regularizer_tensor(d, head.manifest.weight)?,
        _ => tl.total.zeros_like()?,
    };
    Ok(BatchLoss { total: (&tl.total + &reg)?, pull: tl.pull, push: tl.push, reg, patches })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn probe_on_cache(attacker: &Attacker, target: &EmbedderHandle, cache: &Cache, data: &DatasetIndex, config: &TrainConfig) -> Result<f64> {
    let mut sampler = PairSampler::new(data, config.weights.mode, config.seed ^ PROBE_SALT)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ PROBE_SALT);
    let loss = batch_loss(attacker, target, cache, config, &mut sampler, &mut rng, PROBE_SALT, false)?;
    scalar(&loss.total)
}

/// Loss of the deterministic probe batch (eval-mode normalisation, fixed
/// pairs, transforms and placements). Recorded in every checkpoint.
pub fn probe_loss(
    attacker: &Attacker,
    target: &EmbedderHandle,
    data: &DatasetIndex,
    config: &TrainConfig,
    workers: usize,
) -> Result<f64> {
    let records: Vec<_> = data.usable().collect();
    let cache = Cache::build(&records, attacker, target, workers)?;
    probe_on_cache(attacker, target, &cache, data, config)
}

/// `batch_size` random `h × w` crops of the cached images: the "real"
/// samples for the discriminator.
fn real_crops(images: &Tensor, h: usize, w: usize, b: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (n, _, ih, iw) = images.dims4()?;
    let crops = (0..b)
        .map(|_| {
            let i = rng.random_range(0..n);
            let y = rng.random_range(0..=ih - h.min(ih));
            let x = rng.random_range(0..=iw - w.min(iw));
            images.get(i)?.narrow(1, y, h.min(ih))?.narrow(2, x, w.min(iw))
        })
        .collect::<candle_core::Result<Vec<_>>>()?;
    let t = Tensor::stack(&crops, 0)?;
    if t.dims()[2..] == [h, w] {
        Ok(t)
    } else {
        crate::imageops::resize_bilinear(&t, h, w)
    }
}

/// Train the patch generator; only generator parameters are updated.
pub fn train_generator(run: GeneratorRun) -> Result<(Checkpoint, Attacker)> {
    let config = run.config;
    config.validate()?;
    if run.target.role != Role::TargetWhitebox {
        return Err(Error::RoleViolation(format!(
            "generator training needs a white-box target, got {}",
            run.target.model_id
        )));
    }
    if config.naturalistic != run.naturalistic.is_some() {
        return Err(Error::config(
            "train.naturalistic",
            "naturalistic training needs a latent decoder and clean latent (and only then)",
        ));
    }
    let (ih, iw) = run.target.input_size();
    if config.patch_size.0 > ih || config.patch_size.1 > iw {
        return Err(Error::Placement(format!(
            "{}x{} patch exceeds {ih}x{iw} image",
            config.patch_size.0, config.patch_size.1
        )));
    }
    let mut backbone = run.backbone.clone();
    backbone.role = Role::TargetWhitebox;
    let encoder = register_embedder(&backbone)?;
    if encoder.input_size() != run.target.input_size() {
        return Err(Error::Shape(format!(
            "backbone input {:?} differs from target input {:?}",
            encoder.input_size(),
            run.target.input_size()
        )));
    }

    let output = match &run.naturalistic {
        None => OutputKind::Rgb,
        Some(n) => {
            let (c, h, w) = n.latent.shape()?;
            OutputKind::Latent { channels: c, height: h, width: w }
        }
    };
    let mut gcfg = GeneratorConfig::new(backbone.clone(), config.patch_size, config.weights.mode);
    gcfg.decoder_widths = config.decoder_widths;
    gcfg.output = output;
    gcfg.noise_channels = if config.gan.is_some() { GAN_NOISE_CHANNELS } else { 0 };
    let generator = PatchGenerator::for_encoder(gcfg, &encoder, config.seed)?;
    let natural = run.naturalistic.map(|n| NaturalHead {
        decoder: n.decoder,
        latent: n.latent.l,
        manifest: NaturalManifest { decoder: n.kind, dir: n.dir, weight: n.weight },
    });
    let attacker = Attacker { generator, encoder, natural };

    let records: Vec<&PersonRecord> = run.data.usable().collect();
    let cache = Cache::build(&records, &attacker, run.target, run.workers)?;
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| records.len().div_ceil(config.batch_size))
        .max(1);
    let total_steps = steps_per_epoch * config.epochs;

    let mut opt = Opt::new(config.optimizer, attacker.generator.trainable_vars(), config.lr)?;
    let mut disc = match &config.gan {
        Some(g) => {
            let d = Discriminator::new(g.disc_width, config.seed ^ 0xd15c)?;
            let o = AdamW::new(
                params::trainable_vars(d.varmap()),
                ParamsAdamW { lr: g.disc_lr, beta1: 0.5, weight_decay: 0.0, ..Default::default() },
            )?;
            Some((d, o, g.lambda_adv))
        }
        None => None,
    };

    std::fs::create_dir_all(run.out_dir)?;
    let loss_log = run.out_dir.join("loss_log.csv");
    let mut writer = csv::Writer::from_path(&loss_log)?;
    let mut sampler = PairSampler::new(run.data, config.weights.mode, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let fingerprint = config.fingerprint();
    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut global = 0usize;

    for epoch in 1..=config.epochs {
        let mut acc = [0.0f64; 4];
        for _ in 0..steps_per_epoch {
            let lr = cosine_lr(config.lr, global, total_steps);
            let noise_seed = config.seed.wrapping_mul(31).wrapping_add(global as u64);
            let loss = batch_loss(&attacker, run.target, &cache, config, &mut sampler, &mut rng, noise_seed, true)?;
            let objective = match &mut disc {
                None => loss.total.clone(),
                Some((d, d_opt, lambda_adv)) => {
                    let (ph, pw) = config.patch_size;
                    let real = real_crops(&cache.images, ph, pw, config.batch_size, &mut rng)?;
                    let d_loss = gan_discriminator_loss_tensor(&d.forward(&real)?, &d.forward(&loss.patches.detach())?)?;
                    d_opt.backward_step(&d_loss)?;
                    gan_generator_loss_tensor(&d.forward(&loss.patches)?, &loss.total, *lambda_adv)?
                }
            };
            opt.step(&objective, lr)?;
            let row = StepLoss {
                epoch,
                step: global,
                loss_total: scalar(&loss.total)?,
                loss_pull: scalar(&loss.pull)?,
                loss_push: scalar(&loss.push)?,
                loss_reg: scalar(&loss.reg)?,
            };
            if !row.loss_total.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite loss at step {global}")));
            }
            writer.serialize(row)?;
            for (a, v) in acc.iter_mut().zip([row.loss_total, row.loss_pull, row.loss_push, row.loss_reg]) {
                *a += v;
            }
            steps.push(row);
            global += 1;
        }
        let n = steps_per_epoch as f64;
        let stats = EpochStats {
            epoch,
            mean_total: acc[0] / n,
            mean_pull: acc[1] / n,
            mean_push: acc[2] / n,
            mean_reg: acc[3] / n,
        };
        log::info!("epoch {epoch}: mean loss {:.5}", stats.mean_total);
        epochs.push(stats);
        writer.flush()?;
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && epoch < config.epochs {
            let probe = probe_on_cache(&attacker, run.target, &cache, run.data, config)?;
            attacker.save(&run.out_dir.join(format!("generator_epoch{epoch:04}.safetensors")), epoch, Some(probe), Some(fingerprint.clone()))?;
        }
    }
    writer.flush()?;
    let probe = probe_on_cache(&attacker, run.target, &cache, run.data, config)?;
    let path = run.out_dir.join("generator.safetensors");
    attacker.save(&path, config.epochs, Some(probe), Some(fingerprint.clone()))?;
    Ok((
        Checkpoint {
            path,
            epoch: config.epochs,
            epochs,
            steps,
            fingerprint,
            probe_loss: probe,
            loss_log,
        },
        attacker,
    ))
}
