//! Natural-looking patches: additive perturbation of a frozen latent
//! decoder's input, and a GAN realism objective.

mod gan;
#[cfg(feature = "sd-vae")]
mod sdvae;
mod tiny;

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::load_image_path;
use crate::error::{Error, Result};

pub use gan::{
    gan_discriminator_loss, gan_discriminator_loss_tensor, gan_generator_loss,
    gan_generator_loss_tensor, Discriminator, GAN_EPS,
};
pub use tiny::{fit_tiny_autoencoder, TinyAutoencoder, TinyConfig};

/// Default weight of the squared-norm latent penalty.
pub const DEFAULT_LATENT_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    DiffusionSampled,
    EncodedFromImage,
}

/// A clean latent `l` of shape `(C, h_l, w_l)`.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub l: Tensor,
    pub source: LatentSource,
}

impl LatentCode {
    /// Encode a benign reference image through the frozen encoder.
    pub fn from_image(decoder: &dyn LatentDecoder, image: &Path, h: usize, w: usize) -> Result<Self> {
        let x = load_image_path(image, h, w)?.unsqueeze(0)?;
        Ok(Self {
            l: decoder.encode(&x)?.squeeze(0)?,
            source: LatentSource::EncodedFromImage,
        })
    }

    /// Load a latent produced by an external sampling pipeline (tensor named `latent`).
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut tensors = crate::params::load_tensors(path)?;
        let l = tensors.remove("latent").ok_or_else(|| Error::WeightsLoad {
            path: path.to_path_buf(),
            reason: "no tensor named `latent`".into(),
        })?;
        let l = if l.rank() == 4 { l.squeeze(0)? } else { l };
        Ok(Self { l: l.to_dtype(DType::F32)?, source: LatentSource::DiffusionSampled })
    }

    pub fn shape(&self) -> Result<(usize, usize, usize)> {
        Ok(self.l.dims3()?)
    }
}

/// A learnable offset `δ` with the shape of `l`.
#[derive(Debug, Clone)]
pub struct LatentPerturbation {
    pub delta: Tensor,
    pub norm_budget: f64,
}

/// `l̄ = l + δ`, elementwise, no clamping.
pub fn perturb_latent(l: &LatentCode, delta: &LatentPerturbation) -> Result<Tensor> {
    add_latent(&l.l, &delta.delta)
}

/// Broadcasting-free sum used by both single and batched paths.
pub fn add_latent(l: &Tensor, delta: &Tensor) -> Result<Tensor> {
    let ld = l.dims();
    let dd = delta.dims();
    if ld == dd {
        return Ok((l + delta)?);
    }
    if dd.len() == ld.len() + 1 && &dd[1..] == ld {
        return Ok(delta.broadcast_add(l)?);
    }
    Err(Error::Shape(format!("latent {ld:?} vs perturbation {dd:?}")))
}

/// `weight · ‖δ‖₂²`.
pub fn latent_regularizer(delta: &[f64], weight: f64) -> f64 {
    weight * delta.iter().map(|d| d * d).sum::<f64>()
}

/// Differentiable regularizer; for a `(B, C, h, w)` batch the per-sample
/// penalties are averaged.
pub fn latent_regularizer_tensor(delta: &Tensor, weight: f64) -> Result<Tensor> {
    let sq = delta.sqr()?.sum_all()?;
    let per = if delta.rank() == 4 { (sq / delta.dim(0)? as f64)? } else { sq };
    Ok((per * weight)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    #[default]
    Tiny,
    SdVae,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "sd-vae" => Ok(Self::SdVae),
            other => Err(Error::config("naturalizer.decoder", format!("unknown decoder `{other}`"))),
        }
    }
}

/// A frozen latent decoder (and its matching encoder).
pub trait LatentDecoder: Send + Sync {
    fn id(&self) -> &str;
    fn latent_channels(&self) -> usize;
    /// Spatial reduction factor between pixels and latents.
    fn downsample(&self) -> usize;
    /// `(B, 3, H, W)` in `[-1, 1]` → `(B, C, H/f, W/f)`.
    fn encode(&self, image: &Tensor) -> Result<Tensor>;
    /// `(B, C, h, w)` → `(B, 3, h·f, w·f)` in `[-1, 1]`; differentiable w.r.t. the latent.
    fn decode(&self, latent: &Tensor) -> Result<Tensor>;
    /// Digest of every frozen parameter.
    fn frozen_checksum(&self) -> Result<u64>;
}

/// Decode `l̄` and resize to the patch size.
pub fn decode_latent(decoder: &dyn LatentDecoder, latent: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let batched = latent.rank() == 4;
    let x = if batched { latent.clone() } else { latent.unsqueeze(0)? };
    let img = decoder.decode(&x)?;
    let (_, _, ih, iw) = img.dims4()?;
    let img = if (ih, iw) == (h, w) {
        img
    } else {
        crate::imageops::resize_bilinear(&img, h, w)?
    };
    Ok(if batched { img } else { img.squeeze(0)? })
}

/// Open frozen decoder weights from a local directory; never downloads.
pub fn load_decoder(kind: DecoderKind, dir: &Path) -> Result<Box<dyn LatentDecoder>> {
    if !dir.is_dir() {
        return Err(Error::Dependency(format!(
            "latent decoder directory {} not found; {}",
            dir.display(),
            install_hint(kind)
        )));
    }
    match kind {
        DecoderKind::Tiny => Ok(Box::new(TinyAutoencoder::load(dir)?)),
        DecoderKind::SdVae => load_sd_vae(dir),
    }
}

fn install_hint(kind: DecoderKind) -> &'static str {
    match kind {
        DecoderKind::Tiny => {
            "create one with `advpatch make-decoder --data <dataset> --out <dir>`"
        }
        DecoderKind::SdVae => {
            "place a Stable Diffusion VAE at <dir>/vae/diffusion_pytorch_model.safetensors \
             and build with `--features sd-vae`"
        }
    }
}

#[cfg(feature = "sd-vae")]
fn load_sd_vae(dir: &Path) -> Result<Box<dyn LatentDecoder>> {
    Ok(Box::new(sdvae::SdVae::load(dir)?))
}

#[cfg(not(feature = "sd-vae"))]
fn load_sd_vae(_dir: &Path) -> Result<Box<dyn LatentDecoder>> {
    Err(Error::Dependency(format!(
        "sd-vae decoder support is not compiled in; {}",
        install_hint(DecoderKind::SdVae)
    )))
}

/// Write a decoded patch as an 8-bit PNG.
pub fn export_png(patch: &Tensor, path: &Path) -> Result<PathBuf> {
    let img = crate::data::tensor_to_rgb8(patch)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(path.to_path_buf())
}
