//! Stable Diffusion v1.x VAE as the latent decoder.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::stable_diffusion::vae::{AutoEncoderKL, AutoEncoderKLConfig};

use super::LatentDecoder;
use crate::error::{Error, Result};
use crate::params;

/// Latent scaling used by SD v1.x pipelines.
const SCALE: f64 = 0.18215;

pub struct SdVae {
    vae: AutoEncoderKL,
    checksum: u64,
}

impl SdVae {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("vae").join("diffusion_pytorch_model.safetensors");
        if !path.is_file() {
            return Err(Error::Dependency(format!("missing {}", path.display())));
        }
        let tensors = params::load_tensors(&path)?;
        let checksum = params::checksum(&tensors)?;
        let vb = VarBuilder::from_tensors(tensors, DType::F32, &Device::Cpu);
        let config = AutoEncoderKLConfig {
            block_out_channels: vec![128, 256, 512, 512],
            layers_per_block: 2,
            latent_channels: 4,
            norm_num_groups: 32,
            use_quant_conv: true,
            use_post_quant_conv: true,
        };
        let vae = AutoEncoderKL::new(vb, 3, 3, config).map_err(|e| Error::WeightsLoad {
            path,
            reason: e.to_string(),
        })?;
        Ok(Self { vae, checksum })
    }
}

impl LatentDecoder for SdVae {
    fn id(&self) -> &str {
        "sd-vae"
    }

    fn latent_channels(&self) -> usize {
        4
    }

    fn downsample(&self) -> usize {
        8
    }

    /// Draws one sample from the posterior; the backend does not expose its mean.
    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        Ok((self.vae.encode(image)?.sample()? * SCALE)?)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        Ok(self.vae.decode(&(latent / SCALE)?)?.clamp(-1.0, 1.0)?)
    }

    fn frozen_checksum(&self) -> Result<u64> {
        Ok(self.checksum)
    }
}
