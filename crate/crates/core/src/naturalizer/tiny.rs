//! A small convolutional autoencoder used as the built-in latent decoder.
//!
//! Weights live in `<dir>/tiny_decoder.safetensors` with the architecture in
//! `<dir>/tiny_decoder.json`.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{
    conv2d, conv_transpose2d, AdamW, Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig,
    Optimizer, ParamsAdamW, VarBuilder, VarMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LatentDecoder;
use crate::error::{Error, Result};
use crate::params;

const WEIGHTS: &str = "tiny_decoder.safetensors";
const CONFIG: &str = "tiny_decoder.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub latent_channels: usize,
    pub width: usize,
}

impl Default for TinyConfig {
    fn default() -> Self {
        Self { latent_channels: 4, width: 32 }
    }
}

struct Net {
    enc: [Conv2d; 3],
    dec_in: Conv2d,
    ups: [ConvTranspose2d; 2],
    dec_out: Conv2d,
}

impl Net {
    fn new(vb: VarBuilder, cfg: TinyConfig) -> candle_core::Result<Self> {
        let w = cfg.width;
        let s2 = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        let same = Conv2dConfig { padding: 1, ..Default::default() };
        let up = ConvTranspose2dConfig { padding: 1, output_padding: 0, stride: 2, dilation: 1 };
        Ok(Self {
            enc: [
                conv2d(3, w, 3, s2, vb.pp("enc.0"))?,
                conv2d(w, 2 * w, 3, s2, vb.pp("enc.1"))?,
                conv2d(2 * w, cfg.latent_channels, 1, Default::default(), vb.pp("enc.2"))?,
            ],
            dec_in: conv2d(cfg.latent_channels, 2 * w, 3, same, vb.pp("dec.in"))?,
            ups: [
                conv_transpose2d(2 * w, w, 4, up, vb.pp("dec.up0"))?,
                conv_transpose2d(w, w, 4, up, vb.pp("dec.up1"))?,
            ],
            dec_out: conv2d(w, 3, 3, same, vb.pp("dec.out"))?,
        })
    }

    fn encode(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.enc[0].forward(x)?.relu()?;
        let h = self.enc[1].forward(&h)?.relu()?;
        self.enc[2].forward(&h)
    }

    fn decode(&self, l: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.dec_in.forward(l)?.relu()?;
        for u in &self.ups {
            h = u.forward(&h)?.relu()?;
        }
        self.dec_out.forward(&h)?.tanh()
    }
}

/// Frozen tiny autoencoder loaded from disk.
pub struct TinyAutoencoder {
    config: TinyConfig,
    net: Net,
    tensors: HashMap<String, Tensor>,
}

impl TinyAutoencoder {
    pub fn from_tensors(tensors: HashMap<String, Tensor>, config: TinyConfig) -> Result<Self> {
        let vb = VarBuilder::from_tensors(tensors.clone(), DType::F32, &Device::Cpu);
        let net = Net::new(vb, config).map_err(|e| Error::WeightsLoad {
            path: WEIGHTS.into(),
            reason: e.to_string(),
        })?;
        Ok(Self { config, net, tensors })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG);
        let config: TinyConfig = serde_json::from_str(&std::fs::read_to_string(&cfg_path).map_err(|e| {
            Error::Dependency(format!("cannot read {}: {e}", cfg_path.display()))
        })?)?;
        Self::from_tensors(params::load_tensors(&dir.join(WEIGHTS))?, config)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        params::save_tensors(&self.tensors, &dir.join(WEIGHTS))?;
        std::fs::write(dir.join(CONFIG), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }
}

impl LatentDecoder for TinyAutoencoder {
    fn id(&self) -> &str {
        "tiny"
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn downsample(&self) -> usize {
        4
    }

    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.net.encode(image)?)
    }

    fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        if latent.rank() != 4 || latent.dim(1)? != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent {:?} does not have {} channels",
                latent.dims(),
                self.config.latent_channels
            )));
        }
        Ok(self.net.decode(latent)?)
    }

    fn frozen_checksum(&self) -> Result<u64> {
        params::checksum(&self.tensors)
    }
}

/// Fit the autoencoder to random `crop`-sized windows of `images`
/// (`(N, 3, H, W)` in `[-1, 1]`) by mean-squared reconstruction, then save it
/// under `dir`. Returns the final batch loss.
pub fn fit_tiny_autoencoder(
    dir: &Path,
    images: &Tensor,
    crop: (usize, usize),
    steps: usize,
    config: TinyConfig,
    seed: u64,
) -> Result<f32> {
    let (n, _, ih, iw) = images.dims4()?;
    let (ch, cw) = crop;
    if ch > ih || cw > iw || ch % 4 != 0 || cw % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {ch}x{cw} must fit {ih}x{iw} and be a multiple of 4"
        )));
    }
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    let net = Net::new(vb, config)?;
    params::seeded_init(&varmap, seed)?;
    let mut opt = AdamW::new(
        params::trainable_vars(&varmap),
        ParamsAdamW { lr: 2e-3, weight_decay: 0.0, ..Default::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = f32::NAN;
    for _ in 0..steps {
        let batch = (0..16)
            .map(|_| {
                let i = rng.random_range(0..n);
                let y = rng.random_range(0..=ih - ch);
                let x = rng.random_range(0..=iw - cw);
                images.get(i)?.narrow(1, y, ch)?.narrow(2, x, cw)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let x = Tensor::stack(&batch, 0)?;
        let recon = net.decode(&net.encode(&x)?)?;
        let loss = (recon - &x)?.sqr()?.mean_all()?;
        opt.backward_step(&loss)?;
        last = loss.to_scalar()?;
    }
    TinyAutoencoder::from_tensors(params::snapshot(&varmap, None)?, config)?.save(dir)?;
    Ok(last)
}
