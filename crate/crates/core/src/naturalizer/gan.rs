//! Binary-cross-entropy GAN objectives and a small patch discriminator.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{conv2d, linear, Conv2d, Conv2dConfig, Linear, VarBuilder, VarMap};

use crate::embedders::global_avg_pool;
use crate::error::{Error, Result};
use crate::params;

/// Scores are clamped to `[ε, 1 − ε]` before taking logs.
pub const GAN_EPS: f64 = 1e-7;

fn clamp_score(s: f64) -> f64 {
    s.clamp(GAN_EPS, 1.0 - GAN_EPS)
}

fn mean_log(scores: &[f64], f: impl Fn(f64) -> f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty score list".into()));
    }
    Ok(scores.iter().map(|&s| f(clamp_score(s)).ln()).sum::<f64>() / scores.len() as f64)
}

/// `L_D = −[E log D(x) + E log(1 − D(G(z)))]`.
pub fn gan_discriminator_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    Ok(-(mean_log(real, |s| s)? + mean_log(fake, |s| 1.0 - s)?))
}

/// `L_G = −E log D(G(z)) + λ_adv · L_adv`.
pub fn gan_generator_loss(fake: &[f64], adv_loss: f64, lambda_adv: f64) -> Result<f64> {
    Ok(-mean_log(fake, |s| s)? + lambda_adv * adv_loss)
}

fn mean_log_tensor(scores: &Tensor, complement: bool) -> Result<Tensor> {
    let s = scores.clamp(GAN_EPS, 1.0 - GAN_EPS)?;
    let s = if complement { s.affine(-1.0, 1.0)? } else { s };
    Ok(s.log()?.mean_all()?)
}

pub fn gan_discriminator_loss_tensor(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    Ok((mean_log_tensor(real, false)? + mean_log_tensor(fake, true)?)?.neg()?)
}

pub fn gan_generator_loss_tensor(fake: &Tensor, adv_loss: &Tensor, lambda_adv: f64) -> Result<Tensor> {
    Ok((mean_log_tensor(fake, false)?.neg()? + (adv_loss * lambda_adv)?)?)
}

/// Three strided convolutions, global pooling and a sigmoid realness score.
pub struct Discriminator {
    varmap: VarMap,
    convs: Vec<Conv2d>,
    out: Linear,
}

impl Discriminator {
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let cfg = Conv2dConfig { padding: 1, stride: 2, ..Default::default() };
        let chans = [3, width, 2 * width, 4 * width];
        let convs = (0..3)
            .map(|i| conv2d(chans[i], chans[i + 1], 3, cfg, vb.pp(format!("conv{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let out = linear(chans[3], 1, vb.pp("out"))?;
        params::seeded_init(&varmap, seed)?;
        Ok(Self { varmap, convs, out })
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Realness in `(0, 1)` for a `(B, 3, h, w)` batch, shape `(B,)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            let y = c.forward(&h)?;
            h = candle_nn::ops::leaky_relu(&y, 0.2)?;
        }
        let logits = self.out.forward(&global_avg_pool(&h)?)?.squeeze(1)?;
        Ok(candle_nn::ops::sigmoid(&logits)?)
    }
}
