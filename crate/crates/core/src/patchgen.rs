//! Conditional encoder–decoder patch generator.
//!
//! A frozen backbone encodes source and target images. The top source and
//! target maps are concatenated and reduced to 512 channels by a 1×1
//! convolution, then four up-blocks (transpose conv ×2 → concat target skip →
//! 3×3 conv → ReLU → batch norm) climb back through strides 16, 8, 4 and 2.
//! A 3×3 head with tanh emits the RGB patch, bilinearly resized to `h × w`
//! when the decoder output does not already match.
//!
//! In untargeted mode the target branch is a set of learned constant maps.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, ModuleT, Tensor};
use candle_nn::{
    batch_norm, conv2d, conv_transpose2d, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig,
    ConvTranspose2d, ConvTranspose2dConfig, VarBuilder, VarMap,
};
use serde::{Deserialize, Serialize};

use crate::data::AttackMode;
use crate::embedders::{register_embedder, EmbedderHandle, ModelSpec, Role};
use crate::error::{Error, Result};
use crate::imageops::resize_bilinear;
use crate::naturalizer::{add_latent, decode_latent, load_decoder, DecoderKind, LatentDecoder};
use crate::params;

/// Channel count after source/target fusion.
pub const FUSED_CHANNELS: usize = 512;

/// What the output head emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutputKind {
    /// RGB patch in `[-1, 1]`.
    Rgb,
    /// Unbounded latent offset of shape `(channels, height, width)`.
    Latent { channels: usize, height: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub patch_height: usize,
    pub patch_width: usize,
    pub conditioning: AttackMode,
    pub decoder_widths: [usize; 4],
    pub output: OutputKind,
    /// Channels of standard-normal noise appended at fusion (GAN path); 0 disables.
    #[serde(default)]
    pub noise_channels: usize,
    /// Frozen encoder backbone.
    pub backbone: ModelSpec,
}

impl GeneratorConfig {
    pub fn new(backbone: ModelSpec, patch: (usize, usize), conditioning: AttackMode) -> Self {
        Self {
            patch_height: patch.0,
            patch_width: patch.1,
            conditioning,
            decoder_widths: [256, 128, 64, 32],
            output: OutputKind::Rgb,
            noise_channels: 0,
            backbone,
        }
    }
}

/// Checkpoint sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub h: usize,
    pub w: usize,
    pub conditioning: AttackMode,
    pub backbone_id: String,
    pub epoch: usize,
    pub config: GeneratorConfig,
    #[serde(default)]
    pub naturalistic: Option<NaturalManifest>,
    /// Loss of a fixed evaluation batch at save time (see the trainer).
    #[serde(default)]
    pub probe_loss: Option<f64>,
    #[serde(default)]
    pub config_fingerprint: Option<String>,
}

/// Where a naturalistic checkpoint finds its frozen decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalManifest {
    pub decoder: DecoderKind,
    pub dir: PathBuf,
    pub weight: f64,
}

/// Synthesised patch pixels, `(3, h, w)` in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Patch {
    pub pixels: Tensor,
}

impl Patch {
    pub fn size(&self) -> Result<(usize, usize)> {
        let (_, h, w) = self.pixels.dims3()?;
        Ok((h, w))
    }

    pub fn min_max(&self) -> Result<(f32, f32)> {
        let flat = self.pixels.flatten_all()?.to_dtype(DType::F32)?;
        Ok((flat.min(0)?.to_scalar()?, flat.max(0)?.to_scalar()?))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::data::tensor_to_rgb8(&self.pixels)?.save(path)?;
        Ok(())
    }
}

fn spatial(t: &Tensor) -> Result<(usize, usize)> {
    let r = t.rank();
    Ok((t.dim(r - 2)?, t.dim(r - 1)?))
}

/// Channel concatenation followed by a learned 1×1 reduction to 512 channels.
pub struct Fusion {
    conv: Conv2d,
}

impl Fusion {
    pub fn new(vb: VarBuilder, in_channels: usize) -> Result<Self> {
        Ok(Self {
            conv: conv2d(in_channels, FUSED_CHANNELS, 1, Conv2dConfig::default(), vb)?,
        })
    }

    /// `(B, C_s, s, s′)` ⊕ `(B, C_t, s, s′)` (⊕ optional noise) → `(B, 512, s, s′)`.
    pub fn forward(&self, source_top: &Tensor, target_top: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
        if spatial(source_top)? != spatial(target_top)? {
            return Err(Error::Shape(format!(
                "fusion inputs differ spatially: {:?} vs {:?}",
                source_top.dims(),
                target_top.dims()
            )));
        }
        let mut parts = vec![source_top.clone(), target_top.clone()];
        if let Some(z) = noise {
            parts.push(z.clone());
        }
        Ok(self.conv.forward(&Tensor::cat(&parts, 1)?)?.relu()?)
    }
}

/// Transpose conv ×2 → concat skip → 3×3 conv → ReLU → batch norm.
pub struct UpBlock {
    up: ConvTranspose2d,
    conv: Conv2d,
    bn: BatchNorm,
}

impl UpBlock {
    pub fn new(vb: VarBuilder, c_in: usize, c_skip: usize, c_out: usize) -> Result<Self> {
        let up_cfg = ConvTranspose2dConfig {
            padding: 1,
            output_padding: 0,
            stride: 2,
            dilation: 1,
        };
        let conv_cfg = Conv2dConfig { padding: 1, ..Default::default() };
        Ok(Self {
            up: conv_transpose2d(c_in, c_out, 4, up_cfg, vb.pp("up"))?,
            conv: conv2d(c_out + c_skip, c_out, 3, conv_cfg, vb.pp("conv"))?,
            bn: batch_norm(c_out, BatchNormConfig::default(), vb.pp("bn"))?,
        })
    }

    pub fn forward_t(&self, x: &Tensor, skip: &Tensor, train: bool) -> Result<Tensor> {
        let (h, w) = spatial(x)?;
        if spatial(skip)? != (2 * h, 2 * w) {
            return Err(Error::Shape(format!(
                "skip {:?} does not match upsampled size {}x{}",
                skip.dims(),
                2 * h,
                2 * w
            )));
        }
        let up = self.up.forward(x)?;
        let y = self.conv.forward(&Tensor::cat(&[&up, skip], 1)?)?.relu()?;
        Ok(self.bn.forward_t(&y, train)?)
    }
}

/// Encoder outputs for a batch: five stage maps (strides 2..32).
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub stages: Vec<Tensor>,
}

impl EncodedBatch {
    pub fn index_select(&self, idx: &Tensor) -> Result<Self> {
        Ok(Self {
            stages: self
                .stages
                .iter()
                .map(|s| s.index_select(idx, 0))
                .collect::<candle_core::Result<_>>()?,
        })
    }
}

pub struct PatchGenerator {
    pub config: GeneratorConfig,
    varmap: VarMap,
    fusion: Fusion,
    blocks: Vec<UpBlock>,
    head: Conv2d,
    /// Learned stand-ins for the target stages (untargeted mode), finest first.
    target_constants: Option<Vec<Tensor>>,
    top_size: (usize, usize),
}

impl PatchGenerator {
    /// Build a generator for an encoder with the given stage channels and
    /// stage spatial sizes (strides 2..32).
    pub fn new(
        config: GeneratorConfig,
        stage_channels: [usize; 5],
        stage_sizes: [(usize, usize); 5],
        seed: u64,
    ) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
        let fusion = Fusion::new(
            vb.pp("fusion"),
            2 * stage_channels[4] + config.noise_channels,
        )?;
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = FUSED_CHANNELS;
        for (i, &c_out) in config.decoder_widths.iter().enumerate() {
            let skip_c = stage_channels[3 - i];
            blocks.push(UpBlock::new(vb.pp(format!("up{i}")), c_in, skip_c, c_out)?);
            c_in = c_out;
        }
        let head_out = match config.output {
            OutputKind::Rgb => 3,
            OutputKind::Latent { channels, .. } => channels,
        };
        let head = conv2d(c_in, head_out, 3, Conv2dConfig { padding: 1, ..Default::default() }, vb.pp("head"))?;
        let target_constants = match config.conditioning {
            AttackMode::Targeted => None,
            AttackMode::Untargeted => Some(
                (0..5)
                    .map(|i| {
                        let (h, w) = stage_sizes[i];
                        vb.get((stage_channels[i], h, w), &format!("target_const.{i}"))
                    })
                    .collect::<candle_core::Result<Vec<_>>>()?,
            ),
        };
        params::seeded_init(&varmap, seed)?;
        // Start the stand-ins small so early patches are driven by the source.
        params::scale_vars(&varmap, "target_const", 0.1)?;
        Ok(Self { config, varmap, fusion, blocks, head, target_constants, top_size: stage_sizes[4] })
    }

    /// Generator plus its frozen encoder, sized from the encoder's input.
    pub fn for_encoder(config: GeneratorConfig, encoder: &EmbedderHandle, seed: u64) -> Result<Self> {
        let (h, w) = encoder.input_size();
        let probe = Tensor::zeros((1, 3, h, w), DType::F32, &Device::Cpu)?;
        let stages = encoder.stage_features(&probe)?;
        encoder.reset_call_count();
        let mut sizes = [(0, 0); 5];
        for (s, t) in sizes.iter_mut().zip(&stages) {
            *s = spatial(t)?;
        }
        Self::new(config, encoder.stage_channels(), sizes, seed)
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        params::trainable_vars(&self.varmap)
    }

    pub fn checksum(&self) -> Result<u64> {
        params::checksum(&params::snapshot(&self.varmap, None)?)
    }

    /// Decoder output before the final resize, `(B, C_out, 16s, 16s′)`.
    pub fn decode(
        &self,
        source: &EncodedBatch,
        target: Option<&EncodedBatch>,
        noise: Option<&Tensor>,
        train: bool,
    ) -> Result<Tensor> {
        let batch = source.stages[4].dim(0)?;
        let target_stages: Vec<Tensor> = match (&self.target_constants, target) {
            (None, Some(t)) => t.stages.clone(),
            (None, None) => return Err(Error::MissingTarget),
            (Some(consts), _) => consts
                .iter()
                .map(|c| {
                    let (ch, h, w) = c.dims3()?;
                    c.unsqueeze(0)?.broadcast_as((batch, ch, h, w))?.contiguous()
                })
                .collect::<candle_core::Result<_>>()?,
        };
        let mut x = self.fusion.forward(&source.stages[4], &target_stages[4], noise)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward_t(&x, &target_stages[3 - i], train)?;
        }
        Ok(self.head.forward(&x)?)
    }

    /// Batched forward pass: RGB patches `(B, 3, h, w)` or latent offsets.
    pub fn forward(
        &self,
        source: &EncodedBatch,
        target: Option<&EncodedBatch>,
        noise: Option<&Tensor>,
        train: bool,
    ) -> Result<Tensor> {
        let raw = self.decode(source, target, noise, train)?;
        match self.config.output {
            OutputKind::Rgb => resize_bilinear(&raw.tanh()?, self.config.patch_height, self.config.patch_width),
            OutputKind::Latent { height, width, .. } => resize_bilinear(&raw, height, width),
        }
    }

    /// Zeroes every target stage; used to probe target conditioning.
    pub fn forward_without_target(&self, source: &EncodedBatch) -> Result<Tensor> {
        let zeros = EncodedBatch {
            stages: source.stages.iter().map(|s| s.zeros_like()).collect::<candle_core::Result<_>>()?,
        };
        self.forward(source, Some(&zeros), None, false)
    }

    /// One forward pass for a single `(3, H, W)` source and optional target.
    pub fn generate_patch(
        &self,
        encoder: &EmbedderHandle,
        source: &Tensor,
        target: Option<&Tensor>,
    ) -> Result<Patch> {
        if self.config.conditioning == AttackMode::Targeted && target.is_none() {
            return Err(Error::MissingTarget);
        }
        if self.config.output != OutputKind::Rgb {
            return Err(Error::InvalidArgument(
                "latent-output generators need a decoder; use the naturalizer".into(),
            ));
        }
        let src = EncodedBatch { stages: encoder.stage_features(&source.unsqueeze(0)?)? };
        let tgt = match target {
            Some(t) if self.config.conditioning == AttackMode::Targeted => {
                Some(EncodedBatch { stages: encoder.stage_features(&t.unsqueeze(0)?)? })
            }
            _ => None,
        };
        let noise = self.noise_for(1, 0)?;
        let out = self.forward(&src, tgt.as_ref(), noise.as_ref(), false)?;
        Ok(Patch { pixels: out.squeeze(0)? })
    }

    /// Deterministic noise block for the GAN path (`None` when disabled).
    pub fn noise_for(&self, batch: usize, seed: u64) -> Result<Option<Tensor>> {
        if self.config.noise_channels == 0 {
            return Ok(None);
        }
        let (h, w) = self.top_size;
        Ok(Some(seeded_normal((batch, self.config.noise_channels, h, w), seed)?))
    }
}

/// Standard normal tensor from a seeded ChaCha stream.
pub fn seeded_normal(shape: (usize, usize, usize, usize), seed: u64) -> Result<Tensor> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

/// Frozen decoder path of a naturalistic generator: the generator emits `δ`
/// and the patch is `decode(l + δ)`.
pub struct NaturalHead {
    pub decoder: Box<dyn LatentDecoder>,
    /// Clean latent `(C, h_l, w_l)`.
    pub latent: Tensor,
    pub manifest: NaturalManifest,
}

/// Generator, its frozen encoder and (optionally) the latent decoder.
pub struct Attacker {
    pub generator: PatchGenerator,
    pub encoder: EmbedderHandle,
    pub natural: Option<NaturalHead>,
}

/// Images per encoder forward pass when caching features.
const ENCODE_CHUNK: usize = 16;

impl Attacker {
    pub fn conditioning(&self) -> AttackMode {
        self.generator.config.conditioning
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (self.generator.config.patch_height, self.generator.config.patch_width)
    }

    /// Encoder stage features for an `(N, 3, H, W)` batch, computed in chunks.
    pub fn encode(&self, images: &Tensor) -> Result<EncodedBatch> {
        let n = images.dim(0)?;
        let mut per_stage: Vec<Vec<Tensor>> = vec![Vec::new(); 5];
        let mut start = 0;
        while start < n {
            let len = ENCODE_CHUNK.min(n - start);
            let stages = self.encoder.stage_features(&images.narrow(0, start, len)?)?;
            for (acc, s) in per_stage.iter_mut().zip(stages) {
                acc.push(s.detach());
            }
            start += len;
        }
        Ok(EncodedBatch {
            stages: per_stage
                .iter()
                .map(|v| Tensor::cat(v, 0))
                .collect::<candle_core::Result<_>>()?,
        })
    }

    /// Patches `(B, 3, h, w)` plus the latent offsets when naturalistic.
    pub fn patches(
        &self,
        source: &EncodedBatch,
        target: Option<&EncodedBatch>,
        noise: Option<&Tensor>,
        train: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let raw = self.generator.forward(source, target, noise, train)?;
        match &self.natural {
            None => Ok((raw, None)),
            Some(head) => {
                let (h, w) = self.patch_size();
                let lbar = add_latent(&head.latent, &raw)?;
                Ok((decode_latent(head.decoder.as_ref(), &lbar, h, w)?, Some(raw)))
            }
        }
    }

    /// Eval-mode patches for raw images; `targets` is ignored when untargeted.
    pub fn patches_for_images(&self, sources: &Tensor, targets: Option<&Tensor>) -> Result<Tensor> {
        if self.conditioning() == AttackMode::Targeted && targets.is_none() {
            return Err(Error::MissingTarget);
        }
        let src = self.encode(sources)?;
        let tgt = match targets {
            Some(t) if self.conditioning() == AttackMode::Targeted => Some(self.encode(t)?),
            _ => None,
        };
        let noise = self.generator.noise_for(sources.dim(0)?, 0)?;
        Ok(self.patches(&src, tgt.as_ref(), noise.as_ref(), false)?.0)
    }

    /// Single-image convenience over [`Attacker::patches_for_images`].
    pub fn generate_patch(&self, source: &Tensor, target: Option<&Tensor>) -> Result<Patch> {
        if self.conditioning() == AttackMode::Targeted && target.is_none() {
            return Err(Error::MissingTarget);
        }
        let t = target.map(|t| t.unsqueeze(0)).transpose()?;
        let out = self.patches_for_images(&source.unsqueeze(0)?, t.as_ref())?;
        Ok(Patch { pixels: out.squeeze(0)? })
    }

    pub fn save(&self, path: &Path, epoch: usize, probe_loss: Option<f64>, fingerprint: Option<String>) -> Result<()> {
        let mut tensors = params::snapshot(self.generator.varmap(), None)?;
        if let Some(head) = &self.natural {
            tensors.insert(LATENT_KEY.into(), head.latent.clone());
        }
        params::save_tensors(&tensors, path)?;
        let manifest = GeneratorManifest {
            h: self.generator.config.patch_height,
            w: self.generator.config.patch_width,
            conditioning: self.conditioning(),
            backbone_id: self.encoder.model_id.clone(),
            epoch,
            config: self.generator.config.clone(),
            naturalistic: self.natural.as_ref().map(|n| n.manifest.clone()),
            probe_loss,
            config_fingerprint: fingerprint,
        };
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Load a checkpoint written by [`Attacker::save`].
    pub fn load(path: &Path) -> Result<(Self, GeneratorManifest)> {
        let manifest_path = path.with_extension("json");
        let manifest: GeneratorManifest = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path).map_err(|e| Error::WeightsLoad {
                path: manifest_path.clone(),
                reason: e.to_string(),
            })?,
        )?;
        let mut backbone = manifest.config.backbone.clone();
        backbone.role = Role::TargetWhitebox;
        let encoder = register_embedder(&backbone)?;
        let generator = PatchGenerator::for_encoder(manifest.config.clone(), &encoder, 0)?;
        let mut tensors = params::load_tensors(path)?;
        let latent = tensors.remove(LATENT_KEY);
        params::restore(generator.varmap(), &tensors)?;
        let natural = match (&manifest.naturalistic, latent) {
            (None, _) => None,
            (Some(m), Some(latent)) => Some(NaturalHead {
                decoder: load_decoder(m.decoder, &m.dir)?,
                latent,
                manifest: m.clone(),
            }),
            (Some(_), None) => {
                return Err(Error::WeightsLoad {
                    path: path.to_path_buf(),
                    reason: "naturalistic checkpoint lacks its latent".into(),
                })
            }
        };
        Ok((Self { generator, encoder, natural }, manifest))
    }
}

const LATENT_KEY: &str = "natural.latent";
