//! Registry of frozen feature extractors.
//!
//! Every handle exposes unit-norm embeddings and, for white-box handles, the
//! per-stage feature maps at strides 2, 4, 8, 16 and 32. The last three of
//! those form the [`FeaturePyramid`].

mod depthwise;
mod layers;
mod osnet;
mod resnet;
mod small_cnn;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{linear, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params;

pub use layers::global_avg_pool;

/// `d`-dimensional feature vector produced by an embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub model_id: String,
}

impl Embedding {
    pub fn new(vector: Vec<f32>, model_id: impl Into<String>) -> Self {
        Self { vector, model_id: model_id.into() }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            for v in &mut self.vector {
                *v = (*v as f64 / n) as f32;
            }
        }
        self
    }
}

/// Three feature maps, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn top(&self) -> &Tensor {
        &self.levels[2]
    }

    /// Spatial `(h, w)` of each level.
    pub fn spatial(&self) -> Result<[(usize, usize); 3]> {
        let mut out = [(0, 0); 3];
        for (o, l) in out.iter_mut().zip(&self.levels) {
            let r = l.rank();
            *o = (l.dim(r - 2)?, l.dim(r - 1)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "small-cnn")]
    SmallCnn,
    #[serde(rename = "residual-50")]
    Residual50,
    #[serde(rename = "osnet-like")]
    OsnetLike,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::SmallCnn => "small-cnn",
            Arch::Residual50 => "residual-50",
            Arch::OsnetLike => "osnet-like",
        }
    }

    pub fn default_width(self) -> usize {
        match self {
            Arch::SmallCnn => 16,
            Arch::Residual50 | Arch::OsnetLike => 64,
        }
    }

    pub fn default_embedding_dim(self) -> usize {
        match self {
            Arch::SmallCnn => 128,
            Arch::Residual50 | Arch::OsnetLike => 512,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-cnn" => Ok(Arch::SmallCnn),
            "residual-50" => Ok(Arch::Residual50),
            "osnet-like" => Ok(Arch::OsnetLike),
            other => Err(Error::Registry(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TargetWhitebox,
    AuxiliaryBlackbox,
}

/// Declarative description of an embedder to register.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// One of `small-cnn`, `residual-50`, `osnet-like`.
    pub arch: String,
    /// `"random"` or a path to a `.safetensors` file with a sibling `.json` manifest.
    #[serde(default = "default_weights")]
    pub weights: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default = "default_input")]
    pub input_size: (usize, usize),
    #[serde(default = "default_role")]
    pub role: Role,
}

fn default_weights() -> String {
    "random".into()
}

fn default_input() -> (usize, usize) {
    (256, 128)
}

fn default_role() -> Role {
    Role::TargetWhitebox
}

impl ModelSpec {
    pub fn random(arch: Arch, seed: u64) -> Self {
        Self {
            arch: arch.as_str().into(),
            weights: default_weights(),
            seed,
            width: None,
            embedding_dim: None,
            input_size: default_input(),
            role: Role::TargetWhitebox,
        }
    }

    pub fn arch(&self) -> Result<Arch> {
        self.arch.parse()
    }
}

/// Sidecar JSON written next to every weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub arch: Arch,
    pub embedding_dim: usize,
    pub width: usize,
    pub input_size: (usize, usize),
    pub train_dataset: String,
    pub version: String,
}

impl ModelManifest {
    pub fn path_for(weights: &Path) -> PathBuf {
        weights.with_extension("json")
    }
}

pub(crate) trait Network: Send + Sync {
    /// Stage outputs at strides 2, 4, 8, 16, 32.
    fn stages(&self, x: &Tensor, train: bool) -> candle_core::Result<Vec<Tensor>>;
    fn stage_channels(&self) -> [usize; 5];
}

/// Backbone plus linear embedding head (and an optional identity classifier).
pub struct EmbedderNet {
    backbone: Box<dyn Network>,
    head: Linear,
    classifier: Option<Linear>,
}

impl EmbedderNet {
    pub fn new(
        vb: VarBuilder,
        arch: Arch,
        width: usize,
        embedding_dim: usize,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let backbone: Box<dyn Network> = match arch {
            Arch::SmallCnn => Box::new(small_cnn::SmallCnn::new(vb.pp("backbone"), width)?),
            Arch::Residual50 => Box::new(resnet::Residual50::new(vb.pp("backbone"), width)?),
            Arch::OsnetLike => Box::new(osnet::OsnetLike::new(vb.pp("backbone"), width)?),
        };
        let top = backbone.stage_channels()[4];
        let head = linear(top, embedding_dim, vb.pp("head"))?;
        let classifier = match num_classes {
            Some(n) => Some(linear(embedding_dim, n, vb.pp("classifier"))?),
            None => None,
        };
        Ok(Self { backbone, head, classifier })
    }

    pub fn stages(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        Ok(self.backbone.stages(x, train)?)
    }

    pub fn stage_channels(&self) -> [usize; 5] {
        self.backbone.stage_channels()
    }

    /// Unnormalised embedding from the top stage.
    pub fn embed_raw(&self, top: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(&global_avg_pool(top)?)?)
    }

    /// `(unnormalised embedding, top stage)` for a batch.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let stages = self.stages(x, train)?;
        let top = stages.into_iter().last().expect("five stages");
        Ok((self.embed_raw(&top)?, top))
    }

    pub fn classify(&self, emb: &Tensor) -> Result<Tensor> {
        let c = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("network has no classifier head".into()))?;
        Ok(c.forward(emb)?)
    }
}

/// Row-wise L2 normalisation of a `(B, d)` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::INFINITY)?;
    Ok(x.broadcast_div(&norm)?)
}

/// A frozen, registered embedder.
pub struct EmbedderHandle {
    pub model_id: String,
    pub role: Role,
    pub embedding_dim: usize,
    pub manifest: ModelManifest,
    net: EmbedderNet,
    tensors: HashMap<String, Tensor>,
    calls: AtomicUsize,
}

impl fmt::Debug for EmbedderHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbedderHandle")
            .field("model_id", &self.model_id)
            .field("role", &self.role)
            .field("embedding_dim", &self.embedding_dim)
            .field("arch", &self.manifest.arch)
            .finish()
    }
}

impl EmbedderHandle {
    /// Build a frozen handle from constant tensors (no gradients reach them).
    pub fn from_tensors(
        tensors: HashMap<String, Tensor>,
        manifest: ModelManifest,
        role: Role,
        model_id: impl Into<String>,
    ) -> Result<Self> {
        let inference: HashMap<String, Tensor> = tensors
            .into_iter()
            .filter(|(k, _)| !k.starts_with("classifier"))
            .collect();
        let vb = VarBuilder::from_tensors(inference.clone(), DType::F32, &Device::Cpu);
        let net = EmbedderNet::new(vb, manifest.arch, manifest.width, manifest.embedding_dim, None)
            .map_err(|e| Error::WeightsLoad {
                path: PathBuf::from(manifest.arch.as_str()),
                reason: e.to_string(),
            })?;
        Ok(Self {
            model_id: model_id.into(),
            role,
            embedding_dim: manifest.embedding_dim,
            manifest,
            net,
            tensors: inference,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.manifest.input_size
    }

    /// Number of inference calls served so far.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_call_count(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn checksum(&self) -> Result<u64> {
        params::checksum(&self.tensors)
    }

    pub fn tensors(&self) -> &HashMap<String, Tensor> {
        &self.tensors
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let (h, w) = self.manifest.input_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != h || dims[3] != w {
            return Err(Error::Shape(format!(
                "{} expects (B, 3, {h}, {w}) input, got {dims:?}",
                self.model_id
            )));
        }
        Ok(())
    }

    /// Unit-norm embeddings of a `(B, 3, H, W)` batch; differentiable w.r.t. the input.
    pub fn embed_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (raw, _) = self.net.forward_t(x, false)?;
        l2_normalize(&raw)
    }

    pub fn embed(&self, image: &Tensor) -> Result<Embedding> {
        let batch = image.unsqueeze(0)?;
        let z = self.embed_batch(&batch)?.squeeze(0)?;
        Ok(Embedding::new(z.to_vec1::<f32>()?, self.model_id.clone()))
    }

    fn require_whitebox(&self, what: &str) -> Result<()> {
        if self.role != Role::TargetWhitebox {
            return Err(Error::RoleViolation(format!(
                "{what} requested from black-box embedder {}",
                self.model_id
            )));
        }
        Ok(())
    }

    /// All five stage outputs of a `(B, 3, H, W)` batch (white-box only).
    pub fn stage_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.require_whitebox("stage features")?;
        self.check_batch(x)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.net.stages(x, false)
    }

    /// Embeddings and stage outputs from a single forward pass (white-box only).
    pub fn embed_with_stages(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.require_whitebox("stage features")?;
        self.check_batch(x)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let stages = self.net.stages(x, false)?;
        let raw = self.net.embed_raw(stages.last().expect("five stages"))?;
        Ok((l2_normalize(&raw)?, stages))
    }

    pub fn stage_channels(&self) -> [usize; 5] {
        self.net.stage_channels()
    }

    /// Last three stages of a single `(3, H, W)` image.
    pub fn features_multiscale(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let stages = self.stage_features(&image.unsqueeze(0)?)?;
        let levels: Vec<Tensor> = stages[2..]
            .iter()
            .map(|t| t.squeeze(0))
            .collect::<candle_core::Result<_>>()?;
        Ok(FeaturePyramid {
            levels: levels.try_into().expect("three levels"),
        })
    }

    /// Persist weights plus manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        params::save_tensors(&self.tensors, path)?;
        std::fs::write(
            ModelManifest::path_for(path),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    /// Same weights under a different role and a fresh call counter.
    pub fn with_role(&self, role: Role) -> Result<Self> {
        Self::from_tensors(self.tensors.clone(), self.manifest.clone(), role, self.model_id.clone())
    }
}

/// Build a trainable network; returns its variable map.
pub fn build_trainable(
    arch: Arch,
    width: usize,
    embedding_dim: usize,
    num_classes: Option<usize>,
    seed: u64,
) -> Result<(VarMap, EmbedderNet)> {
    let varmap = VarMap::new();
    let vb = VarBuilder::from_varmap(&varmap, DType::F32, &Device::Cpu);
    let net = EmbedderNet::new(vb, arch, width, embedding_dim, num_classes)?;
    params::seeded_init(&varmap, seed)?;
    Ok((varmap, net))
}

pub fn register_embedder(spec: &ModelSpec) -> Result<EmbedderHandle> {
    let arch = spec.arch()?;
    if spec.weights == "random" {
        let width = spec.width.unwrap_or(arch.default_width());
        let dim = spec.embedding_dim.unwrap_or(arch.default_embedding_dim());
        let (varmap, _) = build_trainable(arch, width, dim, None, spec.seed)?;
        let manifest = ModelManifest {
            arch,
            embedding_dim: dim,
            width,
            input_size: spec.input_size,
            train_dataset: "none".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        };
        let id = format!("{arch}-d{dim}-seed{}", spec.seed);
        return EmbedderHandle::from_tensors(params::snapshot(&varmap, None)?, manifest, spec.role, id);
    }
    load_embedder(Path::new(&spec.weights), Some(arch), spec.role)
}

/// Load a weights file and its manifest; `expect` guards the architecture.
pub fn load_embedder(path: &Path, expect: Option<Arch>, role: Role) -> Result<EmbedderHandle> {
    let manifest_path = ModelManifest::path_for(path);
    let manifest: ModelManifest = serde_json::from_str(
        &std::fs::read_to_string(&manifest_path).map_err(|e| Error::WeightsLoad {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?,
    )
    .map_err(|e| Error::WeightsLoad {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if let Some(a) = expect {
        if a != manifest.arch {
            return Err(Error::WeightsLoad {
                path: path.to_path_buf(),
                reason: format!("manifest says {}, spec says {a}", manifest.arch),
            });
        }
    }
    let tensors = params::load_tensors(path)?;
    let id = format!(
        "{}-d{}-{}",
        manifest.arch,
        manifest.embedding_dim,
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("weights")
    );
    EmbedderHandle::from_tensors(tensors, manifest, role, id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::cosine;

    fn small(seed: u64, input: (usize, usize)) -> EmbedderHandle {
        let mut spec = ModelSpec::random(Arch::SmallCnn, seed);
        spec.input_size = input;
        spec.width = Some(8);
        register_embedder(&spec).unwrap()
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let h = small(7, (64, 32));
        let img = Tensor::randn(0f32, 0.5, (3, 64, 32), &Device::Cpu).unwrap();
        let a = h.embed(&img).unwrap();
        let b = h.embed(&img).unwrap();
        assert_eq!(a.dim(), 128);
        assert!((a.norm() - 1.0).abs() < 1e-5);
        assert_eq!(a, b);
        assert!((cosine(&a.vector, &a.vector).unwrap() - 1.0).abs() < 1e-6);
        let again = small(7, (64, 32)).embed(&img).unwrap();
        assert_eq!(a.vector, again.vector);
        assert_eq!(h.call_count(), 2);
    }

    #[test]
    fn resolution_mismatch() {
        let h = small(1, (64, 32));
        let img = Tensor::zeros((3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(h.embed(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn registry_errors() {
        let mut spec = ModelSpec::random(Arch::SmallCnn, 0);
        spec.arch = "foo".into();
        assert!(matches!(register_embedder(&spec), Err(Error::Registry(_))));
        let mut spec = ModelSpec::random(Arch::SmallCnn, 0);
        spec.weights = "/nonexistent/weights.safetensors".into();
        assert!(matches!(register_embedder(&spec), Err(Error::WeightsLoad { .. })));
    }

    #[test]
    fn pyramid_and_roles() {
        let h = small(3, (64, 32));
        let zero = Tensor::zeros((3, 64, 32), DType::F32, &Device::Cpu).unwrap();
        let p = h.features_multiscale(&zero).unwrap();
        assert_eq!(p.spatial().unwrap(), [(8, 4), (4, 2), (2, 1)]);
        for l in &p.levels {
            let v: Vec<f32> = l.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
        let bb = h.with_role(Role::AuxiliaryBlackbox).unwrap();
        assert!(matches!(bb.features_multiscale(&zero), Err(Error::RoleViolation(_))));
        assert!(bb.embed(&zero).is_ok());
    }

    #[test]
    fn residual_pyramid_strides() {
        let mut spec = ModelSpec::random(Arch::Residual50, 0);
        spec.width = Some(4);
        let h = register_embedder(&spec).unwrap();
        let zero = Tensor::zeros((3, 256, 128), DType::F32, &Device::Cpu).unwrap();
        let p = h.features_multiscale(&zero).unwrap();
        assert_eq!(p.spatial().unwrap(), [(32, 16), (16, 8), (8, 4)]);
        assert_eq!(h.stage_channels()[4], 128);
    }

    #[test]
    fn osnet_pyramid_strides() {
        let mut spec = ModelSpec::random(Arch::OsnetLike, 0);
        spec.width = Some(8);
        spec.input_size = (128, 64);
        let h = register_embedder(&spec).unwrap();
        let zero = Tensor::zeros((3, 128, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(h.features_multiscale(&zero).unwrap().spatial().unwrap(), [(16, 8), (8, 4), (4, 2)]);
        let img = Tensor::randn(0f32, 0.5, (3, 128, 64), &Device::Cpu).unwrap();
        assert!((h.embed(&img).unwrap().norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn save_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let h = small(5, (64, 32));
        let p = dir.path().join("emb.safetensors");
        h.save(&p).unwrap();
        let back = load_embedder(&p, Some(Arch::SmallCnn), Role::TargetWhitebox).unwrap();
        assert_eq!(back.checksum().unwrap(), h.checksum().unwrap());
        assert!(load_embedder(&p, Some(Arch::OsnetLike), Role::TargetWhitebox).is_err());
    }
}
