//! Declarative run configuration (TOML) with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composer::TransformSpec;
use crate::data::Layout;
use crate::embedders::ModelSpec;
use crate::error::{Error, Result};
use crate::evalkit::{Condition, RetrievalProtocol, SweepMode};
use crate::fixture::FixtureSpec;
use crate::naturalizer::{DecoderKind, DEFAULT_LATENT_WEIGHT};
use crate::trainer::{EmbedderTrainConfig, TrainConfig};

/// Environment variable that overrides `out_dir`.
pub const OUT_ENV: &str = "ADVPATCH_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub root: PathBuf,
    #[serde(default = "default_layout")]
    pub layout: String,
}

fn default_layout() -> String {
    "market1501".into()
}

impl DataConfig {
    pub fn layout(&self) -> Result<Layout> {
        self.layout.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelsConfig {
    /// Attacked (white-box) embedder.
    pub whitebox: Option<ModelSpec>,
    /// Independently trained embedder for transfer evaluation.
    pub blackbox: Option<ModelSpec>,
    /// Generator encoder; defaults to a frozen copy of `whitebox`.
    pub backbone: Option<ModelSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NaturalizerConfig {
    pub decoder: DecoderKind,
    /// Local directory holding the frozen decoder weights.
    pub dir: Option<PathBuf>,
    /// Benign image whose encoding is the clean latent.
    pub reference_image: Option<PathBuf>,
    /// Pre-sampled latent (`.safetensors` with a `latent` tensor); wins over `reference_image`.
    pub latent_file: Option<PathBuf>,
    pub weight: f64,
    /// Optional text prompt, recorded only; sampling from prompts happens outside this tool.
    pub prompt: Option<String>,
}

impl Default for NaturalizerConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderKind::Tiny,
            dir: None,
            reference_image: None,
            latent_file: None,
            weight: DEFAULT_LATENT_WEIGHT,
            prompt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub conditions: Vec<Condition>,
    pub generator: Option<PathBuf>,
    pub protocol: Option<RetrievalProtocol>,
    /// Pasted patch size; defaults to the generator's own size.
    pub patch_size: Option<(usize, usize)>,
    pub transform: TransformSpec,
    pub tau_asr: f64,
    pub impersonation_trials: usize,
    pub strip_rows: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            conditions: vec![Condition::NoPatch, Condition::RandomPatch, Condition::AdversarialPatch],
            generator: None,
            protocol: None,
            patch_size: None,
            transform: TransformSpec::identity(),
            tau_asr: 0.5,
            impersonation_trials: 200,
            strip_rows: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub sizes: Vec<(usize, usize)>,
    pub mode: SweepMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { sizes: vec![(32, 32), (48, 48), (64, 64), (96, 96)], mode: SweepMode::Rescale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub generator: Option<PathBuf>,
    /// Stage index (0..=4) of the white-box embedder; 4 is the last level.
    pub layer: usize,
    pub samples: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { generator: None, layer: 4, samples: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub embedder: EmbedderTrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub naturalizer: NaturalizerConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default)]
    pub fixture: FixtureSpec,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_workers() -> usize {
    1
}

/// Parse a `key.path=value` override into the TOML tree.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like `a.b.c=value`"))?;
    let path = path.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty path segment"));
    }
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(keys[..i].join("."), "is not a table"))?;
        if i + 1 == keys.len() {
            table.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = table
            .entry((*key).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

/// Component seeds default to the global seed unless set explicitly.
fn propagate_seed(root: &mut toml::Value) {
    let seed = root.get("seed").cloned().unwrap_or(toml::Value::Integer(0));
    if let Some(t) = root.as_table_mut() {
        for section in ["train", "embedder", "fixture"] {
            let entry = t
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let Some(tab) = entry.as_table_mut() {
                tab.entry("seed".to_string()).or_insert(seed.clone());
            }
        }
    }
}

impl RunConfig {
    /// Parse TOML text, apply overrides, and reject unknown or ill-typed fields.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Value = toml::from_str::<toml::Table>(text)
            .map(toml::Value::Table)
            .map_err(|e| Error::config("<file>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        propagate_seed(&mut root);
        let mut unknown = Vec::new();
        let mut track = |path: serde_ignored::Path| unknown.push(path.to_string());
        let de = serde_ignored::Deserializer::new(root, &mut track);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        if let Some(field) = unknown.first() {
            return Err(Error::config(field.clone(), "unknown field"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Path(format!("config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<serialise>", e.to_string()))
    }

    /// `$ADVPATCH_OUT` if set, else `out_dir`.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| self.out_dir.clone())
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data.as_ref().ok_or_else(|| Error::config("data.root", "missing"))
    }

    pub fn whitebox(&self) -> Result<&ModelSpec> {
        self.models.whitebox.as_ref().ok_or_else(|| Error::config("models.whitebox", "missing"))
    }

    /// Generator encoder spec: `models.backbone` or the white-box spec.
    pub fn backbone(&self) -> Result<ModelSpec> {
        match &self.models.backbone {
            Some(b) => Ok(b.clone()),
            None => self.whitebox().cloned(),
        }
    }
}

fn require_dir(field: &str, p: &Path) -> Result<()> {
    if !p.is_dir() {
        return Err(Error::Path(format!("{field}: directory {} does not exist", p.display())));
    }
    Ok(())
}

fn require_file(field: &str, p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(Error::Path(format!("{field}: file {} does not exist", p.display())));
    }
    Ok(())
}

fn check_model(field: &str, spec: &ModelSpec) -> Result<()> {
    spec.arch().map_err(|e| Error::config(format!("{field}.arch"), e.to_string()))?;
    if spec.weights != "random" {
        require_file(&format!("{field}.weights"), Path::new(&spec.weights))?;
    }
    Ok(())
}

/// Which inputs a command needs; validated before any long-running step.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub data: bool,
    pub whitebox: bool,
    pub blackbox: bool,
    pub generator_eval: bool,
    pub generator_explain: bool,
    /// A rescaling patch-size sweep, which needs a trained generator.
    pub sweep: bool,
    pub naturalizer: bool,
}

impl RunConfig {
    pub fn validate(&self, needs: Needs) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if needs.data {
            let d = self.data()?;
            d.layout().map_err(|e| Error::config("data.layout", e.to_string()))?;
            require_dir("data.root", &d.root)?;
        }
        if needs.whitebox {
            check_model("models.whitebox", self.whitebox()?)?;
            if let Some(b) = &self.models.backbone {
                check_model("models.backbone", b)?;
            }
        }
        if needs.blackbox {
            if let Some(b) = &self.models.blackbox {
                check_model("models.blackbox", b)?;
            }
        }
        if needs.generator_eval {
            let patched = self
                .evaluate
                .conditions
                .iter()
                .any(|c| matches!(c, Condition::AdversarialPatch | Condition::NaturalisticPatch));
            if patched {
                let g = self
                    .evaluate
                    .generator
                    .as_ref()
                    .ok_or_else(|| Error::config("evaluate.generator", "required for patch conditions"))?;
                require_file("evaluate.generator", g)?;
            }
            if self.evaluate.patch_size.is_none() && self.evaluate.conditions.contains(&Condition::RandomPatch) && self.evaluate.generator.is_none() {
                return Err(Error::config("evaluate.patch_size", "needed for random_patch without a generator"));
            }
        }
        if needs.sweep && self.sweep.mode == SweepMode::Rescale {
            let g = self
                .evaluate
                .generator
                .as_ref()
                .ok_or_else(|| Error::config("evaluate.generator", "required for a rescaling sweep"))?;
            require_file("evaluate.generator", g)?;
        }
        if needs.generator_explain {
            let g = self
                .explain
                .generator
                .as_ref()
                .or(self.evaluate.generator.as_ref())
                .ok_or_else(|| Error::config("explain.generator", "missing"))?;
            require_file("explain.generator", g)?;
            if self.explain.layer > 4 {
                return Err(Error::config("explain.layer", "must be in 0..=4"));
            }
        }
        if needs.naturalizer && self.train.naturalistic {
            let dir = self
                .naturalizer
                .dir
                .as_ref()
                .ok_or_else(|| Error::config("naturalizer.dir", "required when train.naturalistic is set"))?;
            require_dir("naturalizer.dir", dir)?;
            match (&self.naturalizer.latent_file, &self.naturalizer.reference_image) {
                (Some(f), _) => require_file("naturalizer.latent_file", f)?,
                (None, Some(img)) => require_file("naturalizer.reference_image", img)?,
                (None, None) => {
                    return Err(Error::config(
                        "naturalizer.reference_image",
                        "naturalistic training needs a reference image or latent file",
                    ))
                }
            }
        }
        self.train.validate()?;
        self.embedder.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[data]
root = "/tmp"
[models.whitebox]
arch = "small-cnn"
input_size = [128, 64]
[train]
epochs = 2
"#;

    #[test]
    fn parses_and_propagates_seed() {
        let c = RunConfig::from_toml_str(BASE, &[]).unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.embedder.seed, 3);
        assert_eq!(c.whitebox().unwrap().input_size, (128, 64));
    }

    #[test]
    fn dotted_overrides() {
        let c = RunConfig::from_toml_str(
            BASE,
            &["train.lr=0.001".into(), "seed=7".into(), "data.layout=\"dukemtmc\"".into()],
        )
        .unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.data().unwrap().layout, "dukemtmc");
        let explicit = RunConfig::from_toml_str(BASE, &["train.seed=11".into()]).unwrap();
        assert_eq!(explicit.train.seed, 11);
    }

    #[test]
    fn unknown_and_mistyped_fields_report_paths() {
        let e = RunConfig::from_toml_str(BASE, &["train.epochz=3".into()]).unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("train.epochz"), "{e}");
        let e = RunConfig::from_toml_str(BASE, &["train.epochs=\"many\"".into()]).unwrap_err();
        assert!(e.to_string().contains("train.epochs"), "{e}");
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let c = RunConfig::from_toml_str(BASE, &["data.root=\"/definitely/missing\"".into()]).unwrap();
        let e = c.validate(Needs { data: true, ..Needs::default() }).unwrap_err();
        assert!(e.is_config());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_toml_str(BASE, &[]).unwrap();
        let again = RunConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(c, again);
    }
}
