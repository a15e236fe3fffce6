//! Command-line orchestration. Each config-driven command writes into
//! `<out>/<command>/<timestamp>/` alongside a `resolved_config.toml`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Needs, RunConfig};
use crate::data::{scan_dataset, DatasetIndex, Split};
use crate::embedders::{register_embedder, EmbedderHandle, ModelSpec, Role};
use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate_impersonation, evaluate_retrieval, evaluate_retrieval_detailed, patch_size_sweep,
    write_reports_csv, write_retrieval_strip, AttackConfig, BoxKind, Condition, EvalReport,
    RetrievalProtocol, SweepMode,
};
use crate::explain::{diagnose, heatmap_overlay, side_by_side, write_projection_csv, write_scatter_png};
use crate::fixture::{make_fixture, FixtureSpec};
use crate::naturalizer::{fit_tiny_autoencoder, load_decoder, LatentCode, TinyConfig};
use crate::patchgen::Attacker;
use crate::trainer::{train_embedder, train_generator, GeneratorRun, Naturalistic, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "advpatch", version, about = "Adversarial patch generation and evaluation for retrieval embedders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a config field, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set out_dir=DIR` (the ADVPATCH_OUT variable still wins).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub identities: usize,
    #[arg(long, default_value_t = 8)]
    pub images_per_identity: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub height: u32,
    #[arg(long, default_value_t = 64)]
    pub width: u32,
}

#[derive(Debug, Args, Clone)]
pub struct DecoderArgs {
    /// Dataset whose training split supplies the images.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "market1501")]
    pub layout: String,
    /// Output directory for the decoder weights.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub steps: usize,
    /// Training crop size `H,W`; use the patch size.
    #[arg(long, value_parser = parse_size, default_value = "32,32")]
    pub crop: (usize, usize),
    #[arg(long, value_parser = parse_size, default_value = "128,64")]
    pub image_size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected H,W")?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an embedder with cross-entropy plus batch-hard triplet loss.
    TrainEmbedder(RunArgs),
    /// Train the patch generator against the white-box embedder.
    TrainGenerator(RunArgs),
    /// Retrieval (and impersonation) metrics per condition and box.
    Evaluate(RunArgs),
    /// Attacked retrieval across patch sizes.
    Sweep(RunArgs),
    /// Activation maps and PCA projections.
    Explain(RunArgs),
    /// Render the synthetic person dataset.
    MakeFixture(FixtureArgs),
    /// Fit the built-in latent autoencoder used for naturalistic patches.
    MakeDecoder(DecoderArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainEmbedder(_) => "train-embedder",
            Command::TrainGenerator(_) => "train-generator",
            Command::Evaluate(_) => "evaluate",
            Command::Sweep(_) => "sweep",
            Command::Explain(_) => "explain",
            Command::MakeFixture(_) => "make-fixture",
            Command::MakeDecoder(_) => "make-decoder",
        }
    }
}

/// Exit status for a command result: 0 ok, 2 configuration problems, 1 otherwise.
pub fn exit_code(result: &Result<PathBuf>) -> u8 {
    match result {
        Ok(_) => 0,
        Err(e) if e.is_config() => 2,
        Err(_) => 1,
    }
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &args.out {
        overrides.push(format!("out_dir={}", toml::Value::String(out.display().to_string())));
    }
    RunConfig::load(&args.config, &overrides)
}

/// Fresh `<root>/<command>/<timestamp>[-n]` directory.
pub fn create_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.3f").to_string();
    let base = root.join(command);
    std::fs::create_dir_all(&base)?;
    let mut dir = base.join(&stamp);
    let mut n = 1;
    while dir.exists() {
        dir = base.join(format!("{stamp}-{n}"));
        n += 1;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn start(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = create_run_dir(&cfg.output_root(), command)?;
    std::fs::write(dir.join("resolved_config.toml"), cfg.to_toml()?)?;
    log::info!("{command}: writing to {}", dir.display());
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<DatasetIndex> {
    let d = cfg.data()?;
    scan_dataset(&d.root, d.layout()?)
}

fn protocol(cfg: &RunConfig, index: &DatasetIndex) -> RetrievalProtocol {
    cfg.evaluate.protocol.unwrap_or_else(|| RetrievalProtocol::for_layout(index.layout))
}

fn with_role(spec: &ModelSpec, role: Role) -> ModelSpec {
    ModelSpec { role, ..spec.clone() }
}

fn box_of(role: Role) -> BoxKind {
    match role {
        Role::TargetWhitebox => BoxKind::White,
        Role::AuxiliaryBlackbox => BoxKind::Black,
    }
}

/// Run one parsed command; returns the directory it wrote to.
pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::MakeFixture(a) => cmd_make_fixture(&a),
        Command::MakeDecoder(a) => cmd_make_decoder(&a),
        Command::TrainEmbedder(a) => cmd_train_embedder(&resolve(&a)?),
        Command::TrainGenerator(a) => cmd_train_generator(&resolve(&a)?),
        Command::Evaluate(a) => cmd_evaluate(&resolve(&a)?),
        Command::Sweep(a) => cmd_sweep(&resolve(&a)?),
        Command::Explain(a) => cmd_explain(&resolve(&a)?),
    }
}

fn cmd_make_fixture(a: &FixtureArgs) -> Result<PathBuf> {
    if a.identities < 2 {
        return Err(Error::config("identities", format!("need at least 2, got {}", a.identities)));
    }
    if a.images_per_identity < 2 {
        return Err(Error::config("images-per-identity", format!("need at least 2, got {}", a.images_per_identity)));
    }
    let spec = FixtureSpec {
        identities: a.identities,
        images_per_identity: a.images_per_identity,
        height: a.height,
        width: a.width,
        seed: a.seed,
    };
    let files = make_fixture(&a.out, &spec)?;
    log::info!("wrote {} images to {}", files.len(), a.out.display());
    Ok(a.out.clone())
}

fn cmd_make_decoder(a: &DecoderArgs) -> Result<PathBuf> {
    if !a.data.is_dir() {
        return Err(Error::Path(format!("--data: directory {} does not exist", a.data.display())));
    }
    let index = scan_dataset(&a.data, a.layout.parse()?)?.subset(Split::Train);
    let records: Vec<_> = index.usable().collect();
    let images = crate::data::load_batch(&records, a.image_size.0, a.image_size.1, 1)?;
    let loss = fit_tiny_autoencoder(&a.out, &images, a.crop, a.steps, TinyConfig::default(), a.seed)?;
    log::info!("decoder reconstruction loss {loss:.5}");
    Ok(a.out.clone())
}

fn cmd_train_embedder(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate(Needs { data: true, ..Needs::default() })?;
    let index = dataset(cfg)?;
    let dir = start(cfg, "train-embedder")?;
    let train = index.subset(Split::Train);
    let handle = train_embedder(&cfg.embedder, &train, cfg.workers)?;
    handle.save(&dir.join("embedder.safetensors"))?;
    let queries = index.subset(Split::Query);
    let gallery = index.subset(Split::Gallery);
    if !queries.records.is_empty() && !gallery.records.is_empty() {
        let report = evaluate_retrieval(&queries, &gallery, &handle, &protocol(cfg, &index), None, box_of(handle.role), cfg.workers)?;
        write_reports_csv(&dir.join("report.csv"), &[report])?;
    }
    Ok(dir)
}

/// Decoder and clean latent for naturalistic training.
pub fn naturalistic_setup(cfg: &RunConfig) -> Result<Option<Naturalistic>> {
    if !cfg.train.naturalistic {
        return Ok(None);
    }
    let n = &cfg.naturalizer;
    let dir = n.dir.clone().ok_or_else(|| Error::config("naturalizer.dir", "missing"))?;
    let decoder = load_decoder(n.decoder, &dir)?;
    let (h, w) = cfg.train.patch_size;
    let latent = match (&n.latent_file, &n.reference_image) {
        (Some(f), _) => LatentCode::from_file(f)?,
        (None, Some(img)) => LatentCode::from_image(decoder.as_ref(), img, h, w)?,
        (None, None) => return Err(Error::config("naturalizer.reference_image", "missing")),
    };
    Ok(Some(Naturalistic { decoder, latent, kind: n.decoder, dir, weight: n.weight }))
}

fn train_one(cfg: &RunConfig, train_cfg: &TrainConfig, index: &DatasetIndex, target: &EmbedderHandle, out: &Path) -> Result<Attacker> {
    let backbone = cfg.backbone()?;
    let train = index.subset(Split::Train);
    let (ckpt, attacker) = train_generator(GeneratorRun {
        config: train_cfg,
        data: &train,
        target,
        backbone: &backbone,
        out_dir: out,
        naturalistic: naturalistic_setup(cfg)?,
        workers: cfg.workers,
    })?;
    #[derive(Serialize)]
    struct Summary<'a> {
        checkpoint: &'a Path,
        epochs: &'a [crate::trainer::EpochStats],
        probe_loss: f64,
        fingerprint: &'a str,
    }
    write_json(
        &out.join("train_summary.json"),
        &Summary { checkpoint: &ckpt.path, epochs: &ckpt.epochs, probe_loss: ckpt.probe_loss, fingerprint: &ckpt.fingerprint },
    )?;
    Ok(attacker)
}

fn cmd_train_generator(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate(Needs { data: true, whitebox: true, naturalizer: true, ..Needs::default() })?;
    let index = dataset(cfg)?;
    let target = register_embedder(cfg.whitebox()?)?;
    let dir = start(cfg, "train-generator")?;
    train_one(cfg, &cfg.train, &index, &target, &dir)?;
    Ok(dir)
}

fn embedders(cfg: &RunConfig) -> Result<Vec<EmbedderHandle>> {
    let mut out = vec![register_embedder(&with_role(cfg.whitebox()?, Role::TargetWhitebox))?];
    if let Some(b) = &cfg.models.blackbox {
        out.push(register_embedder(&with_role(b, Role::AuxiliaryBlackbox))?);
    }
    Ok(out)
}

fn attack_config<'a>(cfg: &RunConfig, condition: Condition, attacker: Option<&'a Attacker>) -> Result<AttackConfig<'a>> {
    let patch_size = match (cfg.evaluate.patch_size, attacker) {
        (Some(s), _) => s,
        (None, Some(a)) => a.patch_size(),
        (None, None) => cfg.train.patch_size,
    };
    Ok(AttackConfig {
        condition,
        attacker: match condition {
            Condition::AdversarialPatch | Condition::NaturalisticPatch => attacker,
            _ => None,
        },
        patch_size,
        transform: cfg.evaluate.transform.clone(),
        seed: cfg.seed,
    })
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate(Needs { data: true, whitebox: true, blackbox: true, generator_eval: true, ..Needs::default() })?;
    let index = dataset(cfg)?;
    let attacker = match &cfg.evaluate.generator {
        Some(p) => Some(Attacker::load(p)?.0),
        None => None,
    };
    let handles = embedders(cfg)?;
    let queries = index.subset(Split::Query);
    let gallery = index.subset(Split::Gallery);
    let proto = protocol(cfg, &index);
    let dir = start(cfg, "evaluate")?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for handle in &handles {
        let kind = box_of(handle.role);
        for &condition in &cfg.evaluate.conditions {
            let ac = attack_config(cfg, condition, attacker.as_ref())?;
            let outcome = evaluate_retrieval_detailed(&queries, &gallery, handle, &proto, Some(&ac), kind, cfg.workers)?;
            write_retrieval_strip(
                &dir.join(format!("strip_{}_{}.png", kind.as_str(), condition.as_str())),
                &outcome,
                &queries,
                &gallery,
                cfg.evaluate.strip_rows,
                10,
            )?;
            reports.push(outcome.report);
        }
    }
    write_reports_csv(&dir.join("report.csv"), &reports)?;
    if let Some(a) = attacker.as_ref().filter(|a| a.conditioning() == crate::data::AttackMode::Targeted) {
        let test = DatasetIndex::new(
            queries.records.iter().chain(&gallery.records).cloned().collect(),
            index.layout,
        );
        let condition = if a.natural.is_some() { Condition::NaturalisticPatch } else { Condition::AdversarialPatch };
        let ac = attack_config(cfg, condition, Some(a))?;
        let mut results = Vec::new();
        for handle in &handles {
            let r = evaluate_impersonation(&test, handle, &ac, cfg.evaluate.impersonation_trials, cfg.evaluate.tau_asr, cfg.workers)?;
            results.push((box_of(handle.role).as_str(), r));
        }
        write_json(&dir.join("impersonation.json"), &results)?;
    }
    Ok(dir)
}

fn cmd_sweep(cfg: &RunConfig) -> Result<PathBuf> {
    let needs_gen = cfg.sweep.mode == SweepMode::Rescale;
    cfg.validate(Needs {
        data: true,
        whitebox: true,
        sweep: true,
        naturalizer: !needs_gen,
        ..Needs::default()
    })?;
    let index = dataset(cfg)?;
    let target = register_embedder(&with_role(cfg.whitebox()?, Role::TargetWhitebox))?;
    let queries = index.subset(Split::Query);
    let gallery = index.subset(Split::Gallery);
    let dir = start(cfg, "sweep")?;
    let attackers: Vec<Attacker> = match cfg.sweep.mode {
        SweepMode::Rescale => {
            let p = cfg.evaluate.generator.as_ref().ok_or_else(|| Error::config("evaluate.generator", "missing"))?;
            vec![Attacker::load(p)?.0]
        }
        SweepMode::Retrain => cfg
            .sweep
            .sizes
            .iter()
            .map(|&(h, w)| {
                let tc = TrainConfig { patch_size: (h, w), ..cfg.train.clone() };
                let sub = dir.join(format!("generator_{h}x{w}"));
                train_one(cfg, &tc, &index, &target, &sub)
            })
            .collect::<Result<_>>()?,
    };
    let base = attack_config(cfg, Condition::AdversarialPatch, attackers.first())?;
    let sizes = cfg.sweep.sizes.clone();
    let reports = patch_size_sweep(&sizes, &queries, &gallery, &target, &protocol(cfg, &index), &base, BoxKind::White, cfg.workers, |size| {
        Ok(match cfg.sweep.mode {
            SweepMode::Rescale => attackers.first(),
            SweepMode::Retrain => sizes.iter().position(|&s| s == size).map(|i| &attackers[i]),
        })
    })?;
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record(["patch_h", "patch_w", "condition", "mAP", "rank10", "rank1", "box"])?;
    for ((h, ww), r) in sizes.iter().zip(&reports) {
        w.write_record([
            h.to_string(),
            ww.to_string(),
            r.condition.as_str().into(),
            format!("{:.6}", r.map),
            format!("{:.6}", r.rank10),
            format!("{:.6}", r.rank1),
            r.box_kind.as_str().into(),
        ])?;
    }
    w.flush()?;
    Ok(dir)
}

fn cmd_explain(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate(Needs { data: true, whitebox: true, generator_explain: true, ..Needs::default() })?;
    let index = dataset(cfg)?;
    let gpath = cfg
        .explain
        .generator
        .as_ref()
        .or(cfg.evaluate.generator.as_ref())
        .ok_or_else(|| Error::config("explain.generator", "missing"))?;
    let (attacker, _) = Attacker::load(gpath)?;
    let embedder = register_embedder(&with_role(cfg.whitebox()?, Role::TargetWhitebox))?;
    let queries = index.subset(Split::Query);
    let gallery = index.subset(Split::Gallery);
    let dir = start(cfg, "explain")?;
    let d = diagnose(&attacker, &embedder, &queries, &gallery, cfg.explain.samples, cfg.explain.layer, cfg.seed, cfg.workers)?;
    let mut w = csv::Writer::from_path(dir.join("activation_mass.csv"))?;
    w.write_record(["sample", "area_fraction", "mass_clean", "mass_attacked"])?;
    for (i, m) in d.masses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{:.6}", m.area_fraction), format!("{:.6}", m.mass_clean), format!("{:.6}", m.mass_attacked)])?;
        let clean = heatmap_overlay(&d.clean_images.get(i)?, &d.clean_maps[i])?;
        let attacked = heatmap_overlay(&d.attacked_images.get(i)?, &d.attacked_maps[i])?;
        side_by_side(&clean, &attacked).save(dir.join(format!("heatmap_{i:03}.png")))?;
    }
    w.flush()?;
    write_projection_csv(&dir.join("projection.csv"), &d.projection)?;
    write_scatter_png(&dir.join("scatter.png"), &d.projection, 480)?;
    #[derive(Serialize)]
    struct Summary {
        samples: usize,
        concentrated_fraction: f64,
        attacked_to_source: f64,
        clean_to_source: f64,
        explained_ratio: Vec<f64>,
    }
    write_json(
        &dir.join("summary.json"),
        &Summary {
            samples: d.masses.len(),
            concentrated_fraction: d.concentrated_fraction(),
            attacked_to_source: d.attacked_to_source(),
            clean_to_source: d.clean_to_source(),
            explained_ratio: d.projection.explained_ratio.clone(),
        },
    )?;
    Ok(dir)
}
