//! Retrieval metrics under the cross-camera protocol, attack success rate,
//! and the patch-size sweep.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composer::{apply_transform, compose, sample_placement, TransformSpec};
use crate::data::{load_batch, tensor_to_rgb8, AttackMode, DatasetIndex, Layout, PairSampler, PersonRecord, JUNK_IDENTITY};
use crate::embedders::{EmbedderHandle, Embedding};
use crate::error::{Error, Result};
use crate::imageops::resize_bilinear;
use crate::objectives::cosine;
use crate::patchgen::Attacker;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalProtocol {
    pub metric: Metric,
    pub cross_camera_filter: bool,
    pub junk_filter: bool,
}

impl Default for RetrievalProtocol {
    fn default() -> Self {
        Self { metric: Metric::Cosine, cross_camera_filter: true, junk_filter: true }
    }
}

impl RetrievalProtocol {
    /// Camera filtering is on exactly for layouts whose filenames encode cameras.
    pub fn for_layout(layout: Layout) -> Self {
        Self { cross_camera_filter: layout.encodes_cameras(), ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoPatch,
    RandomPatch,
    AdversarialPatch,
    NaturalisticPatch,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::NoPatch => "no_patch",
            Condition::RandomPatch => "random_patch",
            Condition::AdversarialPatch => "adversarial_patch",
            Condition::NaturalisticPatch => "naturalistic_patch",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_patch" => Ok(Condition::NoPatch),
            "random_patch" => Ok(Condition::RandomPatch),
            "adversarial_patch" => Ok(Condition::AdversarialPatch),
            "naturalistic_patch" => Ok(Condition::NaturalisticPatch),
            other => Err(Error::config("evaluate.conditions", format!("unknown condition `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxKind {
    White,
    Black,
}

impl BoxKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BoxKind::White => "white",
            BoxKind::Black => "black",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: Condition,
    pub map: f64,
    pub rank1: f64,
    pub rank10: f64,
    pub num_queries: usize,
    pub box_kind: BoxKind,
    /// Queries with an empty candidate list after filtering.
    pub skipped_queries: usize,
}

/// Identity and camera of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub identity: i64,
    pub camera: u32,
}

impl From<&PersonRecord> for Label {
    fn from(r: &PersonRecord) -> Self {
        Self { identity: r.identity, camera: r.camera }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub rank1: f64,
    pub rank10: f64,
    pub num_queries: usize,
    pub skipped_queries: usize,
    /// Queries that had candidates but no relevant one (counted with AP 0).
    pub no_match_queries: usize,
    /// Filtered gallery ranking per evaluated query.
    pub rankings: Vec<Vec<usize>>,
}

/// AP = mean over relevant positions `k` of (relevant in top-`k`) / `k`;
/// 0 when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    if relevance.is_empty() {
        return Err(Error::UndefinedQuery("empty relevance list".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Gallery indices ordered best-first; ties keep ascending gallery index.
pub fn rank_gallery(query: &[f32], gallery: &[Vec<f32>], metric: Metric) -> Result<Vec<usize>> {
    let scores: Vec<f64> = gallery
        .iter()
        .map(|g| match metric {
            Metric::Cosine => cosine(query, g).map(|c| -c),
            Metric::Euclidean => Ok(euclidean(query, g)),
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    Ok(order)
}

/// Mean AP, rank-1 and rank-10 of query embeddings against a gallery.
pub fn retrieval_metrics(
    queries: &[Vec<f32>],
    query_labels: &[Label],
    gallery: &[Vec<f32>],
    gallery_labels: &[Label],
    protocol: &RetrievalProtocol,
) -> Result<RetrievalMetrics> {
    if gallery.is_empty() {
        return Err(Error::EmptyDataset("gallery is empty".into()));
    }
    if queries.len() != query_labels.len() || gallery.len() != gallery_labels.len() {
        return Err(Error::Shape("embeddings and labels differ in length".into()));
    }
    let mut aps = Vec::new();
    let mut r1 = 0.0;
    let mut r10 = 0.0;
    let mut skipped = 0;
    let mut no_match = 0;
    let mut rankings = Vec::new();
    for (q, ql) in queries.iter().zip(query_labels) {
        if ql.identity == JUNK_IDENTITY {
            skipped += 1;
            continue;
        }
        let order: Vec<usize> = rank_gallery(q, gallery, protocol.metric)?
            .into_iter()
            .filter(|&g| {
                let gl = gallery_labels[g];
                let same_view = protocol.cross_camera_filter && gl.identity == ql.identity && gl.camera == ql.camera;
                let junk = protocol.junk_filter && gl.identity == JUNK_IDENTITY;
                !same_view && !junk
            })
            .collect();
        let relevance: Vec<bool> = order.iter().map(|&g| gallery_labels[g].identity == ql.identity).collect();
        let ap = match average_precision(&relevance) {
            Ok(ap) => ap,
            Err(Error::UndefinedQuery(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        if !relevance.contains(&true) {
            no_match += 1;
            log::warn!("query (id {}, cam {}) has no valid gallery match", ql.identity, ql.camera);
        }
        aps.push(ap);
        if relevance[0] {
            r1 += 1.0;
        }
        if relevance.iter().take(10).any(|&r| r) {
            r10 += 1.0;
        }
        rankings.push(order);
    }
    let n = aps.len();
    if n == 0 {
        return Err(Error::UndefinedQuery("no query could be evaluated".into()));
    }
    Ok(RetrievalMetrics {
        map: aps.iter().sum::<f64>() / n as f64,
        rank1: r1 / n as f64,
        rank10: r10 / n as f64,
        num_queries: n,
        skipped_queries: skipped,
        no_match_queries: no_match,
        rankings,
    })
}

/// Embed an `(N, 3, H, W)` batch in chunks.
pub fn embed_images(embedder: &EmbedderHandle, images: &Tensor) -> Result<Vec<Vec<f32>>> {
    let n = images.dim(0)?;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = 32.min(n - start);
        let z = embedder.embed_batch(&images.narrow(0, start, len)?)?;
        out.extend(z.to_vec2::<f32>()?);
        start += len;
    }
    Ok(out)
}

/// How query images are modified before embedding.
#[derive(Clone)]
pub struct AttackConfig<'a> {
    pub condition: Condition,
    /// Required for adversarial and naturalistic conditions.
    pub attacker: Option<&'a Attacker>,
    /// Pasted patch size; generator output is rescaled when it differs.
    pub patch_size: (usize, usize),
    pub transform: TransformSpec,
    pub seed: u64,
}

impl<'a> AttackConfig<'a> {
    pub fn clean() -> Self {
        Self {
            condition: Condition::NoPatch,
            attacker: None,
            patch_size: (0, 0),
            transform: TransformSpec::identity(),
            seed: 0,
        }
    }
}

/// Patched copies of `images` plus the placements used.
pub fn attack_images(
    images: &Tensor,
    targets: Option<&Tensor>,
    attack: &AttackConfig,
) -> Result<(Tensor, Vec<crate::composer::PlacementMask>)> {
    let (n, _, h, w) = images.dims4()?;
    let (ph, pw) = attack.patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(attack.seed);
    let patches = match attack.condition {
        Condition::NoPatch => return Ok((images.clone(), Vec::new())),
        Condition::RandomPatch => {
            let v: Vec<f32> = (0..n * 3 * ph * pw).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
            Tensor::from_vec(v, (n, 3, ph, pw), &Device::Cpu)?
        }
        Condition::AdversarialPatch | Condition::NaturalisticPatch => {
            let attacker = attack.attacker.ok_or_else(|| {
                Error::config("evaluate.generator", "patch condition needs a generator checkpoint")
            })?;
            let raw = attacker.patches_for_images(images, targets)?;
            if raw.dims()[2..] == [ph, pw] {
                raw
            } else {
                resize_bilinear(&raw, ph, pw)?
            }
        }
    };
    let mut out = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let params = attack.transform.sample(&mut rng);
        let mask = sample_placement(h, w, ph, pw, &mut rng)?;
        let p = apply_transform(&patches.get(i)?, &params)?;
        out.push(compose(&images.get(i)?, &p, &mask)?);
        masks.push(mask);
    }
    Ok((Tensor::stack(&out, 0)?, masks))
}

/// Full retrieval outcome, including the (possibly attacked) query batch.
pub struct RetrievalOutcome {
    pub report: EvalReport,
    pub metrics: RetrievalMetrics,
    pub query_images: Tensor,
    pub gallery_images: Tensor,
}

/// Targets for targeted generators: for each query, a seeded gallery image
/// of a different identity.
fn pick_targets(query: &[&PersonRecord], gallery: &[&PersonRecord], gallery_images: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a7);
    let idx = query
        .iter()
        .map(|q| {
            let others: Vec<usize> = (0..gallery.len()).filter(|&g| gallery[g].identity != q.identity).collect();
            if others.is_empty() {
                return Err(Error::InsufficientIdentities { needed: 2, found: 1 });
            }
            Ok(others[rng.random_range(0..others.len())] as u32)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(gallery_images.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_retrieval_detailed(
    queries: &DatasetIndex,
    gallery: &DatasetIndex,
    embedder: &EmbedderHandle,
    protocol: &RetrievalProtocol,
    attack: Option<&AttackConfig>,
    box_kind: BoxKind,
    workers: usize,
) -> Result<RetrievalOutcome> {
    let q: Vec<_> = queries.records.iter().collect();
    let g: Vec<_> = gallery.records.iter().collect();
    if g.is_empty() {
        return Err(Error::EmptyDataset("gallery is empty".into()));
    }
    if q.is_empty() {
        return Err(Error::EmptyDataset("no queries".into()));
    }
    let (h, w) = embedder.input_size();
    let q_images = load_batch(&q, h, w, workers)?;
    let g_images = load_batch(&g, h, w, workers)?;
    let clean = AttackConfig::clean();
    let attack = attack.unwrap_or(&clean);
    let targets = match attack.attacker {
        Some(a) if a.conditioning() == AttackMode::Targeted => Some(pick_targets(&q, &g, &g_images, attack.seed)?),
        _ => None,
    };
    let (q_used, _) = attack_images(&q_images, targets.as_ref(), attack)?;
    let q_emb = embed_images(embedder, &q_used)?;
    let g_emb = embed_images(embedder, &g_images)?;
    let q_labels: Vec<Label> = q.iter().map(|r| Label::from(*r)).collect();
    let g_labels: Vec<Label> = g.iter().map(|r| Label::from(*r)).collect();
    let metrics = retrieval_metrics(&q_emb, &q_labels, &g_emb, &g_labels, protocol)?;
    Ok(RetrievalOutcome {
        report: EvalReport {
            condition: attack.condition,
            map: metrics.map,
            rank1: metrics.rank1,
            rank10: metrics.rank10,
            num_queries: metrics.num_queries,
            box_kind,
            skipped_queries: metrics.skipped_queries,
        },
        metrics,
        query_images: q_used,
        gallery_images: g_images,
    })
}

pub fn evaluate_retrieval(
    queries: &DatasetIndex,
    gallery: &DatasetIndex,
    embedder: &EmbedderHandle,
    protocol: &RetrievalProtocol,
    attack: Option<&AttackConfig>,
    box_kind: BoxKind,
    workers: usize,
) -> Result<EvalReport> {
    Ok(evaluate_retrieval_detailed(queries, gallery, embedder, protocol, attack, box_kind, workers)?.report)
}

/// `(1/N) Σ 1[cos(f_adv, f_t) > τ]`.
pub fn attack_success_rate(adv: &[Embedding], targets: &[Embedding], tau: f64) -> Result<f64> {
    if adv.is_empty() {
        return Err(Error::EmptyTrials);
    }
    if adv.len() != targets.len() {
        return Err(Error::Shape(format!("{} adversarial vs {} target embeddings", adv.len(), targets.len())));
    }
    let hits = adv
        .iter()
        .zip(targets)
        .map(|(a, t)| cosine(&a.vector, &t.vector).map(|c| c > tau))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&h| h)
        .count();
    Ok(hits as f64 / adv.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpersonationReport {
    pub trials: usize,
    pub tau_asr: f64,
    pub asr: f64,
    pub baseline_asr: f64,
    pub mean_cos: f64,
    pub baseline_mean_cos: f64,
}

/// ASR and target similarity over `trials` seeded source/target pairs,
/// with and without the patch.
pub fn evaluate_impersonation(
    data: &DatasetIndex,
    embedder: &EmbedderHandle,
    attack: &AttackConfig,
    trials: usize,
    tau_asr: f64,
    workers: usize,
) -> Result<ImpersonationReport> {
    if trials == 0 {
        return Err(Error::EmptyTrials);
    }
    let mut sampler = PairSampler::new(data, AttackMode::Targeted, attack.seed)?;
    let mut sources = Vec::with_capacity(trials);
    let mut targets = Vec::with_capacity(trials);
    for _ in 0..trials {
        let (s, t) = sampler.next_pair();
        sources.push(s);
        targets.push(t.expect("targeted pairs carry a target"));
    }
    let (h, w) = embedder.input_size();
    let src = load_batch(&sources, h, w, workers)?;
    let tgt = load_batch(&targets, h, w, workers)?;
    let (adv, _) = attack_images(&src, Some(&tgt), attack)?;
    let to_emb = |v: Vec<Vec<f32>>| -> Vec<Embedding> {
        v.into_iter().map(|x| Embedding::new(x, embedder.model_id.clone())).collect()
    };
    let z_t = to_emb(embed_images(embedder, &tgt)?);
    let z_s = to_emb(embed_images(embedder, &src)?);
    let z_adv = to_emb(embed_images(embedder, &adv)?);
    let mean_cos = |a: &[Embedding]| -> Result<f64> {
        let s = a.iter().zip(&z_t).map(|(x, t)| cosine(&x.vector, &t.vector)).collect::<Result<Vec<_>>>()?;
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    };
    Ok(ImpersonationReport {
        trials,
        tau_asr,
        asr: attack_success_rate(&z_adv, &z_t, tau_asr)?,
        baseline_asr: attack_success_rate(&z_s, &z_t, tau_asr)?,
        mean_cos: mean_cos(&z_adv)?,
        baseline_mean_cos: mean_cos(&z_s)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    Retrain,
    #[default]
    Rescale,
}

/// One attacked-retrieval report per patch size. `attacker_for` supplies the
/// generator for a size: a retrained one, or the base one whose output
/// [`attack_images`] rescales.
#[allow(clippy::too_many_arguments)]
pub fn patch_size_sweep<'a, F>(
    sizes: &[(usize, usize)],
    queries: &DatasetIndex,
    gallery: &DatasetIndex,
    embedder: &EmbedderHandle,
    protocol: &RetrievalProtocol,
    base: &AttackConfig<'a>,
    box_kind: BoxKind,
    workers: usize,
    mut attacker_for: F,
) -> Result<Vec<EvalReport>>
where
    F: FnMut((usize, usize)) -> Result<Option<&'a Attacker>>,
{
    if sizes.is_empty() {
        return Err(Error::config("sweep.sizes", "needs at least one size"));
    }
    let (ih, iw) = embedder.input_size();
    for &(h, w) in sizes {
        if h == 0 || w == 0 || h > ih || w > iw {
            return Err(Error::Placement(format!("{h}x{w} patch exceeds {ih}x{iw} image")));
        }
    }
    sizes
        .iter()
        .map(|&size| {
            let mut cfg = base.clone();
            cfg.patch_size = size;
            if let Some(a) = attacker_for(size)? {
                cfg.attacker = Some(a);
            }
            evaluate_retrieval(queries, gallery, embedder, protocol, Some(&cfg), box_kind, workers)
        })
        .collect()
}

/// CSV with columns `condition,mAP,rank10,rank1,box`.
pub fn write_reports_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["condition", "mAP", "rank10", "rank1", "box"])?;
    for r in reports {
        w.write_record([
            r.condition.as_str().to_string(),
            format!("{:.6}", r.map),
            format!("{:.6}", r.rank10),
            format!("{:.6}", r.rank1),
            r.box_kind.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn paste(canvas: &mut RgbImage, img: &RgbImage, x0: u32, y0: u32, border: Option<Rgb<u8>>) {
    for (x, y, p) in img.enumerate_pixels() {
        canvas.put_pixel(x0 + x, y0 + y, *p);
    }
    if let Some(color) = border {
        let (w, h) = img.dimensions();
        for x in 0..w {
            for t in 0..2 {
                canvas.put_pixel(x0 + x, y0 + t, color);
                canvas.put_pixel(x0 + x, y0 + h - 1 - t, color);
            }
        }
        for y in 0..h {
            for t in 0..2 {
                canvas.put_pixel(x0 + t, y0 + y, color);
                canvas.put_pixel(x0 + w - 1 - t, y0 + y, color);
            }
        }
    }
}

/// One row per query: the query image, then its top-`k` gallery matches
/// framed green (same identity) or red.
pub fn write_retrieval_strip(
    path: &Path,
    outcome: &RetrievalOutcome,
    queries: &DatasetIndex,
    gallery: &DatasetIndex,
    rows: usize,
    k: usize,
) -> Result<()> {
    let (_, _, h, w) = outcome.query_images.dims4()?;
    let rows = rows.min(outcome.metrics.rankings.len());
    let gap = 6u32;
    let (hh, ww) = (h as u32, w as u32);
    let mut canvas = RgbImage::from_pixel((ww + gap) * (k as u32 + 1) + gap, (hh + gap) * rows as u32 + gap, Rgb([255, 255, 255]));
    let evaluated: Vec<usize> = queries
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.identity != JUNK_IDENTITY)
        .map(|(i, _)| i)
        .collect();
    for row in 0..rows {
        let qi = evaluated[row];
        let y0 = gap + row as u32 * (hh + gap);
        let q = tensor_to_rgb8(&outcome.query_images.get(qi)?)?;
        paste(&mut canvas, &q, gap, y0, Some(Rgb([40, 40, 200])));
        for (j, &g) in outcome.metrics.rankings[row].iter().take(k).enumerate() {
            let img = tensor_to_rgb8(&outcome.gallery_images.get(g)?)?;
            let ok = gallery.records[g].identity == queries.records[qi].identity;
            let color = if ok { Rgb([0, 180, 0]) } else { Rgb([210, 0, 0]) };
            paste(&mut canvas, &img, gap + (j as u32 + 1) * (ww + gap), y0, Some(color));
        }
    }
    canvas.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab(identity: i64, camera: u32) -> Label {
        Label { identity, camera }
    }

    #[test]
    fn ap_examples() {
        assert!((average_precision(&[true, false, true]).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[true, true, true]).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, false, false]).unwrap(), 0.0);
        assert!(matches!(average_precision(&[]), Err(Error::UndefinedQuery(_))));
    }

    #[test]
    fn asr_examples() {
        let e = |v: Vec<f32>| Embedding::new(v, "m");
        let t = vec![e(vec![1.0, 0.0]); 3];
        let same = vec![e(vec![1.0, 0.0]); 3];
        assert_eq!(attack_success_rate(&same, &t, 0.5).unwrap(), 1.0);
        let orth = vec![e(vec![0.0, 1.0]); 3];
        assert_eq!(attack_success_rate(&orth, &t, 0.5).unwrap(), 0.0);
        let at = |c: f32| e(vec![c, (1.0 - c * c).sqrt()]);
        let mixed = vec![at(0.6), at(0.4), at(0.9)];
        assert!((attack_success_rate(&mixed, &t, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(attack_success_rate(&[], &[], 0.5), Err(Error::EmptyTrials)));
    }

    #[test]
    fn single_relevant_ranked_first() {
        let m = retrieval_metrics(
            &[vec![1.0, 0.0]],
            &[lab(1, 1)],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[lab(1, 2), lab(2, 2)],
            &RetrievalProtocol::default(),
        )
        .unwrap();
        assert_eq!((m.map, m.rank1, m.rank10), (1.0, 1.0, 1.0));
    }

    #[test]
    fn cross_camera_and_junk_filtering() {
        // Same-camera match and junk would rank first but are excluded.
        let m = retrieval_metrics(
            &[vec![1.0, 0.0]],
            &[lab(1, 1)],
            &[vec![1.0, 0.0], vec![0.99, 0.1], vec![0.9, 0.2], vec![0.0, 1.0]],
            &[lab(1, 1), lab(JUNK_IDENTITY, 2), lab(2, 2), lab(1, 2)],
            &RetrievalProtocol::default(),
        )
        .unwrap();
        assert!((m.map - 0.5).abs() < 1e-12);
        assert_eq!(m.rank1, 0.0);
        assert_eq!(m.rankings[0], vec![2, 3]);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let g = vec![vec![1.0, 0.0]; 4];
        assert_eq!(rank_gallery(&[1.0, 0.0], &g, Metric::Cosine).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(rank_gallery(&[1.0, 0.0], &g, Metric::Euclidean).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn query_without_candidates_is_skipped() {
        let m = retrieval_metrics(
            &[vec![1.0], vec![1.0]],
            &[lab(1, 1), lab(2, 1)],
            &[vec![1.0]],
            &[lab(1, 1)],
            &RetrievalProtocol::default(),
        )
        .unwrap();
        assert_eq!(m.skipped_queries, 1);
        assert_eq!(m.num_queries, 1);
        assert_eq!(m.no_match_queries, 1);
    }

    #[test]
    fn csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let r = EvalReport {
            condition: Condition::NoPatch,
            map: 0.5,
            rank1: 1.0,
            rank10: 1.0,
            num_queries: 2,
            box_kind: BoxKind::White,
            skipped_queries: 0,
        };
        write_reports_csv(&p, &[r]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("condition,mAP,rank10,rank1,box\nno_patch,0.500000,1.000000,1.000000,white"));
    }
}
