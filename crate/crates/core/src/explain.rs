//! Squared-activation maps and PCA projections of embeddings.

use std::fmt;
use std::path::Path;

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::composer::PlacementMask;
use crate::data::tensor_to_rgb8;
use crate::error::{Error, Result};
use crate::imageops::bilinear_weights;

/// `A[i, j] = Σ_c F[c, i, j]²` on an `h′ × w′` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub a: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub layer: String,
}

impl ActivationMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.width + j]
    }

    pub fn total(&self) -> f64 {
        self.a.iter().sum()
    }

    /// Copy scaled to `[0, 1]` by its maximum; all zeros when the max is 0.
    pub fn normalized(&self) -> Vec<f64> {
        let max = self.a.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return vec![0.0; self.a.len()];
        }
        self.a.iter().map(|v| v / max).collect()
    }

    /// Share of the total mass lying under `mask`'s window, with each grid
    /// cell weighted by the fraction of its image footprint the window covers.
    pub fn window_mass_fraction(&self, mask: &PlacementMask) -> f64 {
        let total = self.total();
        if total <= 0.0 {
            return 0.0;
        }
        let overlap = |cell: usize, cells: usize, size: usize, start: usize, len: usize| -> f64 {
            let step = size as f64 / cells as f64;
            let lo = cell as f64 * step;
            let hi = lo + step;
            let (a, b) = (start as f64, (start + len) as f64);
            ((hi.min(b) - lo.max(a)).max(0.0)) / step
        };
        let mut inside = 0.0;
        for i in 0..self.height {
            let fy = overlap(i, self.height, mask.height, mask.y, mask.h);
            if fy == 0.0 {
                continue;
            }
            for j in 0..self.width {
                let fx = overlap(j, self.width, mask.width, mask.x, mask.w);
                inside += self.at(i, j) * fy * fx;
            }
        }
        inside / total
    }
}

/// Sum of squared activations over channels of a `(C, h, w)` or `(1, C, h, w)` map.
pub fn activation_map(features: &Tensor, layer: impl Into<String>) -> Result<ActivationMap> {
    let f = if features.rank() == 4 { features.squeeze(0)? } else { features.clone() };
    let (c, h, w) = f.dims3().map_err(|_| Error::Shape(format!("expected (C, h, w), got {:?}", features.dims())))?;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("empty feature map {:?}", features.dims())));
    }
    let a = f.to_dtype(DType::F64)?.sqr()?.sum(0)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(ActivationMap { a, height: h, width: w, layer: layer.into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Source,
    CleanSameId,
    Target,
    Attacked,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Source => "source",
            Group::CleanSameId => "clean_same_id",
            Group::Target => "target",
            Group::Attacked => "attacked",
        }
    }

    fn color(self) -> Rgb<u8> {
        match self {
            Group::Source => Rgb([30, 90, 220]),
            Group::CleanSameId => Rgb([40, 170, 60]),
            Group::Target => Rgb([150, 60, 200]),
            Group::Attacked => Rgb([220, 40, 40]),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    /// `N × k` projected coordinates.
    pub coords: Vec<Vec<f64>>,
    /// Variance along each component (sample covariance), descending.
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// `k × d` orthonormal principal directions.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub groups: Vec<Group>,
}

/// Centre the rows, take the top-`k` principal directions and project.
/// Each direction's sign is fixed so its largest-magnitude entry is positive.
pub fn pca_project(x: &[Vec<f64>], groups: &[Group], k: usize) -> Result<ProjectionResult> {
    let n = x.len();
    if k == 0 || n <= k {
        return Err(Error::Rank { samples: n, components: k });
    }
    if groups.len() != n {
        return Err(Error::Shape(format!("{} points but {} group labels", n, groups.len())));
    }
    let d = x[0].len();
    if d < k || x.iter().any(|r| r.len() != d) {
        return Err(Error::Rank { samples: n, components: k });
    }
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let denom = (n - 1) as f64;
    let all_var: f64 = svd.singular_values.iter().map(|s| s * s / denom).sum();
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut row: Vec<f64> = v_t.row(idx).iter().cloned().collect();
        let pivot = row.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(row);
        let s = svd.singular_values[idx];
        explained_variance.push(s * s / denom);
    }
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| (0..d).map(|j| centered[(i, j)] * c[j]).sum())
                .collect()
        })
        .collect();
    let explained_ratio = explained_variance
        .iter()
        .map(|v| if all_var > 0.0 { v / all_var } else { 0.0 })
        .collect();
    Ok(ProjectionResult {
        coords,
        explained_variance,
        explained_ratio,
        components,
        mean,
        groups: groups.to_vec(),
    })
}

/// Mean Euclidean distance between paired projected points.
pub fn mean_pair_distance(coords: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|&(a, b)| {
            coords[a]
                .iter()
                .zip(&coords[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / pairs.len() as f64
}

/// Blue → cyan → yellow → red ramp.
fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let stops = [[0.0, 0.0, 0.5], [0.0, 0.8, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let t = v * 3.0;
    let i = (t.floor() as usize).min(2);
    let f = t - i as f64;
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = stops[i][k] * (1.0 - f) + stops[i + 1][k] * f;
    }
    c
}

/// Normalised map upsampled bilinearly to `h × w`.
pub fn upsample_map(map: &ActivationMap, h: usize, w: usize) -> Vec<f64> {
    let n = map.normalized();
    let ry = bilinear_weights(h, map.height);
    let rx = bilinear_weights(w, map.width);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for i in 0..map.height {
                let wy = ry[y * map.height + i];
                if wy == 0.0 {
                    continue;
                }
                for j in 0..map.width {
                    acc += wy * rx[x * map.width + j] * n[i * map.width + j];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Heatmap alpha-blended over a `(3, H, W)` image at 0.5 opacity.
pub fn heatmap_overlay(image: &Tensor, map: &ActivationMap) -> Result<RgbImage> {
    let base = tensor_to_rgb8(image)?;
    let (w, h) = base.dimensions();
    let heat = upsample_map(map, h as usize, w as usize);
    let mut out = base.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let c = heat_color(heat[y as usize * w as usize + x as usize]);
        for k in 0..3 {
            p.0[k] = (0.5 * p.0[k] as f64 + 0.5 * c[k] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// CSV with columns `group,x,y` (first two components).
pub fn write_projection_csv(path: &Path, result: &ProjectionResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "x", "y"])?;
    for (c, g) in result.coords.iter().zip(&result.groups) {
        let y = c.get(1).copied().unwrap_or(0.0);
        w.write_record([g.as_str().to_string(), format!("{:.8}", c[0]), format!("{y:.8}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Scatter plot of the first two components, one colour per group.
pub fn write_scatter_png(path: &Path, result: &ProjectionResult, size: u32) -> Result<()> {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let xs: Vec<f64> = result.coords.iter().map(|c| c[0]).collect();
    let ys: Vec<f64> = result.coords.iter().map(|c| c.get(1).copied().unwrap_or(0.0)).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let (x0, xr) = range(&xs);
    let (y0, yr) = range(&ys);
    let margin = 12.0;
    let span = size as f64 - 2.0 * margin;
    for axis in 0..size {
        img.put_pixel(axis, size / 2, Rgb([225, 225, 225]));
        img.put_pixel(size / 2, axis, Rgb([225, 225, 225]));
    }
    for ((x, y), g) in xs.iter().zip(&ys).zip(&result.groups) {
        let px = (margin + (x - x0) / xr * span).round() as i64;
        let py = (size as f64 - margin - (y - y0) / yr * span).round() as i64;
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                if dx * dx + dy * dy > 9 {
                    continue;
                }
                let (qx, qy) = (px + dx, py + dy);
                if qx >= 0 && qy >= 0 && (qx as u32) < size && (qy as u32) < size {
                    img.put_pixel(qx as u32, qy as u32, g.color());
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Per-sample activation statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassRecord {
    pub area_fraction: f64,
    pub mass_clean: f64,
    pub mass_attacked: f64,
}

impl MassRecord {
    pub fn concentrated(&self) -> bool {
        self.mass_attacked > self.area_fraction
    }
}

/// Everything the diagnostics produce for one batch of attacked queries.
pub struct Diagnosis {
    pub clean_images: Tensor,
    pub attacked_images: Tensor,
    pub clean_maps: Vec<ActivationMap>,
    pub attacked_maps: Vec<ActivationMap>,
    pub masses: Vec<MassRecord>,
    pub projection: ProjectionResult,
    /// `(attacked, its source)` index pairs into the projection.
    pub attacked_pairs: Vec<(usize, usize)>,
    /// `(clean same-identity image, its source)` index pairs.
    pub clean_pairs: Vec<(usize, usize)>,
}

impl Diagnosis {
    pub fn concentrated_fraction(&self) -> f64 {
        if self.masses.is_empty() {
            return 0.0;
        }
        self.masses.iter().filter(|m| m.concentrated()).count() as f64 / self.masses.len() as f64
    }

    pub fn attacked_to_source(&self) -> f64 {
        mean_pair_distance(&self.projection.coords, &self.attacked_pairs)
    }

    pub fn clean_to_source(&self) -> f64 {
        mean_pair_distance(&self.projection.coords, &self.clean_pairs)
    }
}

/// Attack up to `samples` queries, then compute activation maps at stage
/// `layer` of the white-box embedder and a joint 2-component PCA over
/// sources, clean same-identity gallery images, targets and attacked images.
#[allow(clippy::too_many_arguments)]
pub fn diagnose(
    attacker: &crate::patchgen::Attacker,
    embedder: &crate::embedders::EmbedderHandle,
    queries: &crate::data::DatasetIndex,
    gallery: &crate::data::DatasetIndex,
    samples: usize,
    layer: usize,
    seed: u64,
    workers: usize,
) -> Result<Diagnosis> {
    use crate::data::{load_batch, AttackMode};
    use crate::evalkit::{attack_images, embed_images, AttackConfig, Condition};

    let q: Vec<_> = queries.usable().take(samples).collect();
    if q.is_empty() {
        return Err(Error::EmptyDataset("no queries to explain".into()));
    }
    let (h, w) = embedder.input_size();
    let clean = load_batch(&q, h, w, workers)?;
    let targets = if attacker.conditioning() == AttackMode::Targeted {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let picks: Vec<_> = q
            .iter()
            .map(|r| {
                let others: Vec<_> = gallery.usable().filter(|g| g.identity != r.identity).collect();
                others[rand::Rng::random_range(&mut rng, 0..others.len())]
            })
            .collect();
        Some((load_batch(&picks, h, w, workers)?, picks))
    } else {
        None
    };
    let condition = if attacker.natural.is_some() { Condition::NaturalisticPatch } else { Condition::AdversarialPatch };
    let cfg = AttackConfig {
        condition,
        attacker: Some(attacker),
        patch_size: attacker.patch_size(),
        transform: crate::composer::TransformSpec::identity(),
        seed,
    };
    let (attacked, masks) = attack_images(&clean, targets.as_ref().map(|t| &t.0), &cfg)?;

    let stage = |x: &Tensor| -> Result<Vec<ActivationMap>> {
        let mut maps = Vec::new();
        for i in 0..x.dim(0)? {
            let f = embedder.stage_features(&x.narrow(0, i, 1)?)?;
            maps.push(activation_map(&f[layer], format!("stage{layer}"))?);
        }
        Ok(maps)
    };
    let clean_maps = stage(&clean)?;
    let attacked_maps = stage(&attacked)?;
    let masses = masks
        .iter()
        .zip(clean_maps.iter().zip(&attacked_maps))
        .map(|(m, (c, a))| MassRecord {
            area_fraction: m.area_fraction(),
            mass_clean: c.window_mass_fraction(m),
            mass_attacked: a.window_mass_fraction(m),
        })
        .collect();

    let same_id: Vec<(usize, &crate::data::PersonRecord)> = q
        .iter()
        .enumerate()
        .filter_map(|(i, r)| gallery.usable().find(|g| g.identity == r.identity).map(|g| (i, g)))
        .collect();
    let n = q.len();
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut groups = Vec::new();
    let to_f64 = |v: Vec<Vec<f32>>| v.into_iter().map(|r| r.into_iter().map(f64::from).collect::<Vec<_>>());
    points.extend(to_f64(embed_images(embedder, &clean)?));
    groups.extend(std::iter::repeat_n(Group::Source, n));
    let mut clean_pairs = Vec::new();
    if !same_id.is_empty() {
        let recs: Vec<_> = same_id.iter().map(|(_, g)| *g).collect();
        let imgs = load_batch(&recs, h, w, workers)?;
        for (k, v) in to_f64(embed_images(embedder, &imgs)?).enumerate() {
            clean_pairs.push((points.len(), same_id[k].0));
            points.push(v);
            groups.push(Group::CleanSameId);
        }
    }
    if let Some((t, _)) = &targets {
        for v in to_f64(embed_images(embedder, t)?) {
            points.push(v);
            groups.push(Group::Target);
        }
    }
    let mut attacked_pairs = Vec::new();
    for (i, v) in to_f64(embed_images(embedder, &attacked)?).enumerate() {
        attacked_pairs.push((points.len(), i));
        points.push(v);
        groups.push(Group::Attacked);
    }
    let projection = pca_project(&points, &groups, 2)?;
    Ok(Diagnosis {
        clean_images: clean,
        attacked_images: attacked,
        clean_maps,
        attacked_maps,
        masses,
        projection,
        attacked_pairs,
        clean_pairs,
    })
}

/// Clean and attacked heatmap overlays side by side.
pub fn side_by_side(left: &RgbImage, right: &RgbImage) -> RgbImage {
    let (w, h) = left.dimensions();
    let mut out = RgbImage::from_pixel(2 * w + 4, h, Rgb([255, 255, 255]));
    for (x, y, p) in left.enumerate_pixels() {
        out.put_pixel(x, y, *p);
    }
    for (x, y, p) in right.enumerate_pixels() {
        out.put_pixel(x + w + 4, y, *p);
    }
    out
}
