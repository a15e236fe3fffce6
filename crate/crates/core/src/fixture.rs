//! Procedural Market-1501-layout dataset for desk-scale runs.
//!
//! Each identity is a stick "person" with its own clothing colors and shirt
//! pattern. Camera 1 and camera 2 differ in background palette and lighting.

use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub identities: usize,
    pub images_per_identity: usize,
    pub height: u32,
    pub width: u32,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            identities: 16,
            images_per_identity: 8,
            height: 128,
            width: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Pattern {
    Plain,
    HorizontalStripes,
    VerticalBand,
    Checker,
}

#[derive(Debug, Clone)]
struct Appearance {
    skin: [f32; 3],
    hair: [f32; 3],
    shirt: [f32; 3],
    accent: [f32; 3],
    pants: [f32; 3],
    pattern: Pattern,
    bag: Option<[f32; 3]>,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let rgb = match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|c| c * 255.0)
}

fn appearance(index: usize, total: usize, rng: &mut ChaCha8Rng) -> Appearance {
    // Shirt hues are spread evenly so identities stay separable.
    let base = index as f32 / total as f32;
    let pattern = match index % 4 {
        0 => Pattern::Plain,
        1 => Pattern::HorizontalStripes,
        2 => Pattern::VerticalBand,
        _ => Pattern::Checker,
    };
    Appearance {
        skin: hsv(0.07, rng.random_range(0.3..0.6), rng.random_range(0.5..0.95)),
        hair: hsv(rng.random(), 0.5, rng.random_range(0.1..0.5)),
        shirt: hsv(base, rng.random_range(0.6..1.0), rng.random_range(0.7..1.0)),
        accent: hsv(base + 0.5, 0.8, rng.random_range(0.3..1.0)),
        pants: hsv(
            (base * 7.0 + 0.3).fract(),
            rng.random_range(0.3..0.9),
            rng.random_range(0.2..0.8),
        ),
        pattern,
        bag: rng.random_bool(0.5).then(|| hsv(rng.random(), 0.7, 0.6)),
    }
}

struct Canvas {
    img: Vec<[f32; 3]>,
    w: i32,
    h: i32,
}

impl Canvas {
    fn rect(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, mut color: impl FnMut(i32, i32) -> [f32; 3]) {
        let (xa, xb) = (x0.round().max(0.0) as i32, x1.round().min(self.w as f32) as i32);
        let (ya, yb) = (y0.round().max(0.0) as i32, y1.round().min(self.h as f32) as i32);
        for y in ya..yb {
            for x in xa..xb {
                self.img[(y * self.w + x) as usize] = color(x, y);
            }
        }
    }

    fn ellipse(&mut self, cx: f32, cy: f32, rx: f32, ry: f32, c: [f32; 3]) {
        for y in 0..self.h {
            for x in 0..self.w {
                let dx = (x as f32 + 0.5 - cx) / rx;
                let dy = (y as f32 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.img[(y * self.w + x) as usize] = c;
                }
            }
        }
    }
}

fn render(app: &Appearance, camera: u32, spec: &FixtureSpec, rng: &mut ChaCha8Rng) -> RgbImage {
    let (w, h) = (spec.width as i32, spec.height as i32);
    let (wf, hf) = (w as f32, h as f32);

    // Background: camera-specific palette, per-image gradient and blobs.
    let (bg_hue, bg_sat) = if camera == 1 { (0.1, 0.35) } else { (0.58, 0.3) };
    let top = hsv(bg_hue + rng.random_range(-0.08..0.08), bg_sat, rng.random_range(0.5..0.9));
    let bottom = hsv(bg_hue + rng.random_range(-0.08..0.08), bg_sat, rng.random_range(0.2..0.6));
    let mut canvas = Canvas {
        img: (0..h * w)
            .map(|i| {
                let t = (i / w) as f32 / hf;
                [0, 1, 2].map(|c| top[c] * (1.0 - t) + bottom[c] * t)
            })
            .collect(),
        w,
        h,
    };
    for _ in 0..rng.random_range(2..5) {
        let c = hsv(bg_hue + rng.random_range(-0.2..0.2), 0.4, rng.random_range(0.3..0.9));
        let (cx, cy) = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
        let r = rng.random_range(0.08..0.2) * wf;
        canvas.ellipse(cx, cy, r, r * rng.random_range(0.6..1.6), c);
    }

    // Person, in units of the frame.
    let s = rng.random_range(0.9..1.05);
    let cx = wf * 0.5 + rng.random_range(-0.06..0.06) * wf;
    let y0 = hf * 0.06 + rng.random_range(-0.03..0.03) * hf;
    let u = hf * s;
    let head_r = 0.075 * u;
    let head_cy = y0 + head_r;
    canvas.ellipse(cx, head_cy - 0.3 * head_r, head_r * 1.05, head_r * 0.7, app.hair);
    canvas.ellipse(cx, head_cy + 0.15 * head_r, head_r * 0.85, head_r * 0.9, app.skin);

    let torso_top = head_cy + head_r;
    let torso_bot = torso_top + 0.33 * u;
    let half = 0.26 * wf * s;
    let pattern = app.pattern;
    let (shirt, accent) = (app.shirt, app.accent);
    let band = (half * 0.5) as i32;
    canvas.rect(cx - half, torso_top, cx + half, torso_bot, |x, y| {
        let on = match pattern {
            Pattern::Plain => false,
            Pattern::HorizontalStripes => ((y as f32 - torso_top) / (0.05 * u)) as i32 % 2 == 1,
            Pattern::VerticalBand => (x - cx as i32).abs() < band / 2,
            Pattern::Checker => {
                (((x as f32 - cx) / (0.12 * wf)).floor() as i32
                    + ((y as f32 - torso_top) / (0.06 * u)).floor() as i32)
                    .rem_euclid(2)
                    == 0
            }
        };
        if on {
            accent
        } else {
            shirt
        }
    });
    // arms
    canvas.rect(cx - half - 0.1 * wf, torso_top + 0.02 * u, cx - half, torso_bot - 0.02 * u, |_, _| shirt);
    canvas.rect(cx + half, torso_top + 0.02 * u, cx + half + 0.1 * wf, torso_bot - 0.02 * u, |_, _| shirt);
    // legs
    let legs_bot = (torso_bot + 0.42 * u).min(hf);
    let gap = 0.04 * wf;
    canvas.rect(cx - half * 0.9, torso_bot, cx - gap, legs_bot, |_, _| app.pants);
    canvas.rect(cx + gap, torso_bot, cx + half * 0.9, legs_bot, |_, _| app.pants);
    if let Some(bag) = app.bag {
        canvas.rect(cx + half * 0.4, torso_top + 0.18 * u, cx + half + 0.12 * wf, torso_bot + 0.05 * u, |_, _| bag);
    }

    // Camera lighting and sensor noise.
    let (gain, tint) = if camera == 1 {
        (rng.random_range(0.95..1.1), [1.05, 1.0, 0.92])
    } else {
        (rng.random_range(0.7..0.85), [0.9, 0.97, 1.1])
    };
    let mut out = RgbImage::new(spec.width, spec.height);
    for (i, px) in canvas.img.iter().enumerate() {
        let (x, y) = ((i as i32 % w) as u32, (i as i32 / w) as u32);
        let noise: f32 = rng.random_range(-6.0..6.0);
        let v = [0, 1, 2].map(|c| (px[c] * gain * tint[c] + noise).round().clamp(0.0, 255.0) as u8);
        out.put_pixel(x, y, Rgb(v));
    }
    out
}

/// Split assignment for image `i` of `m`: first half train, one query, rest gallery.
pub fn fixture_split(i: usize, m: usize) -> Split {
    let half = m / 2;
    if i < half {
        Split::Train
    } else if i == half {
        Split::Query
    } else {
        Split::Gallery
    }
}

/// Render the dataset under `out` in Market-1501 layout; returns written paths.
pub fn make_fixture(out: &Path, spec: &FixtureSpec) -> Result<Vec<PathBuf>> {
    if spec.identities < 2 {
        return Err(Error::InvalidArgument(format!(
            "fixture needs at least 2 identities, got {}",
            spec.identities
        )));
    }
    if spec.images_per_identity < 2 {
        return Err(Error::InvalidArgument(format!(
            "fixture needs at least 2 images per identity, got {}",
            spec.images_per_identity
        )));
    }
    for split in [Split::Train, Split::Query, Split::Gallery] {
        std::fs::create_dir_all(out.join(split.market_dir()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let apps: Vec<Appearance> = (0..spec.identities)
        .map(|i| appearance(i, spec.identities, &mut rng))
        .collect();
    let mut written = Vec::new();
    let mut frame = 0usize;
    for (pid, app) in apps.iter().enumerate() {
        for i in 0..spec.images_per_identity {
            let camera = 1 + (i % 2) as u32;
            frame += 1;
            let img = render(app, camera, spec, &mut rng);
            let split = fixture_split(i, spec.images_per_identity);
            let name = format!("{:04}_c{}s1_{:06}_00.jpg", pid + 1, camera, frame);
            let path = out.join(split.market_dir()).join(name);
            let mut buf = Vec::new();
            JpegEncoder::new_with_quality(&mut buf, 95).encode_image(&img)?;
            std::fs::write(&path, buf)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{scan_dataset, Layout};

    #[test]
    fn counts_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec::default();
        let files = make_fixture(dir.path(), &spec).unwrap();
        assert_eq!(files.len(), 128);
        let idx = scan_dataset(dir.path(), Layout::Synthetic).unwrap();
        assert_eq!(idx.records.len(), 128);
        assert_eq!(idx.num_identities, 16);
        let cams: std::collections::BTreeSet<_> = idx.records.iter().map(|r| r.camera).collect();
        assert_eq!(cams.len(), 2);
        assert_eq!(idx.split(Split::Query).len(), 16);
        assert_eq!(idx.split(Split::Gallery).len(), 48);
    }

    #[test]
    fn deterministic_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = FixtureSpec { identities: 2, images_per_identity: 2, seed: 5, ..Default::default() };
        let fa = make_fixture(a.path(), &spec).unwrap();
        let fb = make_fixture(b.path(), &spec).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn rejects_single_identity() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec { identities: 1, ..Default::default() };
        assert!(make_fixture(dir.path(), &spec).is_err());
    }
}
