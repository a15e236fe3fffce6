//! Patch placement, random transformation and masked blending.
//!
//! The blend is `I_adv = (1 - M) ⊙ I_s + M ⊙ P̂` where `P̂` is the
//! (transformed) patch zero-padded into the mask window.

use candle_core::{DType, Device, Tensor};
use nalgebra::{Matrix3, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::gaussian_blur;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementMask {
    /// Row-major `height × width` binary mask.
    pub m: Vec<u8>,
    pub height: usize,
    pub width: usize,
    /// Column of the window origin.
    pub x: usize,
    /// Row of the window origin.
    pub y: usize,
    pub h: usize,
    pub w: usize,
}

impl PlacementMask {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.m[row * self.width + col]
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y..self.y + self.h).contains(&row) && (self.x..self.x + self.w).contains(&col)
    }

    pub fn area_fraction(&self) -> f64 {
        (self.h * self.w) as f64 / (self.height * self.width) as f64
    }

    /// `(1, H, W)` mask tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.m.clone(), (1, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

pub fn make_mask(
    height: usize,
    width: usize,
    h: usize,
    w: usize,
    x: usize,
    y: usize,
) -> Result<PlacementMask> {
    if h == 0 || w == 0 || h > height || w > width || x > width - w || y > height - h {
        return Err(Error::Placement(format!(
            "{h}x{w} window at (x={x}, y={y}) does not fit a {height}x{width} image"
        )));
    }
    let mut m = vec![0u8; height * width];
    for row in y..y + h {
        m[row * width + x..row * width + x + w].fill(1);
    }
    Ok(PlacementMask { m, height, width, x, y, h, w })
}

/// Uniformly sampled valid origin.
pub fn sample_placement<R: Rng>(
    height: usize,
    width: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<PlacementMask> {
    if h > height || w > width || h == 0 || w == 0 {
        return Err(Error::Placement(format!("{h}x{w} patch exceeds {height}x{width} image")));
    }
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    make_mask(height, width, h, w, x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformSpec {
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    /// Max corner displacement as a fraction of the patch side.
    pub perspective: f64,
    pub blur_sigma: (f64, f64),
    pub brightness: (f64, f64),
    /// Contrast jitter: the factor is `1 + c`.
    pub contrast: (f64, f64),
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            rotation_deg: (-15.0, 15.0),
            scale: (0.8, 1.2),
            perspective: 0.05,
            blur_sigma: (0.0, 1.0),
            brightness: (-0.1, 0.1),
            contrast: (-0.1, 0.1),
        }
    }
}

fn check_range(field: &str, (lo, hi): (f64, f64), identity: f64) -> Result<()> {
    if !(lo <= identity && identity <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(
            format!("transform.{field}"),
            format!("range [{lo}, {hi}] must contain {identity}"),
        ));
    }
    Ok(())
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
            perspective: 0.0,
            blur_sigma: (0.0, 0.0),
            brightness: (0.0, 0.0),
            contrast: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_range("rotation_deg", self.rotation_deg, 0.0)?;
        check_range("scale", self.scale, 1.0)?;
        check_range("blur_sigma", self.blur_sigma, 0.0)?;
        check_range("brightness", self.brightness, 0.0)?;
        check_range("contrast", self.contrast, 0.0)?;
        if !(0.0..0.5).contains(&self.perspective) {
            return Err(Error::config("transform.perspective", "must lie in [0, 0.5)"));
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::config("transform.scale", "must be positive"));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> TransformParams {
        fn draw<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        }
        let rotation_deg = draw(rng, self.rotation_deg);
        let scale = draw(rng, self.scale);
        let mut corners = [[0.0; 2]; 4];
        if self.perspective > 0.0 {
            for c in corners.iter_mut().flatten() {
                *c = rng.random_range(-self.perspective..=self.perspective);
            }
        }
        TransformParams {
            rotation_deg,
            scale,
            corner_jitter: corners,
            blur_sigma: draw(rng, self.blur_sigma),
            brightness: draw(rng, self.brightness),
            contrast: 1.0 + draw(rng, self.contrast),
        }
    }
}

/// One concrete draw from a [`TransformSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams {
    pub rotation_deg: f64,
    pub scale: f64,
    /// Corner displacements (fractions of the side) for TL, TR, BR, BL.
    pub corner_jitter: [[f64; 2]; 4],
    pub blur_sigma: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl TransformParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            corner_jitter: [[0.0; 2]; 4],
            blur_sigma: 0.0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.scale == 1.0
            && self.corner_jitter.iter().flatten().all(|&c| c == 0.0)
    }

    /// Homography mapping source patch coordinates to destination coordinates
    /// (pixel-centre convention, origin at the top-left corner).
    pub fn homography(&self, h: usize, w: usize) -> Matrix3<f64> {
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.scale;
        let affine = Matrix3::new(
            k * c, -k * s, cx - k * c * cx + k * s * cy,
            k * s, k * c, cy - k * s * cx - k * c * cy,
            0.0, 0.0, 1.0,
        );
        if self.corner_jitter.iter().flatten().all(|&v| v == 0.0) {
            return affine;
        }
        let src = [(0.0, 0.0), (w as f64, 0.0), (w as f64, h as f64), (0.0, h as f64)];
        let dst: Vec<(f64, f64)> = src
            .iter()
            .zip(&self.corner_jitter)
            .map(|(&(x, y), j)| {
                let p = affine * nalgebra::Vector3::new(x, y, 1.0);
                (p.x + j[0] * w as f64, p.y + j[1] * h as f64)
            })
            .collect();
        homography_from_points(&src, &dst).unwrap_or(affine)
    }
}

/// Direct linear transform for exactly four correspondences.
fn homography_from_points(src: &[(f64, f64); 4], dst: &[(f64, f64)]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        a.set_row(2 * i, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(2 * i + 1, &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[2 * i] = u;
        b[2 * i + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Gather indices and bilinear weights realising the inverse warp of
/// `params` on an `h × w` grid; out-of-support taps get weight 0.
fn warp_taps(params: &TransformParams, h: usize, w: usize) -> ([Vec<u32>; 4], [Vec<f64>; 4]) {
    let inv = params
        .homography(h, w)
        .try_inverse()
        .unwrap_or_else(Matrix3::identity);
    let n = h * w;
    let mut idx: [Vec<u32>; 4] = std::array::from_fn(|_| vec![0u32; n]);
    let mut wts: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    for row in 0..h {
        for col in 0..w {
            let p = inv * nalgebra::Vector3::new(col as f64 + 0.5, row as f64 + 0.5, 1.0);
            let (sx, sy) = (p.x / p.z - 0.5, p.y / p.z - 0.5);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            let o = row * w + col;
            for (k, &(tx, ty, wt)) in taps.iter().enumerate() {
                if tx >= 0.0 && ty >= 0.0 && (tx as usize) < w && (ty as usize) < h && wt > 0.0 {
                    idx[k][o] = (ty as usize * w + tx as usize) as u32;
                    wts[k][o] = wt;
                }
            }
        }
    }
    (idx, wts)
}

/// Apply concrete transform parameters to a `(3, h, w)` patch. Differentiable
/// with respect to the patch; identity parameters return the input unchanged.
pub fn apply_transform(patch: &Tensor, params: &TransformParams) -> Result<Tensor> {
    let (c, h, w) = patch.dims3()?;
    let mut out = patch.clone();
    if !params.is_geometric_identity() {
        let (idx, wts) = warp_taps(params, h, w);
        let flat = out.reshape((c, h * w))?;
        let mut acc: Option<Tensor> = None;
        for k in 0..4 {
            let ids = Tensor::from_vec(idx[k].clone(), h * w, patch.device())?;
            let wt = Tensor::from_vec(wts[k].clone(), (1, h * w), patch.device())?
                .to_dtype(patch.dtype())?;
            let term = flat.index_select(&ids, 1)?.broadcast_mul(&wt)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        out = acc.expect("four taps").reshape((c, h, w))?;
    }
    if params.blur_sigma > 1e-6 {
        out = gaussian_blur(&out, params.blur_sigma)?;
    }
    if params.contrast != 1.0 || params.brightness != 0.0 {
        out = out
            .affine(params.contrast, params.brightness)?
            .clamp(-1.0, 1.0)?;
    }
    Ok(out)
}

/// Random spatial + photometric transform, deterministic under `seed`.
pub fn transform_patch(patch: &Tensor, spec: &TransformSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let params = spec.sample(&mut ChaCha8Rng::seed_from_u64(seed));
    apply_transform(patch, &params)
}

/// Blend one `(3, h, w)` patch into a `(3, H, W)` image.
pub fn compose(source: &Tensor, patch: &Tensor, mask: &PlacementMask) -> Result<Tensor> {
    let (c, hh, ww) = source.dims3()?;
    let (pc, ph, pw) = patch.dims3()?;
    if pc != c || (ph, pw) != (mask.h, mask.w) || (hh, ww) != (mask.height, mask.width) {
        return Err(Error::Shape(format!(
            "patch {:?} / image {:?} do not match a {}x{} window on {}x{}",
            patch.dims(),
            source.dims(),
            mask.h,
            mask.w,
            mask.height,
            mask.width
        )));
    }
    let padded = patch
        .pad_with_zeros(1, mask.y, hh - mask.y - ph)?
        .pad_with_zeros(2, mask.x, ww - mask.x - pw)?;
    let m = mask.to_tensor(source.dtype(), source.device())?;
    let keep = m.affine(-1.0, 1.0)?;
    Ok((source.broadcast_mul(&keep)? + padded.broadcast_mul(&m)?)?)
}

/// Batched [`compose`]: one mask per sample.
pub fn compose_batch(sources: &Tensor, patches: &Tensor, masks: &[PlacementMask]) -> Result<Tensor> {
    let n = sources.dim(0)?;
    if patches.dim(0)? != n || masks.len() != n {
        return Err(Error::Shape(format!(
            "batch sizes differ: {} images, {} patches, {} masks",
            n,
            patches.dim(0)?,
            masks.len()
        )));
    }
    let out = (0..n)
        .map(|i| compose(&sources.get(i)?, &patches.get(i)?, &masks[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&out, 0)?)
}

/// Transform each patch of a `(B, 3, h, w)` batch with its own parameters.
pub fn transform_batch(patches: &Tensor, params: &[TransformParams]) -> Result<Tensor> {
    let out = params
        .iter()
        .enumerate()
        .map(|(i, p)| apply_transform(&patches.get(i)?, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&out, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>, shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn mask_construction() {
        let m = make_mask(4, 4, 2, 2, 0, 0).unwrap();
        assert_eq!(m.m.iter().map(|&v| v as usize).sum::<usize>(), 4);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.at(r, c) == 1, r < 2 && c < 2);
            }
        }
        let full = make_mask(5, 3, 5, 3, 0, 0).unwrap();
        assert!(full.m.iter().all(|&v| v == 1));
        assert!(matches!(make_mask(4, 4, 2, 2, 3, 0), Err(Error::Placement(_))));
        assert!(matches!(make_mask(4, 4, 2, 2, 0, 3), Err(Error::Placement(_))));
        assert!(matches!(make_mask(4, 4, 5, 2, 0, 0), Err(Error::Placement(_))));
    }

    #[test]
    fn identity_transform_is_exact() {
        let p = Tensor::randn(0f32, 0.5, (3, 6, 5), &Device::Cpu).unwrap();
        let out = transform_patch(&p, &TransformSpec::identity(), 3).unwrap();
        let a: Vec<f32> = p.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = out.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn brightness_shift() {
        let p = Tensor::zeros((3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let params = TransformParams { brightness: 0.1, ..TransformParams::identity() };
        let v: Vec<f32> = apply_transform(&p, &params).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&x| (x - 0.1).abs() < 1e-7));
        let ones = Tensor::ones((3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let v: Vec<f32> = apply_transform(&ones, &params).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&x| x == 1.0));
    }

    /// Nearest-neighbour pixel-by-pixel rotation about the patch centre.
    fn reference_rotation(src: &[f64], h: usize, w: usize, deg: f64) -> Vec<f64> {
        let (s, c) = deg.to_radians().sin_cos();
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let mut out = vec![0.0; h * w];
        for row in 0..h {
            for col in 0..w {
                let (dx, dy) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
                // inverse rotation
                let sx = c * dx + s * dy + cx - 0.5;
                let sy = -s * dx + c * dy + cy - 0.5;
                let (ix, iy) = (sx.round(), sy.round());
                if ix >= 0.0 && iy >= 0.0 && (ix as usize) < w && (iy as usize) < h {
                    out[row * w + col] = src[iy as usize * w + ix as usize];
                }
            }
        }
        out
    }

    #[test]
    fn rotation_matches_reference_warp() {
        let pattern = vec![1.0, 2.0, 3.0, 4.0];
        let p = t(pattern.repeat(3), (3, 2, 2));
        let params = TransformParams { rotation_deg: 90.0, ..TransformParams::identity() };
        let out: Vec<f64> = apply_transform(&p, &params).unwrap().get(0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let expect = reference_rotation(&pattern, 2, 2, 90.0);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9, "{out:?} vs {expect:?}");
        }
        // quarter turn of [[1,2],[3,4]] about the centre
        assert_eq!(expect, vec![3.0, 1.0, 4.0, 2.0]);
    }

    #[test]
    fn transform_is_seeded_and_shape_preserving() {
        let p = Tensor::randn(0f32, 0.5, (3, 16, 16), &Device::Cpu).unwrap();
        let spec = TransformSpec::default();
        let a = transform_patch(&p, &spec, 11).unwrap();
        let b = transform_patch(&p, &spec, 11).unwrap();
        assert_eq!(a.dims(), p.dims());
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = TransformSpec { scale: (1.1, 1.3), ..TransformSpec::default() };
        assert!(spec.validate().is_err());
        let spec = TransformSpec { blur_sigma: (0.5, 1.0), ..TransformSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn compose_zero_mask_and_window() {
        let src = Tensor::randn(0f64, 1.0, (3, 6, 5), &Device::Cpu).unwrap();
        let patch = Tensor::randn(0f64, 1.0, (3, 2, 3), &Device::Cpu).unwrap();
        let mask = make_mask(6, 5, 2, 3, 1, 4).unwrap();
        let out = compose(&src, &patch, &mask).unwrap();
        let o: Vec<Vec<Vec<f64>>> = out.to_vec3().unwrap();
        let s: Vec<Vec<Vec<f64>>> = src.to_vec3().unwrap();
        let p: Vec<Vec<Vec<f64>>> = patch.to_vec3().unwrap();
        for c in 0..3 {
            for r in 0..6 {
                for col in 0..5 {
                    if mask.contains(r, col) {
                        assert_eq!(o[c][r][col], p[c][r - 4][col - 1]);
                    } else {
                        assert_eq!(o[c][r][col].to_bits(), s[c][r][col].to_bits());
                    }
                }
            }
        }
        let bad = Tensor::zeros((3, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(compose(&src, &bad, &mask), Err(Error::Shape(_))));
    }

    #[test]
    fn random_placement_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let m = sample_placement(128, 64, 32, 32, &mut rng).unwrap();
            assert!(m.x + m.w <= 64 && m.y + m.h <= 128);
        }
    }
}
