//! Differentiable resampling built from dense interpolation matrices.
//!
//! candle has no backward pass for bilinear upsampling, so resizes and blurs
//! are expressed as `R_y · X · R_xᵀ` matrix products instead.

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Row-stochastic `(out, inp)` matrix for half-pixel-centred bilinear
/// interpolation (the `align_corners = false` convention).
pub fn bilinear_weights(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    if out == inp {
        for i in 0..out {
            m[i * inp + i] = 1.0;
        }
        return m;
    }
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f64;
        m[i * inp + lo] += 1.0 - frac;
        m[i * inp + hi] += frac;
    }
    m
}

fn matrix(rows: usize, cols: usize, data: Vec<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), device)?.to_dtype(dtype)?)
}

/// Bilinear resize of the trailing two dims of `x` (`(..., H, W)`).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let rank = x.rank();
    let (h, w) = (x.dim(rank - 2)?, x.dim(rank - 1)?);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ry = matrix(out_h, h, bilinear_weights(out_h, h), x.dtype(), x.device())?;
    let rx = matrix(out_w, w, bilinear_weights(out_w, w), x.dtype(), x.device())?.t()?;
    Ok(ry.broadcast_matmul(&x.contiguous()?)?.broadcast_matmul(&rx)?)
}

/// `(n, n)` Gaussian blur operator, renormalised at the borders.
pub fn gaussian_weights(n: usize, sigma: f64) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let radius = (3.0 * sigma).ceil() as isize;
    for i in 0..n as isize {
        let mut total = 0.0;
        for k in -radius..=radius {
            let j = i + k;
            if j < 0 || j >= n as isize {
                continue;
            }
            let v = (-(k * k) as f64 / (2.0 * sigma * sigma)).exp();
            m[i as usize * n + j as usize] = v;
            total += v;
        }
        for j in 0..n {
            m[i as usize * n + j] /= total;
        }
    }
    m
}

/// Separable Gaussian blur over the trailing two dims.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let rank = x.rank();
    let (h, w) = (x.dim(rank - 2)?, x.dim(rank - 1)?);
    let by = matrix(h, h, gaussian_weights(h, sigma), x.dtype(), x.device())?;
    let bx = matrix(w, w, gaussian_weights(w, sigma), x.dtype(), x.device())?.t()?;
    Ok(by.broadcast_matmul(&x.contiguous()?)?.broadcast_matmul(&bx)?)
}
