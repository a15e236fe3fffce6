//! Depthwise convolution as a custom CPU op.
//!
//! candle evaluates grouped convolutions one group at a time and its
//! convolution backward is slow for these shapes. The arithmetic here is
//! tiny (`B·C·H·W·k²` multiply-adds), so direct loops win by a wide margin.

use candle_core::{CpuStorage, CustomOp2, Error, Layout, Result, Shape, Tensor, WithDType};

/// Same-padded, stride-1 depthwise correlation of `(B, C, H, W)` with
/// `(C, 1, k, k)`; `flip` rotates the kernel by 180°.
struct Depthwise {
    flip: bool,
}

/// Kernel gradient `(C, 1, k, k)` from the input and the output gradient.
struct DepthwiseKernelGrad {
    k: usize,
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(Error::Msg("depthwise conv expects contiguous tensors".into())),
    }
}

/// Rows `r` of an `n`-long axis for which `r + i - p` is in range.
fn valid(n: usize, i: usize, p: usize) -> std::ops::Range<usize> {
    p.saturating_sub(i)..(n + p).saturating_sub(i).min(n)
}

fn forward<T: WithDType>(x: &[T], w: &[T], dims: (usize, usize, usize, usize), k: usize, flip: bool) -> Vec<T> {
    let (b, c, h, wd) = dims;
    let p = k / 2;
    let mut y = vec![T::zero(); b * c * h * wd];
    for plane in 0..b * c {
        let ch = plane % c;
        let off = plane * h * wd;
        for i in 0..k {
            for j in 0..k {
                let tap = if flip { w[ch * k * k + (k - 1 - i) * k + (k - 1 - j)] } else { w[ch * k * k + i * k + j] };
                let cols = valid(wd, j, p);
                for r in valid(h, i, p) {
                    let src = off + (r + i - p) * wd + j;
                    let dst = off + r * wd;
                    for s in cols.clone() {
                        y[dst + s] += tap * x[src + s - p];
                    }
                }
            }
        }
    }
    y
}

fn kernel_grad<T: WithDType>(x: &[T], g: &[T], dims: (usize, usize, usize, usize), k: usize) -> Vec<T> {
    let (b, c, h, wd) = dims;
    let p = k / 2;
    let mut gw = vec![T::zero(); c * k * k];
    for plane in 0..b * c {
        let ch = plane % c;
        let off = plane * h * wd;
        for i in 0..k {
            for j in 0..k {
                let cols = valid(wd, j, p);
                let mut acc = T::zero();
                for r in valid(h, i, p) {
                    let src = off + (r + i - p) * wd + j;
                    let dst = off + r * wd;
                    for s in cols.clone() {
                        acc += g[dst + s] * x[src + s - p];
                    }
                }
                gw[ch * k * k + i * k + j] += acc;
            }
        }
    }
    gw
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-conv"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let (c, _, k, _) = l2.shape().dims4()?;
        if c != dims.1 {
            return Err(Error::Msg(format!("depthwise kernel has {c} channels, input {}", dims.1)));
        }
        let out = match s1 {
            CpuStorage::F32(_) => {
                CpuStorage::F32(forward(contiguous::<f32>(s1, l1)?, contiguous::<f32>(s2, l2)?, dims, k, self.flip))
            }
            CpuStorage::F64(_) => {
                CpuStorage::F64(forward(contiguous::<f64>(s1, l1)?, contiguous::<f64>(s2, l2)?, dims, k, self.flip))
            }
            _ => return Err(Error::Msg("depthwise conv supports f32 and f64 only".into())),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        if self.flip {
            return Err(Error::BackwardNotSupported { op: "depthwise-conv (flipped)" });
        }
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &Depthwise { flip: true })?;
        let gw = x.apply_op2_no_bwd(&grad, &DepthwiseKernelGrad { k: w.dim(2)? })?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for DepthwiseKernelGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv-kernel-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(kernel_grad(contiguous::<f32>(s1, l1)?, contiguous::<f32>(s2, l2)?, dims, self.k)),
            CpuStorage::F64(_) => CpuStorage::F64(kernel_grad(contiguous::<f64>(s1, l1)?, contiguous::<f64>(s2, l2)?, dims, self.k)),
            _ => return Err(Error::Msg("depthwise conv supports f32 and f64 only".into())),
        };
        Ok((out, Shape::from((dims.1, 1, self.k, self.k))))
    }
}

/// Same-padded, stride-1 depthwise convolution with an odd `(C, 1, k, k)` kernel.
pub fn depthwise_conv(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (_, _, kh, kw) = weight.dims4()?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Msg(format!("depthwise kernel must be square and odd, got {kh}x{kw}")));
    }
    x.contiguous()?.apply_op2(&weight.contiguous()?, Depthwise { flip: false })
}
