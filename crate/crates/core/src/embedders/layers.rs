use super::depthwise::depthwise_conv;
use candle_core::{Module, ModuleT, Result, Tensor};
use candle_nn::{batch_norm, conv2d_no_bias, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, VarBuilder};

/// Convolution without bias followed by batch normalisation.
#[derive(Debug, Clone)]
pub struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
    relu: bool,
    /// Stride-1 depthwise convolution, evaluated as shifted slices.
    depthwise: bool,
    /// Ungrouped stride-1 1×1 convolution, evaluated as a matmul.
    pointwise: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vb: VarBuilder,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        relu: bool,
    ) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: kernel / 2,
            stride,
            dilation: 1,
            groups,
            cudnn_fwd_algo: None,
        };
        Ok(Self {
            conv: conv2d_no_bias(c_in, c_out, kernel, cfg, vb.pp("conv"))?,
            bn: batch_norm(c_out, BatchNormConfig::default(), vb.pp("bn"))?,
            relu,
            depthwise: groups > 1 && groups == c_in && groups == c_out && stride == 1,
            pointwise: kernel == 1 && groups == 1 && stride == 1,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let conv = if self.depthwise {
            depthwise_conv(x, self.conv.weight())?
        } else if self.pointwise {
            pointwise_conv(x, self.conv.weight())?
        } else {
            self.conv.forward(x)?
        };
        let y = self.bn.forward_t(&conv, train)?;
        if self.relu {
            y.relu()
        } else {
            Ok(y)
        }
    }
}

/// 1×1 convolution with a `(C_out, C_in, 1, 1)` kernel as a batched matmul.
/// candle's convolution backward is several times slower than its matmul
/// backward for this shape.
pub fn pointwise_conv(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let c_out = weight.dim(0)?;
    let y = weight.reshape((c_out, c))?.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
    y.reshape((b, c_out, h, w))
}

/// Spatial mean over the trailing two dims: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.mean(3)?.mean(2)
}
