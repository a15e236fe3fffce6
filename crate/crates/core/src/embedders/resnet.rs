use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;

use super::layers::ConvBn;
use super::Network;

struct Bottleneck {
    reduce: ConvBn,
    conv: ConvBn,
    expand: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn new(vb: VarBuilder, c_in: usize, mid: usize, stride: usize) -> Result<Self> {
        let c_out = mid * 4;
        let downsample = if stride != 1 || c_in != c_out {
            Some(ConvBn::new(vb.pp("downsample"), c_in, c_out, 1, stride, 1, false)?)
        } else {
            None
        };
        Ok(Self {
            reduce: ConvBn::new(vb.pp("conv1"), c_in, mid, 1, 1, 1, true)?,
            conv: ConvBn::new(vb.pp("conv2"), mid, mid, 3, stride, 1, true)?,
            expand: ConvBn::new(vb.pp("conv3"), mid, c_out, 1, 1, 1, false)?,
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.reduce.forward_t(x, train)?;
        let y = self.conv.forward_t(&y, train)?;
        let y = self.expand.forward_t(&y, train)?;
        let skip = match &self.downsample {
            Some(d) => d.forward_t(x, train)?,
            None => x.clone(),
        };
        (y + skip)?.relu()
    }
}

/// 50-layer bottleneck residual network (3-4-6-3 layout).
///
/// The stem max-pool uses a 2×2 window so the input gradient is defined.
pub struct Residual50 {
    stem: ConvBn,
    layers: Vec<Vec<Bottleneck>>,
    channels: [usize; 5],
}

impl Residual50 {
    pub fn new(vb: VarBuilder, width: usize) -> Result<Self> {
        let stem = ConvBn::new(vb.pp("stem"), 3, width, 7, 2, 1, true)?;
        let depths = [3, 4, 6, 3];
        let mut layers = Vec::new();
        let mut c_in = width;
        for (i, &depth) in depths.iter().enumerate() {
            let mid = width << i;
            let stride = if i == 0 { 1 } else { 2 };
            let blocks = (0..depth)
                .map(|j| {
                    let b = Bottleneck::new(
                        vb.pp(format!("layer{}.{j}", i + 1)),
                        if j == 0 { c_in } else { mid * 4 },
                        mid,
                        if j == 0 { stride } else { 1 },
                    );
                    b
                })
                .collect::<Result<Vec<_>>>()?;
            c_in = mid * 4;
            layers.push(blocks);
        }
        let channels = [width, width * 4, width * 8, width * 16, width * 32];
        Ok(Self { stem, layers, channels })
    }
}

impl Network for Residual50 {
    fn stages(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(5);
        let stem = self.stem.forward_t(x, train)?;
        let mut h = stem.max_pool2d(2)?;
        out.push(stem);
        for layer in &self.layers {
            for block in layer {
                h = block.forward_t(&h, train)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }

    fn stage_channels(&self) -> [usize; 5] {
        self.channels
    }
}
