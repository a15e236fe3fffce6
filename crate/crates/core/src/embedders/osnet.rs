use candle_core::{Module, Result, Tensor};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, VarBuilder};

use super::layers::{global_avg_pool, pointwise_conv, ConvBn};
use super::Network;

/// Pointwise 1×1 followed by a depthwise 3×3 with batch norm and ReLU.
struct LiteConv {
    pointwise: Conv2d,
    depthwise: ConvBn,
}

impl LiteConv {
    fn new(vb: VarBuilder, channels: usize) -> Result<Self> {
        let cfg = Conv2dConfig::default();
        Ok(Self {
            pointwise: candle_nn::conv2d_no_bias(channels, channels, 1, cfg, vb.pp("pw"))?,
            depthwise: ConvBn::new(vb.pp("dw"), channels, channels, 3, 1, channels, true)?,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.depthwise.forward_t(&pointwise_conv(x, self.pointwise.weight())?, train)
    }
}

/// Channel gate shared by all streams of one block.
struct AggregationGate {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl AggregationGate {
    fn new(vb: VarBuilder, channels: usize) -> Result<Self> {
        let hidden = (channels / 16).max(1);
        let cfg = Conv2dConfig::default();
        Ok(Self {
            fc1: conv2d(channels, hidden, 1, cfg, vb.pp("fc1"))?,
            fc2: conv2d(hidden, channels, 1, cfg, vb.pp("fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let pooled = global_avg_pool(x)?.reshape((b, c, 1, 1))?;
        let g = self.fc2.forward(&self.fc1.forward(&pooled)?.relu()?)?;
        candle_nn::ops::sigmoid(&g)?.broadcast_mul(x)
    }
}

/// Omni-scale residual block: four streams of 1–4 stacked lite convolutions.
struct OmniBlock {
    reduce: ConvBn,
    streams: Vec<Vec<LiteConv>>,
    gate: AggregationGate,
    expand: ConvBn,
    downsample: Option<ConvBn>,
}

impl OmniBlock {
    fn new(vb: VarBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        let mid = (c_out / 4).max(1);
        let streams = (1..=4)
            .map(|t| {
                (0..t)
                    .map(|k| LiteConv::new(vb.pp(format!("stream{t}.{k}")), mid))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let downsample = if c_in != c_out {
            Some(ConvBn::new(vb.pp("downsample"), c_in, c_out, 1, 1, 1, false)?)
        } else {
            None
        };
        Ok(Self {
            reduce: ConvBn::new(vb.pp("conv1"), c_in, mid, 1, 1, 1, true)?,
            streams,
            gate: AggregationGate::new(vb.pp("gate"), mid)?,
            expand: ConvBn::new(vb.pp("conv3"), mid, c_out, 1, 1, 1, false)?,
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let r = self.reduce.forward_t(x, train)?;
        let mut agg: Option<Tensor> = None;
        for stream in &self.streams {
            let mut s = r.clone();
            for conv in stream {
                s = conv.forward_t(&s, train)?;
            }
            let g = self.gate.forward(&s)?;
            agg = Some(match agg {
                None => g,
                Some(a) => (a + g)?,
            });
        }
        let y = self.expand.forward_t(&agg.expect("four streams"), train)?;
        let skip = match &self.downsample {
            Some(d) => d.forward_t(x, train)?,
            None => x.clone(),
        };
        (y + skip)?.relu()
    }
}

struct Transition {
    conv: ConvBn,
}

impl Transition {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.conv.forward_t(x, train)?.avg_pool2d(2)
    }
}

/// Lightweight omni-scale network. Channel plan for `width = 64` is
/// 64 → 256 → 384 → 512 → 512 at strides 2, 4, 8, 16, 32.
pub struct OsnetLike {
    stem: ConvBn,
    stages: Vec<Vec<OmniBlock>>,
    transitions: Vec<Transition>,
    channels: [usize; 5],
}

impl OsnetLike {
    pub fn new(vb: VarBuilder, width: usize) -> Result<Self> {
        let channels = [width, width * 4, width * 6, width * 8, width * 8];
        let stem = ConvBn::new(vb.pp("stem"), 3, channels[0], 7, 2, 1, true)?;
        let mut stages = Vec::new();
        let mut transitions = Vec::new();
        for i in 1..4 {
            let vbs = vb.pp(format!("conv{}", i + 1));
            stages.push(vec![
                OmniBlock::new(vbs.pp("0"), channels[i - 1], channels[i])?,
                OmniBlock::new(vbs.pp("1"), channels[i], channels[i])?,
            ]);
            transitions.push(Transition {
                conv: ConvBn::new(vb.pp(format!("transition{}", i + 1)), channels[i], channels[i], 1, 1, 1, true)?,
            });
        }
        Ok(Self { stem, stages, transitions, channels })
    }
}

impl Network for OsnetLike {
    fn stages(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(5);
        let stem = self.stem.forward_t(x, train)?;
        let mut h = stem.max_pool2d(2)?;
        out.push(stem);
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                h = block.forward_t(&h, train)?;
            }
            out.push(h.clone());
            h = self.transitions[i].forward_t(&h, train)?;
        }
        out.push(h);
        Ok(out)
    }

    fn stage_channels(&self) -> [usize; 5] {
        self.channels
    }
}
