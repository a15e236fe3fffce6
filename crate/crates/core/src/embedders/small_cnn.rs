use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;

use super::layers::ConvBn;
use super::Network;

/// Stride-2 stem and four stride-2 blocks of two 3×3 convolutions each.
pub struct SmallCnn {
    stem: ConvBn,
    blocks: Vec<(ConvBn, ConvBn)>,
    channels: [usize; 5],
}

impl SmallCnn {
    pub fn new(vb: VarBuilder, width: usize) -> Result<Self> {
        let channels = [width, width * 2, width * 4, width * 8, width * 16];
        let stem = ConvBn::new(vb.pp("stem"), 3, channels[0], 3, 2, 1, true)?;
        let blocks = (1..5)
            .map(|i| {
                let vb = vb.pp(format!("block{i}"));
                Ok((
                    ConvBn::new(vb.pp("a"), channels[i - 1], channels[i], 3, 2, 1, true)?,
                    ConvBn::new(vb.pp("b"), channels[i], channels[i], 3, 1, 1, true)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stem, blocks, channels })
    }
}

impl Network for SmallCnn {
    fn stages(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(5);
        let mut h = self.stem.forward_t(x, train)?;
        out.push(h.clone());
        for (a, b) in &self.blocks {
            h = b.forward_t(&a.forward_t(&h, train)?, train)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    fn stage_channels(&self) -> [usize; 5] {
        self.channels
    }
}
