use candle_core::{Module, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, Scope};

/// Per-frame U-Net encoder. Level 1 runs at input resolution; each further
/// level halves it with a strided 3x3 convolution before its conv block.
#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    in_channels: usize,
    levels: Vec<(Option<Conv2d>, ConvBlock)>,
}

impl SpatialEncoder {
    pub fn new(in_channels: usize, channels: &[usize], groups: usize, vs: Scope) -> Result<Self> {
        let mut levels = Vec::with_capacity(channels.len());
        let mut prev = in_channels;
        for (l, &c) in channels.iter().enumerate() {
            let vs = vs.pp(format!("level{}", l + 1));
            let down = if l == 0 {
                None
            } else {
                Some(Conv2d::new(prev, prev, 3, 2, 1, vs.pp("down"))?)
            };
            let block = ConvBlock::new(prev, c, groups, vs.pp("block"))?;
            levels.push((down, block));
            prev = c;
        }
        Ok(Self { in_channels, levels })
    }

    /// `[N, C_in, H, W]` to one map `[N, C_l, H_l, W_l]` per level.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Dimension(format!(
                "encoder expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let mut out = Vec::with_capacity(self.levels.len());
        let mut cur = x.clone();
        for (down, block) in &self.levels {
            if let Some(down) = down {
                cur = down.forward(&cur)?;
            }
            cur = block.forward(&cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Encodes every frame of `[B, T, C_in, H, W]` independently; levels come
    /// back as `[B, T, C_l, H_l, W_l]`.
    pub fn forward_temporal(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (b, t, c, h, w) = x.dims5()?;
        let flat = x.reshape((b * t, c, h, w))?;
        self.forward(&flat)?
            .into_iter()
            .map(|e| {
                let (_, cl, hl, wl) = e.dims4()?;
                Ok(e.reshape((b, t, cl, hl, wl))?)
            })
            .collect()
    }
}
