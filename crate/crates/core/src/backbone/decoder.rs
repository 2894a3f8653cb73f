use candle_core::{Module, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBlock, Scope, UpConv2x2};

/// Fuses the two modality maps of one level: `[h_ms, h_sar, h_ms * a_sar,
/// h_sar * a_ms]` on channels, mixed back to `C` by a 1x1 convolution.
#[derive(Debug, Clone)]
pub struct CrossModalityFusion {
    mix: Conv2d,
}

impl CrossModalityFusion {
    pub fn new(channels: usize, vs: Scope) -> Result<Self> {
        Ok(Self {
            mix: Conv2d::conv1x1(4 * channels, channels, vs.pp("mix"))?,
        })
    }

    pub fn from_conv(mix: Conv2d) -> Self {
        Self { mix }
    }

    /// The four stacked blocks before mixing, `[B, 4C, H, W]`.
    pub fn stack(h_ms: &Tensor, h_sar: &Tensor, a_ms: &Tensor, a_sar: &Tensor) -> Result<Tensor> {
        if h_ms.dims() != h_sar.dims() {
            return Err(Error::Dimension(format!(
                "modality maps differ: {:?} vs {:?}",
                h_ms.dims(),
                h_sar.dims()
            )));
        }
        let (b, _, h, w) = h_ms.dims4()?;
        for a in [a_ms, a_sar] {
            if a.dims3()? != (b, h, w) {
                return Err(Error::Dimension(format!(
                    "summary map {:?} does not match features {:?}",
                    a.dims(),
                    h_ms.dims()
                )));
            }
        }
        let a_ms = a_ms.unsqueeze(1)?;
        let a_sar = a_sar.unsqueeze(1)?;
        Ok(Tensor::cat(
            &[
                h_ms.clone(),
                h_sar.clone(),
                h_ms.broadcast_mul(&a_sar)?,
                h_sar.broadcast_mul(&a_ms)?,
            ],
            1,
        )?)
    }

    pub fn forward(&self, h_ms: &Tensor, h_sar: &Tensor, a_ms: &Tensor, a_sar: &Tensor) -> Result<Tensor> {
        Ok(self.mix.forward(&Self::stack(h_ms, h_sar, a_ms, a_sar)?)?)
    }
}

/// Coarse-to-fine decoder. The coarsest output is the coarsest input; each
/// finer level upsamples the previous output, concatenates the same-level
/// skip map and applies a conv block.
#[derive(Debug, Clone)]
pub struct Decoder {
    stages: Vec<(UpConv2x2, ConvBlock)>,
}

impl Decoder {
    pub fn new(channels: &[usize], groups: usize, vs: Scope) -> Result<Self> {
        let mut stages = Vec::new();
        for l in 0..channels.len().saturating_sub(1) {
            let vs = vs.pp(format!("level{}", l + 1));
            stages.push((
                UpConv2x2::new(channels[l + 1], channels[l], vs.pp("up"))?,
                ConvBlock::new(2 * channels[l], channels[l], groups, vs.pp("block"))?,
            ));
        }
        Ok(Self { stages })
    }

    /// Fine-to-coarse inputs in, fine-to-coarse outputs out.
    pub fn forward(&self, fused: &[Tensor]) -> Result<Vec<Tensor>> {
        if fused.len() != self.stages.len() + 1 {
            return Err(Error::Dimension(format!(
                "decoder built for {} levels, got {}",
                self.stages.len() + 1,
                fused.len()
            )));
        }
        let mut out = vec![fused[fused.len() - 1].clone()];
        for l in (0..self.stages.len()).rev() {
            let (up, block) = &self.stages[l];
            let prev = up.forward(&out[0])?;
            if prev.dims() != fused[l].dims() {
                return Err(Error::Dimension(format!(
                    "level {}: upsampled {:?} vs skip {:?}",
                    l + 1,
                    prev.dims(),
                    fused[l].dims()
                )));
            }
            let d = block.forward(&Tensor::cat(&[prev, fused[l].clone()], 1)?)?;
            out.insert(0, d);
        }
        Ok(out)
    }
}
