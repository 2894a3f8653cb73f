use candle_core::{DType, Tensor};

use crate::config::{GateMode, SummaryMode};
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, sigmoid, Init, Scope};

/// Temporal attention at one level.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    /// Softmax weights over time, `[B, G, T, H, W]`; padded steps get 0.
    pub per_head: Tensor,
    /// Scaled scores before masking and softmax, `[B, G, T, H, W]`.
    pub scores: Tensor,
    /// 1 for real acquisitions, 0 for padding, `[B, T]`.
    pub mask: Tensor,
}

impl AttentionStack {
    pub fn heads(&self) -> Result<usize> {
        Ok(self.per_head.dims5()?.1)
    }

    /// Bilinear resize of weights and scores to `(height, width)`.
    pub fn interpolate(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            per_head: bilinear_resize(&self.per_head, height, width)?,
            scores: bilinear_resize(&self.scores, height, width)?,
            mask: self.mask.clone(),
        })
    }
}

/// Sinusoidal encoding of acquisition days, `[B, T] -> [B, T, dim]`.
pub fn date_encoding(dates: &Tensor, dim: usize) -> Result<Tensor> {
    let (b, t) = dates.dims2()?;
    let days = dates.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let mut out = Vec::with_capacity(b * t * dim);
    for d in days {
        for i in 0..dim {
            let freq = 1000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let v = d / freq;
            out.push(if i % 2 == 0 { v.sin() } else { v.cos() });
        }
    }
    Ok(Tensor::from_vec(out, (b, t, dim), dates.device())?.to_dtype(dates.dtype())?)
}

/// Lightweight temporal attention: one learned master query per head, keys
/// projected per pixel and time step from the head's channel group plus a
/// date encoding.
#[derive(Debug, Clone)]
pub struct Ltae {
    query: Tensor,
    key_weight: Tensor,
    key_bias: Tensor,
    heads: usize,
    group_channels: usize,
    key_dim: usize,
    date_dim: usize,
}

impl Ltae {
    pub fn new(channels: usize, heads: usize, key_dim: usize, date_dim: usize, vs: Scope) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{channels} channels cannot be split into {heads} heads")));
        }
        let group_channels = channels / heads;
        let fan_in = group_channels + date_dim;
        Ok(Self {
            query: vs.get((heads, key_dim), "query", Init::Normal { std: (1.0 / key_dim as f64).sqrt() })?,
            key_weight: vs.get((heads, key_dim, fan_in), "key_weight", Init::KaimingNormal { fan_in })?,
            key_bias: vs.get((heads, key_dim), "key_bias", Init::Const(0.0))?,
            heads,
            group_channels,
            key_dim,
            date_dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Scaled dot-product scores `[B, G, T, H, W]` for features
    /// `[B, T, C, H, W]` and dates `[B, T]`.
    pub fn scores(&self, e: &Tensor, dates: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = e.dims5()?;
        let (g, cg, dk) = (self.heads, self.group_channels, self.key_dim);
        if c != g * cg {
            return Err(Error::Dimension(format!("attention expects {} channels, got {c}", g * cg)));
        }
        if dates.dims2()? != (b, t) {
            return Err(Error::Dimension(format!(
                "dates shape {:?} does not match {t} time steps",
                dates.dims()
            )));
        }
        let p = h * w;
        // [G, Cg, B*T*P]
        let groups = e
            .reshape((b * t, g, cg, p))?
            .permute((1, 2, 0, 3))?
            .contiguous()?
            .reshape((g, cg, b * t * p))?;
        let w_feat = self.key_weight.narrow(2, 0, cg)?.contiguous()?;
        let w_date = self.key_weight.narrow(2, cg, self.date_dim)?.contiguous()?;
        let keys_feat = w_feat.matmul(&groups)?.reshape((g, dk, b * t, p))?;
        let pe = date_encoding(dates, self.date_dim)?.reshape((b * t, self.date_dim))?.t()?;
        let keys_date = w_date
            .broadcast_matmul(&pe.unsqueeze(0)?.contiguous()?)?
            .broadcast_add(&self.key_bias.unsqueeze(2)?)?
            .unsqueeze(3)?;
        let keys = keys_feat.broadcast_add(&keys_date)?;
        let scores = keys
            .broadcast_mul(&self.query.reshape((g, dk, 1, 1))?)?
            .sum(1)?
            .affine(1.0 / (dk as f64).sqrt(), 0.0)?;
        Ok(scores.reshape((g, b, t, h, w))?.permute((1, 0, 2, 3, 4))?.contiguous()?)
    }

    /// Softmax attention over the time axis with padded steps excluded.
    pub fn attention(&self, e: &Tensor, dates: &Tensor, mask: &Tensor) -> Result<AttentionStack> {
        let scores = self.scores(e, dates)?;
        let per_head = masked_softmax(&scores, mask)?;
        Ok(AttentionStack {
            per_head,
            scores,
            mask: mask.clone(),
        })
    }

    /// Per-head gates `[B, G, H, W]` for a single frame `[B, C, H, W]`.
    pub fn gates(&self, e: &Tensor, dates: &Tensor, mode: GateMode) -> Result<Tensor> {
        let (b, c, h, w) = e.dims4()?;
        match mode {
            GateMode::Ones => Ok(Tensor::ones((b, self.heads, h, w), e.dtype(), e.device())?),
            GateMode::Sigmoid => {
                let s = self.scores(&e.reshape((b, 1, c, h, w))?, dates)?;
                Ok(sigmoid(&s.squeeze(2)?)?)
            }
        }
    }
}

/// Softmax over axis 2 of `[B, G, T, H, W]`; steps with `mask == 0` get weight 0.
pub fn masked_softmax(scores: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, _, t, _, _) = scores.dims5()?;
    let penalty = mask.affine(1e9, -1e9)?.reshape((b, 1, t, 1, 1))?;
    let s = scores.broadcast_add(&penalty)?;
    let max = s.max_keepdim(2)?.detach();
    let num = s.broadcast_sub(&max)?.exp()?;
    let den = num.sum_keepdim(2)?;
    Ok(num.broadcast_div(&den)?)
}

/// Collapses `[B, T, C, H, W]` with per-head weights `[B, G, T, H, W]`:
/// group `g` of the channels is summed over time with head `g`'s weights.
/// Returns the pre-mixing map `[B, C, H, W]`.
pub fn temporal_collapse(e: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (b, t, c, h, w) = e.dims5()?;
    let (wb, g, wt, wh, ww) = weights.dims5()?;
    if (wb, wt, wh, ww) != (b, t, h, w) || c % g != 0 {
        return Err(Error::Dimension(format!(
            "cannot collapse features {:?} with attention {:?}",
            e.dims(),
            weights.dims()
        )));
    }
    let a = weights.permute((0, 2, 1, 3, 4))?.reshape((b, t, g, 1, h, w))?;
    let out = e.reshape((b, t, g, c / g, h, w))?.broadcast_mul(&a)?.sum(1)?;
    Ok(out.reshape((b, c, h, w))?)
}

/// Scales channel group `g` of `[B, C, H, W]` by gate `[B, G, H, W]`.
pub fn gate_groups(e: &Tensor, gates: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = e.dims4()?;
    let (gb, g, gh, gw) = gates.dims4()?;
    if (gb, gh, gw) != (b, h, w) || c % g != 0 {
        return Err(Error::Dimension(format!(
            "cannot gate features {:?} with {:?}",
            e.dims(),
            gates.dims()
        )));
    }
    let out = e
        .reshape((b, g, c / g, h, w))?
        .broadcast_mul(&gates.unsqueeze(2)?)?;
    Ok(out.reshape((b, c, h, w))?)
}

/// Spatial saliency `[B, H, W]`: the mean over heads and real time steps of
/// either the softmax weights (literal) or the sigmoid of the scores.
pub fn modality_attention_summary(stack: &AttentionStack, mode: SummaryMode) -> Result<Tensor> {
    let (b, g, t, _, _) = stack.per_head.dims5()?;
    let mask = stack.mask.reshape((b, 1, t, 1, 1))?;
    let values = match mode {
        SummaryMode::Literal => stack.per_head.clone(),
        SummaryMode::Presoftmax => sigmoid(&stack.scores)?,
    };
    let total = values.broadcast_mul(&mask)?.sum(2)?.sum(1)?;
    let count = stack.mask.sum_keepdim(1)?.affine(g as f64, 0.0)?.reshape((b, 1, 1))?;
    Ok(total.broadcast_div(&count)?)
}
