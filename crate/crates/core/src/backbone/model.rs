use candle_core::{DType, Device, Module, Tensor};

use crate::config::{pyramid_shapes, LevelShape, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, Conv2d, Scope};
use crate::types::{AcquisitionSeries, FramePair};

use super::attention::{gate_groups, modality_attention_summary, temporal_collapse, AttentionStack, Ltae};
use super::decoder::{CrossModalityFusion, Decoder};
use super::encoder::SpatialEncoder;

/// One map per level, finest first, each `[B, C_l, H_l, W_l]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn shapes(&self) -> Result<Vec<LevelShape>> {
        self.levels
            .iter()
            .map(|t| {
                let (_, c, h, w) = t.dims4()?;
                Ok(LevelShape {
                    channels: c,
                    height: h,
                    width: w,
                })
            })
            .collect()
    }

    pub fn finest(&self) -> &Tensor {
        &self.levels[0]
    }

    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(Tensor::detach).collect(),
        }
    }
}

fn array_tensor(data: &[f32], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, shape, device)?.to_dtype(dtype)?)
}

/// A batch of aligned series padded to the longest one.
#[derive(Debug, Clone)]
pub struct SeriesBatch {
    /// `[B, T, C_ms, H, W]`
    pub multispec: Tensor,
    /// `[B, T, C_sar, H, W]`
    pub radar: Tensor,
    /// Acquisition days `[B, T]`.
    pub dates: Tensor,
    /// 1 for real steps, 0 for padding, `[B, T]`.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl SeriesBatch {
    pub fn new(series: &[&AcquisitionSeries], dtype: DType, device: &Device) -> Result<Self> {
        let first = series
            .first()
            .ok_or_else(|| Error::Dimension("empty batch".into()))?;
        let (_, c_ms, h, w) = first.multispec.dim();
        let c_sar = first.radar.shape()[1];
        let t_max = series.iter().map(|s| s.len()).max().unwrap_or(0);
        let b = series.len();
        let frame_ms = c_ms * h * w;
        let frame_sar = c_sar * h * w;
        let mut ms = vec![0f32; b * t_max * frame_ms];
        let mut sar = vec![0f32; b * t_max * frame_sar];
        let mut dates = vec![0f64; b * t_max];
        let mut mask = vec![0f64; b * t_max];
        let mut lengths = Vec::with_capacity(b);
        for (i, s) in series.iter().enumerate() {
            if !s.is_aligned() {
                return Err(Error::Alignment(format!(
                    "series {} must be aligned before batching",
                    s.patch_id
                )));
            }
            if s.multispec.shape() != [s.len(), c_ms, h, w] || s.radar.shape() != [s.len(), c_sar, h, w] {
                return Err(Error::Dimension(format!(
                    "series {} does not match the batch shape",
                    s.patch_id
                )));
            }
            let t = s.len();
            let ms_src = s.multispec.as_standard_layout();
            let sar_src = s.radar.as_standard_layout();
            let base = i * t_max;
            ms[base * frame_ms..(base + t) * frame_ms].copy_from_slice(ms_src.as_slice().expect("standard layout"));
            sar[base * frame_sar..(base + t) * frame_sar].copy_from_slice(sar_src.as_slice().expect("standard layout"));
            for j in 0..t_max {
                dates[base + j] = s.dates[j.min(t - 1)] as f64;
                mask[base + j] = if j < t { 1.0 } else { 0.0 };
            }
            lengths.push(t);
        }
        Ok(Self {
            multispec: array_tensor(&ms, &[b, t_max, c_ms, h, w], dtype, device)?,
            radar: array_tensor(&sar, &[b, t_max, c_sar, h, w], dtype, device)?,
            dates: Tensor::from_vec(dates, (b, t_max), device)?.to_dtype(dtype)?,
            mask: Tensor::from_vec(mask, (b, t_max), device)?.to_dtype(dtype)?,
            lengths,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

/// A batch of single multispectral frames.
#[derive(Debug, Clone)]
pub struct FrameBatch {
    /// `[B, C_ms, H, W]`
    pub multispec: Tensor,
    /// `[B, 1]`
    pub dates: Tensor,
}

impl FrameBatch {
    pub fn new(frames: &[&FramePair], dtype: DType, device: &Device) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Dimension("empty batch".into()))?;
        let (c, h, w) = first.multispec_frame.dim();
        let mut data = Vec::with_capacity(frames.len() * c * h * w);
        let mut dates = Vec::with_capacity(frames.len());
        for f in frames {
            if f.multispec_frame.dim() != (c, h, w) {
                return Err(Error::Dimension("frames in a batch must share a shape".into()));
            }
            data.extend(f.multispec_frame.iter().copied());
            dates.push(f.date as f64);
        }
        Ok(Self {
            multispec: array_tensor(&data, &[frames.len(), c, h, w], dtype, device)?,
            dates: Tensor::from_vec(dates, (frames.len(), 1), device)?.to_dtype(dtype)?,
        })
    }
}

/// Everything the teacher computes on the way to its decoder pyramid.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    pub decoded: FeaturePyramid,
    pub fused: FeaturePyramid,
    pub attention_ms: AttentionStack,
    pub attention_sar: AttentionStack,
}

fn mixers(channels: &[usize], vs: Scope) -> Result<Vec<Conv2d>> {
    channels
        .iter()
        .enumerate()
        .map(|(l, &c)| Ok(Conv2d::conv1x1(c, c, vs.pp(format!("level{}", l + 1)))?))
        .collect()
}

fn check_input(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<LevelShape>> {
    pyramid_shapes(cfg, h, w)
}

/// Multispectral plus radar time-series backbone with cross-modality fusion.
#[derive(Debug, Clone)]
pub struct Teacher {
    cfg: ModelConfig,
    encoder_ms: SpatialEncoder,
    encoder_sar: SpatialEncoder,
    ltae_ms: Ltae,
    ltae_sar: Ltae,
    mix_ms: Vec<Conv2d>,
    mix_sar: Vec<Conv2d>,
    fusion: Vec<CrossModalityFusion>,
    decoder: Decoder,
}

impl Teacher {
    pub fn new(cfg: &ModelConfig, vs: Scope) -> Result<Self> {
        cfg.validate()?;
        let c = &cfg.channels;
        let top = c[c.len() - 1];
        Ok(Self {
            cfg: cfg.clone(),
            encoder_ms: SpatialEncoder::new(cfg.multispec_channels, c, cfg.n_heads, vs.pp("encoder_ms"))?,
            encoder_sar: SpatialEncoder::new(cfg.radar_channels, c, cfg.n_heads, vs.pp("encoder_sar"))?,
            ltae_ms: Ltae::new(top, cfg.n_heads, cfg.key_dim, cfg.date_encoding_dim, vs.pp("ltae_ms"))?,
            ltae_sar: Ltae::new(top, cfg.n_heads, cfg.key_dim, cfg.date_encoding_dim, vs.pp("ltae_sar"))?,
            mix_ms: mixers(c, vs.pp("mix_ms"))?,
            mix_sar: mixers(c, vs.pp("mix_sar"))?,
            fusion: c
                .iter()
                .enumerate()
                .map(|(l, &ch)| CrossModalityFusion::new(ch, vs.pp(format!("fusion.level{}", l + 1))))
                .collect::<Result<_>>()?,
            decoder: Decoder::new(c, cfg.n_heads, vs.pp("decoder"))?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder_ms(&self) -> &SpatialEncoder {
        &self.encoder_ms
    }

    pub fn ltae_ms(&self) -> &Ltae {
        &self.ltae_ms
    }

    pub fn forward(&self, batch: &SeriesBatch) -> Result<TeacherOutput> {
        let (_, _, _, h, w) = batch.multispec.dims5()?;
        check_input(&self.cfg, h, w)?;
        let e_ms = self.encoder_ms.forward_temporal(&batch.multispec)?;
        let e_sar = self.encoder_sar.forward_temporal(&batch.radar)?;
        let top = self.cfg.n_levels - 1;
        let att_ms = self.ltae_ms.attention(&e_ms[top], &batch.dates, &batch.mask)?;
        let att_sar = self.ltae_sar.attention(&e_sar[top], &batch.dates, &batch.mask)?;
        let mut fused = Vec::with_capacity(self.cfg.n_levels);
        for l in 0..self.cfg.n_levels {
            let (_, _, _, hl, wl) = e_ms[l].dims5()?;
            let a_ms = att_ms.interpolate(hl, wl)?;
            let a_sar = att_sar.interpolate(hl, wl)?;
            let h_ms = self.mix_ms[l].forward(&temporal_collapse(&e_ms[l], &a_ms.per_head)?)?;
            let h_sar = self.mix_sar[l].forward(&temporal_collapse(&e_sar[l], &a_sar.per_head)?)?;
            let s_ms = modality_attention_summary(&a_ms, self.cfg.summary_mode)?;
            let s_sar = modality_attention_summary(&a_sar, self.cfg.summary_mode)?;
            fused.push(self.fusion[l].forward(&h_ms, &h_sar, &s_ms, &s_sar)?);
        }
        let decoded = self.decoder.forward(&fused)?;
        Ok(TeacherOutput {
            decoded: FeaturePyramid { levels: decoded },
            fused: FeaturePyramid { levels: fused },
            attention_ms: att_ms,
            attention_sar: att_sar,
        })
    }
}

/// Single-frame multispectral backbone with gate-scaled channel groups.
#[derive(Debug, Clone)]
pub struct Student {
    cfg: ModelConfig,
    encoder: SpatialEncoder,
    ltae: Ltae,
    mix: Vec<Conv2d>,
    decoder: Decoder,
}

impl Student {
    pub fn new(cfg: &ModelConfig, vs: Scope) -> Result<Self> {
        cfg.validate()?;
        let c = &cfg.channels;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: SpatialEncoder::new(cfg.multispec_channels, c, cfg.n_heads, vs.pp("encoder"))?,
            ltae: Ltae::new(c[c.len() - 1], cfg.n_heads, cfg.key_dim, cfg.date_encoding_dim, vs.pp("ltae"))?,
            mix: mixers(c, vs.pp("mix"))?,
            decoder: Decoder::new(c, cfg.n_heads, vs.pp("decoder"))?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Gates `[B, G, H_L, W_L]` from the coarsest encoder level.
    pub fn gates(&self, batch: &FrameBatch) -> Result<Tensor> {
        let e = self.encoder.forward(&batch.multispec)?;
        self.ltae.gates(&e[e.len() - 1], &batch.dates, self.cfg.singleton_gate)
    }

    pub fn forward(&self, batch: &FrameBatch) -> Result<FeaturePyramid> {
        let (_, _, h, w) = batch.multispec.dims4()?;
        check_input(&self.cfg, h, w)?;
        let e = self.encoder.forward(&batch.multispec)?;
        let gates = self.ltae.gates(&e[e.len() - 1], &batch.dates, self.cfg.singleton_gate)?;
        let mut collapsed = Vec::with_capacity(e.len());
        for (l, el) in e.iter().enumerate() {
            let (_, _, hl, wl) = el.dims4()?;
            let g = bilinear_resize(&gates, hl, wl)?;
            collapsed.push(self.mix[l].forward(&gate_groups(el, &g)?)?);
        }
        Ok(FeaturePyramid {
            levels: self.decoder.forward(&collapsed)?,
        })
    }
}
