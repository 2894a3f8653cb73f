//! Training objectives.
//!
//! Each loss exists twice: a plain `f64` reference on ndarray values, and a
//! batched tensor form used for training. Tests hold the two together.

use candle_core::{DType, Device, Tensor};
use candle_nn::ops::log_softmax;
use ndarray::{Array2, Array3};

use crate::backbone::FeaturePyramid;
use crate::config::DistillNorm;
use crate::data::CenternessTarget;
use crate::error::{Error, Result};
use crate::head::{BoxWindow, DenseOutputs, PanopticHead, Site};
use crate::types::{LossBreakdown, PanopticTarget};

/// Probability clamp used inside every logarithm.
pub const EPS: f64 = 1e-7;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Centerness loss: `-(1/|P|) * sum` of `log m` at centers and
/// `(1 - target)^beta * log(1 - m)` elsewhere.
pub fn center_loss(m: &Array2<f64>, target: &Array2<f64>, beta: f64, n_parcels: usize) -> Result<f64> {
    if n_parcels == 0 {
        return Err(Error::Loss(
            "center loss is undefined without parcels; skip empty patches".into(),
        ));
    }
    if m.dim() != target.dim() {
        return Err(Error::Loss(format!(
            "heatmap {:?} and target {:?} differ in shape",
            m.dim(),
            target.dim()
        )));
    }
    let mut acc = 0.0;
    for (&p, &t) in m.iter().zip(target.iter()) {
        let p = clamp_prob(p);
        acc += if t == 1.0 {
            p.ln()
        } else {
            (1.0 - t).powf(beta) * (1.0 - p).ln()
        };
    }
    Ok(-acc / n_parcels as f64)
}

/// `-log p[true_class]` with class ids starting at 1.
pub fn class_loss(class_probs: &[f64], true_class: u32) -> Result<f64> {
    if true_class == 0 || true_class as usize > class_probs.len() {
        return Err(Error::Loss(format!(
            "class id {true_class} outside [1, {}]",
            class_probs.len()
        )));
    }
    Ok(-class_probs[true_class as usize - 1].max(EPS).ln())
}

/// Relative L1 error of the box dimensions.
pub fn size_loss(h_pred: f64, h_true: f64, w_pred: f64, w_true: f64) -> Result<f64> {
    if !(h_true > 0.0 && w_true > 0.0) {
        return Err(Error::Loss(format!("ground-truth box {h_true}x{w_true} is not positive")));
    }
    Ok((h_pred - h_true).abs() / h_true + (w_pred - w_true).abs() / w_true)
}

/// Mean binary cross-entropy.
pub fn binary_cross_entropy(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Shape loss: the ground-truth mask cropped with the predicted box,
/// resampled to the patch size, against the predicted patch.
pub fn shape_loss(
    patch: &Array2<f64>,
    gt_mask: &Array2<bool>,
    center: (usize, usize),
    box_height: f64,
    box_width: f64,
) -> Result<f64> {
    let (h, w) = gt_mask.dim();
    let s = patch.nrows();
    if patch.ncols() != s {
        return Err(Error::Loss(format!("shape patch {:?} is not square", patch.dim())));
    }
    let win = BoxWindow::around(center, box_height, box_width, h, w).map_err(|e| Error::Loss(e.to_string()))?;
    Ok(binary_cross_entropy(patch, &win.crop_nearest(gt_mask, s)))
}

/// `L* = L_student + lambda1 * L_teacher + lambda2 * L_distil`.
pub fn combined_loss(student: f64, teacher: f64, distil: f64, lambda1: f64, lambda2: f64) -> f64 {
    student + lambda1 * teacher + lambda2 * distil
}

/// Feature matching between student and teacher pyramids. The teacher side
/// is detached, so no gradient reaches the teacher through this term.
pub fn distillation_feature_loss(student: &FeaturePyramid, teacher: &FeaturePyramid, norm: DistillNorm) -> Result<Tensor> {
    if student.levels.len() != teacher.levels.len() {
        return Err(Error::Loss(format!(
            "pyramids have {} and {} levels",
            student.levels.len(),
            teacher.levels.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (l, (s, t)) in student.levels.iter().zip(&teacher.levels).enumerate() {
        if s.dims() != t.dims() {
            return Err(Error::Loss(format!(
                "level {}: student {:?} vs teacher {:?}",
                l + 1,
                s.dims(),
                t.dims()
            )));
        }
        let sq = (s - t.detach())?.sqr()?;
        let term = match norm {
            DistillNorm::Mean => sq.mean_all()?,
            DistillNorm::Sum => (sq.sum_all()? / s.dims()[0] as f64)?,
        };
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Loss("empty pyramids".into()))
}

/// Ground truth for one batch in tensor form.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    /// 1 at parcel centers, `[B, 1, H, W]`.
    positive: Tensor,
    /// `(1 - target)^beta` away from centers, `[B, 1, H, W]`.
    negative_weight: Tensor,
    counts: Vec<usize>,
    sites: Vec<Site>,
    classes: Vec<u32>,
    boxes: Vec<(f64, f64)>,
    masks: Vec<Array2<bool>>,
}

impl BatchTargets {
    pub fn new(
        targets: &[&PanopticTarget],
        centerness: &[&CenternessTarget],
        beta: f64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if targets.len() != centerness.len() || targets.is_empty() {
            return Err(Error::Loss("targets and centerness maps must pair up".into()));
        }
        let (h, w) = targets[0].semantic.dim();
        let b = targets.len();
        let mut pos = Array3::<f64>::zeros((b, h, w));
        let mut neg = Array3::<f64>::zeros((b, h, w));
        let mut out = Self {
            positive: Tensor::zeros(1, dtype, device)?,
            negative_weight: Tensor::zeros(1, dtype, device)?,
            counts: Vec::with_capacity(b),
            sites: Vec::new(),
            classes: Vec::new(),
            boxes: Vec::new(),
            masks: Vec::new(),
        };
        for (i, (t, c)) in targets.iter().zip(centerness).enumerate() {
            if t.semantic.dim() != (h, w) || c.map.dim() != (h, w) {
                return Err(Error::Loss("all patches in a batch must share a size".into()));
            }
            for ((r, col), &v) in c.map.indexed_iter() {
                if v == 1.0 {
                    pos[[i, r, col]] = 1.0;
                } else {
                    neg[[i, r, col]] = (1.0 - v).powf(beta);
                }
            }
            out.counts.push(t.parcels.len());
            for p in &t.parcels {
                out.sites.push(Site { batch: i, center: p.center });
                out.classes.push(p.class_id);
                out.boxes.push((p.box_height, p.box_width));
                out.masks.push(p.mask.clone());
            }
        }
        out.positive = Tensor::from_vec(pos.into_raw_vec_and_offset().0, (b, 1, h, w), device)?.to_dtype(dtype)?;
        out.negative_weight = Tensor::from_vec(neg.into_raw_vec_and_offset().0, (b, 1, h, w), device)?.to_dtype(dtype)?;
        Ok(out)
    }

    pub fn parcel_count(&self) -> usize {
        self.sites.len()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }
}

/// PAPS loss of one batch. Each part is a scalar averaged over the patches
/// that have parcels, and `total` is their sum.
#[derive(Debug, Clone)]
pub struct PapsLoss {
    pub total: Tensor,
    pub center: Tensor,
    pub class: Tensor,
    pub size: Tensor,
    pub shape: Tensor,
}

fn value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl PapsLoss {
    pub fn total_value(&self) -> Result<f64> {
        value(&self.total)
    }

    /// Component values with `total` filled in; the distillation fields are left at 0.
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            center: value(&self.center)?,
            class_avg: value(&self.class)?,
            size_avg: value(&self.size)?,
            shape_avg: value(&self.shape)?,
            total: value(&self.total)?,
            ..Default::default()
        })
    }
}

/// `L = L_center + mean over parcels of (L_class + L_size + L_shape)`, with
/// per-parcel terms read at ground-truth centers. Patches without parcels are
/// left out of the batch average; `None` when every patch is empty.
pub fn paps_total_loss(head: &PanopticHead, dense: &DenseOutputs, targets: &BatchTargets) -> Result<Option<PapsLoss>> {
    let b = dense.heatmap.dims4()?.0;
    if targets.counts.len() != b {
        return Err(Error::Loss(format!("{} targets for a batch of {b}", targets.counts.len())));
    }
    let kept: Vec<usize> = (0..b).filter(|&i| targets.counts[i] > 0).collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let dtype = dense.heatmap.dtype();
    let device = dense.heatmap.device().clone();

    let m = dense.heatmap.clamp(EPS, 1.0 - EPS)?;
    let pos = (targets.positive.clone() * m.log()?)?;
    let neg = (targets.negative_weight.clone() * m.affine(-1.0, 1.0)?.log()?)?;
    // [B]
    let center_sum = (pos + neg)?.sum((1, 2, 3))?.neg()?;

    let parcels = head.read_at_centers(dense, &targets.sites)?;
    let p = targets.sites.len();
    let k = head.n_classes();
    let s = head.patch_size();

    let mut onehot = vec![0f64; p * k];
    for (i, &c) in targets.classes.iter().enumerate() {
        if c == 0 || c as usize > k {
            return Err(Error::Loss(format!("class id {c} outside [1, {k}]")));
        }
        onehot[i * k + c as usize - 1] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (p, k), &device)?.to_dtype(dtype)?;
    let logp = log_softmax(&parcels.class_logits, 1)?.maximum(EPS.ln())?;
    let class_terms = (logp * onehot)?.sum(1)?.neg()?;

    let gt_boxes: Vec<f64> = targets.boxes.iter().flat_map(|&(bh, bw)| [bh, bw]).collect();
    let gt_boxes = Tensor::from_vec(gt_boxes, (p, 2), &device)?.to_dtype(dtype)?;
    let size_terms = (parcels.size.clone() - &gt_boxes)?.abs()?.div(&gt_boxes)?.sum(1)?;

    let mut crops = Vec::with_capacity(p * s * s);
    for (win, mask) in parcels.windows.iter().zip(&targets.masks) {
        crops.extend(win.crop_nearest(mask, s).iter().copied());
    }
    let crops = Tensor::from_vec(crops, (p, s, s), &device)?.to_dtype(dtype)?;
    let q = parcels.shape.clamp(EPS, 1.0 - EPS)?;
    let bce = ((crops.clone() * q.log()?)? + (crops.affine(-1.0, 1.0)? * q.affine(-1.0, 1.0)?.log()?)?)?;
    let shape_terms = bce.mean((1, 2))?.neg()?;

    // average parcel terms within each kept patch, then over kept patches
    let mut offsets = Vec::with_capacity(b);
    let mut acc = 0;
    for &c in &targets.counts {
        offsets.push(acc);
        acc += c;
    }
    let per_patch = |terms: &Tensor| -> Result<Tensor> {
        let parts: Vec<Tensor> = kept
            .iter()
            .map(|&i| terms.narrow(0, offsets[i], targets.counts[i])?.mean_keepdim(0))
            .collect::<candle_core::Result<_>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    let kept_idx = Tensor::from_vec(kept.iter().map(|&i| i as u32).collect::<Vec<_>>(), kept.len(), &device)?;
    let counts = Tensor::from_vec(
        kept.iter().map(|&i| targets.counts[i] as f64).collect::<Vec<_>>(),
        kept.len(),
        &device,
    )?
    .to_dtype(dtype)?;
    let center = center_sum.index_select(&kept_idx, 0)?.div(&counts)?.mean(0)?;
    let class = per_patch(&class_terms)?.mean(0)?;
    let size = per_patch(&size_terms)?.mean(0)?;
    let shape = per_patch(&shape_terms)?.mean(0)?;
    let total = (center.clone() + &class)?.add(&size)?.add(&shape)?;
    Ok(Some(PapsLoss {
        total,
        center,
        class,
        size,
        shape,
    }))
}
