//! Panoptic classifier shared by teacher and student.
//!
//! Dense maps come from the finest decoder level: a centerness heatmap,
//! positive box sizes, class logits and shape features. Per-parcel outputs
//! are read at center pixels; the shape patch is decoded from the shape
//! features cropped at the predicted box.

use candle_core::{DType, Module, Tensor};
use candle_nn::ops::softmax;
use ndarray::{Array2, Array3};

use crate::config::{DetectionThresholds, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{bilinear_matrix_at, sigmoid, Conv2d, ConvBlock, Init, Scope};

/// Dense head outputs for a batch, all at input resolution.
#[derive(Debug, Clone)]
pub struct DenseOutputs {
    /// `[B, 1, H, W]` in `(0, 1)`.
    pub heatmap: Tensor,
    /// `[B, 2, H, W]` box height and width in pixels, positive.
    pub size: Tensor,
    /// `[B, K, H, W]`
    pub class_logits: Tensor,
    /// `[B, F, H, W]`
    pub shape_features: Tensor,
}

impl DenseOutputs {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.heatmap.dims4()?.0)
    }

    pub fn spatial(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.heatmap.dims4()?;
        Ok((h, w))
    }

    /// Heatmap of one batch item as `[H, W]`.
    pub fn heatmap_array(&self, b: usize) -> Result<Array2<f64>> {
        let (h, w) = self.spatial()?;
        let v = self
            .heatmap
            .get(b)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok(Array2::from_shape_vec((h, w), v).expect("heatmap shape"))
    }
}

/// Where to read per-parcel outputs: batch item and center pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub batch: usize,
    pub center: (usize, usize),
}

/// Pixel window of a box, half-open `[r0, r1) x [c0, c1)`, clipped to the
/// image. A box of rounded size `n` around center row `c` starts at
/// `c - (n - 1) / 2`, matching how parcel centers are placed in their tight
/// bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxWindow {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl BoxWindow {
    pub fn around(center: (usize, usize), height: f64, width: f64, img_h: usize, img_w: usize) -> Result<Self> {
        if !(height > 0.0 && width > 0.0 && height.is_finite() && width.is_finite()) {
            return Err(Error::Target(format!("degenerate box {height}x{width} at {center:?}")));
        }
        if center.0 >= img_h || center.1 >= img_w {
            return Err(Error::Target(format!("center {center:?} outside a {img_h}x{img_w} image")));
        }
        let span = |c: usize, size: f64, n: usize| {
            let len = size.round().clamp(1.0, 2.0 * n as f64) as i64;
            let lo = c as i64 - (len - 1) / 2;
            (lo.max(0) as usize, ((lo + len).min(n as i64)) as usize)
        };
        let (r0, r1) = span(center.0, height, img_h);
        let (c0, c1) = span(center.1, width, img_w);
        Ok(Self { r0, r1, c0, c1 })
    }

    pub fn height(&self) -> usize {
        self.r1 - self.r0
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0
    }

    /// Nearest-neighbour resample of `mask` inside the window to `s x s`.
    pub fn crop_nearest(&self, mask: &Array2<bool>, s: usize) -> Array2<f64> {
        let rows = nearest_indices(self.r0, self.r1, s);
        let cols = nearest_indices(self.c0, self.c1, s);
        Array2::from_shape_fn((s, s), |(i, j)| if mask[[rows[i], cols[j]]] { 1.0 } else { 0.0 })
    }

    /// Every pixel of the window with the patch cell it maps to; the inverse
    /// of [`BoxWindow::crop_nearest`].
    pub fn paste_cells(&self, s: usize) -> Vec<((usize, usize), (usize, usize))> {
        let cell = |k: usize, n: usize| (((k as f64 + 0.5) * s as f64 / n as f64).floor() as usize).min(s - 1);
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                out.push(((self.r0 + r, self.c0 + c), (cell(r, h), cell(c, w))));
            }
        }
        out
    }
}

fn nearest_indices(lo: usize, hi: usize, s: usize) -> Vec<usize> {
    let n = hi - lo;
    (0..s)
        .map(|i| lo + (((i as f64 + 0.5) * n as f64 / s as f64).floor() as usize).min(n - 1))
        .collect()
}

/// Per-parcel outputs for a list of sites.
#[derive(Debug, Clone)]
pub struct ParcelOutputs {
    /// `[P, K]`
    pub class_logits: Tensor,
    /// `[P, 2]` height, width.
    pub size: Tensor,
    /// `[P, S, S]` in `(0, 1)`.
    pub shape: Tensor,
    /// Crop windows used for the shape patches.
    pub windows: Vec<BoxWindow>,
}

/// One decoded parcel.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub center: (usize, usize),
    pub confidence: f64,
    /// Over the `K` crop classes; class id is index + 1.
    pub class_probs: Vec<f64>,
    pub box_height: f64,
    pub box_width: f64,
    pub shape_patch: Array2<f64>,
}

impl Detection {
    pub fn class_id(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = i;
            }
        }
        best as u32 + 1
    }
}

#[derive(Debug, Clone)]
pub struct PanopticPrediction {
    pub heatmap: Array2<f64>,
    pub detections: Vec<Detection>,
    pub semantic: Array2<u32>,
    pub instance: Array2<u32>,
}

#[derive(Debug, Clone)]
pub struct PanopticHead {
    trunk: ConvBlock,
    heatmap: Conv2d,
    size: Conv2d,
    class: Conv2d,
    shape_features: Conv2d,
    shape_conv: Conv2d,
    shape_out: Conv2d,
    n_classes: usize,
    patch: usize,
    feature_channels: usize,
}

impl PanopticHead {
    pub fn new(cfg: &ModelConfig, vs: Scope) -> Result<Self> {
        cfg.validate()?;
        let hc = cfg.head_channels;
        let fs = cfg.shape_feature_channels;
        // heatmap bias so that the initial sigmoid is ~0.1
        let prior = -(0.9f64 / 0.1).ln();
        Ok(Self {
            trunk: ConvBlock::new(cfg.channels[0], hc, cfg.n_heads, vs.pp("trunk"))?,
            heatmap: Conv2d::with_bias_init(hc, 1, 1, Init::Const(prior), vs.pp("heatmap"))?,
            size: Conv2d::with_bias_init(hc, 2, 1, Init::Const(8f64.ln()), vs.pp("size"))?,
            class: Conv2d::conv1x1(hc, cfg.n_classes, vs.pp("class"))?,
            shape_features: Conv2d::conv1x1(hc, fs, vs.pp("shape_features"))?,
            shape_conv: Conv2d::conv3x3(2 * fs + 2, fs, vs.pp("shape_conv"))?,
            shape_out: Conv2d::conv1x1(fs, 1, vs.pp("shape_out"))?,
            n_classes: cfg.n_classes,
            patch: cfg.shape_patch_size,
            feature_channels: fs,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    /// Dense maps from the finest decoder level `[B, C_1, H, W]`.
    pub fn dense(&self, finest: &Tensor) -> Result<DenseOutputs> {
        let x = self.trunk.forward(finest)?;
        Ok(DenseOutputs {
            heatmap: sigmoid(&self.heatmap.forward(&x)?)?,
            size: self.size.forward(&x)?.clamp(-6.0, 6.0)?.exp()?,
            class_logits: self.class.forward(&x)?,
            shape_features: self.shape_features.forward(&x)?,
        })
    }

    /// Reads class, size and shape at each site. Shape crops use the
    /// predicted box, treated as a constant for the crop geometry.
    pub fn read_at_centers(&self, dense: &DenseOutputs, sites: &[Site]) -> Result<ParcelOutputs> {
        let (b, _, h, w) = dense.heatmap.dims4()?;
        let dtype = dense.heatmap.dtype();
        let device = dense.heatmap.device();
        let s = self.patch;
        let k = self.n_classes;
        let fs = self.feature_channels;
        if sites.is_empty() {
            return Ok(ParcelOutputs {
                class_logits: Tensor::zeros((0, k), dtype, device)?,
                size: Tensor::zeros((0, 2), dtype, device)?,
                shape: Tensor::zeros((0, s, s), dtype, device)?,
                windows: Vec::new(),
            });
        }
        let mut flat_idx = Vec::with_capacity(sites.len());
        let mut batch_idx = Vec::with_capacity(sites.len());
        for site in sites {
            let (r, c) = site.center;
            if site.batch >= b || r >= h || c >= w {
                return Err(Error::Target(format!(
                    "site {:?} outside a batch of {b} {h}x{w} maps",
                    site
                )));
            }
            flat_idx.push(((site.batch * h + r) * w + c) as u32);
            batch_idx.push(site.batch as u32);
        }
        let p = sites.len();
        let flat_idx = Tensor::from_vec(flat_idx, p, device)?;
        let gather = |t: &Tensor| -> Result<Tensor> {
            let ch = t.dims4()?.1;
            Ok(t
                .permute((0, 2, 3, 1))?
                .contiguous()?
                .reshape((b * h * w, ch))?
                .index_select(&flat_idx, 0)?)
        };
        let class_logits = gather(&dense.class_logits)?;
        let size = gather(&dense.size)?;
        let center_feat = gather(&dense.shape_features)?;

        let sizes = size.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let mut windows = Vec::with_capacity(p);
        let mut ry = Vec::with_capacity(p * s * h);
        let mut rx = Vec::with_capacity(p * w * s);
        for (site, hw) in sites.iter().zip(&sizes) {
            let win = BoxWindow::around(site.center, hw[0], hw[1], h, w)?;
            ry.extend(bilinear_matrix_at(win.r0 as f64, win.r1 as f64, s, h));
            // stored transposed: [W, S]
            let mx = bilinear_matrix_at(win.c0 as f64, win.c1 as f64, s, w);
            for col in 0..w {
                for i in 0..s {
                    rx.push(mx[i * w + col]);
                }
            }
            windows.push(win);
        }
        let ry = Tensor::from_vec(ry, (p, 1, s, h), device)?.to_dtype(dtype)?;
        let rx = Tensor::from_vec(rx, (p, 1, w, s), device)?.to_dtype(dtype)?;
        let batch_idx = Tensor::from_vec(batch_idx, p, device)?;
        let feats = dense.shape_features.index_select(&batch_idx, 0)?;
        let crop = ry.broadcast_matmul(&feats)?.broadcast_matmul(&rx)?;
        let rel = crop.broadcast_sub(&center_feat.reshape((p, fs, 1, 1))?)?;
        let coords = coordinate_channels(p, s, dtype, device)?;
        let x = Tensor::cat(&[crop, rel, coords], 1)?;
        let x = self.shape_conv.forward(&x)?.relu()?;
        let shape = sigmoid(&self.shape_out.forward(&x)?)?.reshape((p, s, s))?;
        Ok(ParcelOutputs {
            class_logits,
            size,
            shape,
            windows,
        })
    }

    /// Inference: peaks of the heatmap of batch item `b`, expanded into detections.
    pub fn decode_detections(&self, dense: &DenseOutputs, b: usize, thresholds: &DetectionThresholds) -> Result<Vec<Detection>> {
        let heat = dense.heatmap_array(b)?;
        let peaks = find_peaks(&heat, thresholds.confidence, thresholds.top_k);
        if peaks.is_empty() {
            return Ok(Vec::new());
        }
        let sites: Vec<Site> = peaks.iter().map(|&(center, _)| Site { batch: b, center }).collect();
        let out = self.read_at_centers(dense, &sites)?;
        let probs = softmax(&out.class_logits, 1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let sizes = out.size.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let shapes = out.shape.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let s = self.patch;
        Ok(peaks
            .iter()
            .enumerate()
            .map(|(i, &(center, confidence))| Detection {
                center,
                confidence,
                class_probs: probs[i].clone(),
                box_height: sizes[i][0],
                box_width: sizes[i][1],
                shape_patch: Array2::from_shape_vec((s, s), shapes[i * s * s..(i + 1) * s * s].to_vec())
                    .expect("patch shape"),
            })
            .collect())
    }

    /// Detections and assembled maps for every item of a batch.
    pub fn predict(&self, dense: &DenseOutputs, thresholds: &DetectionThresholds) -> Result<Vec<PanopticPrediction>> {
        let (h, w) = dense.spatial()?;
        (0..dense.batch_size()?)
            .map(|b| {
                let detections = self.decode_detections(dense, b, thresholds)?;
                let (semantic, instance) = assemble_panoptic(&detections, h, w, thresholds.mask);
                Ok(PanopticPrediction {
                    heatmap: dense.heatmap_array(b)?,
                    detections,
                    semantic,
                    instance,
                })
            })
            .collect()
    }
}

/// Normalised `(y, x)` coordinates in `[-1, 1]`, `[P, 2, S, S]`.
fn coordinate_channels(p: usize, s: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut v = Array3::<f64>::zeros((2, s, s));
    let scale = |i: usize| if s > 1 { 2.0 * i as f64 / (s - 1) as f64 - 1.0 } else { 0.0 };
    for i in 0..s {
        for j in 0..s {
            v[[0, i, j]] = scale(i);
            v[[1, i, j]] = scale(j);
        }
    }
    let t = Tensor::from_vec(v.into_raw_vec_and_offset().0, (1, 2, s, s), device)?.to_dtype(dtype)?;
    Ok(t.broadcast_as((p, 2, s, s))?.contiguous()?)
}

/// Strict 3x3 local maxima at or above `threshold`, highest first, at most
/// `top_k`. Equal neighbours are resolved in favour of the row-major first
/// pixel.
pub fn find_peaks(heat: &Array2<f64>, threshold: f64, top_k: usize) -> Vec<((usize, usize), f64)> {
    let (h, w) = heat.dim();
    let mut peaks = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = heat[[r, c]];
            if v < threshold || v <= 0.0 {
                continue;
            }
            let mut is_peak = true;
            'nbr: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let q = heat[[rr as usize, cc as usize]];
                    let earlier = (rr, cc) < (r as isize, c as isize);
                    if q > v || (q == v && earlier) {
                        is_peak = false;
                        break 'nbr;
                    }
                }
            }
            if is_peak {
                peaks.push(((r, c), v));
            }
        }
    }
    // stable sort keeps row-major order among equal confidences
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.truncate(top_k);
    peaks
}

/// Pastes detections in descending confidence; a pixel keeps its first
/// claimant. Instance ids follow paste order, starting at 1.
pub fn assemble_panoptic(detections: &[Detection], h: usize, w: usize, mask_threshold: f64) -> (Array2<u32>, Array2<u32>) {
    let mut semantic = Array2::<u32>::zeros((h, w));
    let mut instance = Array2::<u32>::zeros((h, w));
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence));
    let mut next_id = 1;
    for i in order {
        let d = &detections[i];
        let Ok(win) = BoxWindow::around(d.center, d.box_height, d.box_width, h, w) else {
            continue;
        };
        let s = d.shape_patch.nrows();
        let class_id = d.class_id();
        let mut claimed = false;
        for ((r, c), (i, j)) in win.paste_cells(s) {
            if instance[[r, c]] == 0 && d.shape_patch[[i, j]] >= mask_threshold {
                instance[[r, c]] = next_id;
                semantic[[r, c]] = class_id;
                claimed = true;
            }
        }
        if claimed {
            next_id += 1;
        }
    }
    (semantic, instance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn detection(center: (usize, usize), conf: f64, size: f64, class: usize) -> Detection {
        let mut probs = vec![0.1; 3];
        probs[class] = 0.8;
        Detection {
            center,
            confidence: conf,
            class_probs: probs,
            box_height: size,
            box_width: size,
            shape_patch: Array2::ones((4, 4)),
        }
    }

    #[test]
    fn all_zero_heatmap_has_no_peaks() {
        assert!(find_peaks(&Array2::zeros((8, 8)), 0.0, 10).is_empty());
    }

    #[test]
    fn single_pixel_peak() {
        let mut h = Array2::zeros((8, 8));
        h[[3, 4]] = 0.9;
        let p = find_peaks(&h, 0.5, 10);
        assert_eq!(p, vec![((3, 4), 0.9)]);
    }

    #[test]
    fn plateau_goes_to_row_major_first() {
        let mut h = Array2::zeros((8, 8));
        h[[3, 4]] = 0.7;
        h[[3, 5]] = 0.7;
        h[[4, 4]] = 0.7;
        assert_eq!(find_peaks(&h, 0.5, 10), vec![((3, 4), 0.7)]);
    }

    #[test]
    fn peaks_sorted_and_capped() {
        let mut h = Array2::zeros((9, 9));
        h[[1, 1]] = 0.5;
        h[[4, 4]] = 0.9;
        h[[7, 7]] = 0.7;
        let p = find_peaks(&h, 0.3, 2);
        assert_eq!(p, vec![((4, 4), 0.9), ((7, 7), 0.7)]);
    }

    #[test]
    fn empty_detections_give_background() {
        let (s, i) = assemble_panoptic(&[], 6, 6, 0.5);
        assert!(s.iter().all(|&v| v == 0) && i.iter().all(|&v| v == 0));
    }

    #[test]
    fn four_by_four_box_pastes_sixteen_pixels() {
        let (s, i) = assemble_panoptic(&[detection((5, 5), 0.9, 4.0, 1)], 12, 12, 0.5);
        assert_eq!(i.iter().filter(|&&v| v == 1).count(), 16);
        assert_eq!(s.iter().filter(|&&v| v == 2).count(), 16);
        assert_eq!(i[[4, 4]], 1);
        assert_eq!(i[[7, 7]], 1);
        assert_eq!(i[[3, 3]], 0);
    }

    #[test]
    fn higher_confidence_wins_contested_pixels() {
        let dets = [detection((5, 6), 0.8, 4.0, 2), detection((5, 5), 0.9, 4.0, 0)];
        let (s, i) = assemble_panoptic(&dets, 12, 12, 0.5);
        // ids follow confidence order: the 0.9 detection is instance 1
        assert_eq!(i[[5, 5]], 1);
        assert_eq!(s[[5, 5]], 1);
        assert_eq!(i[[5, 8]], 2);
        assert_eq!(s[[5, 8]], 3);
    }

    #[test]
    fn degenerate_window_is_an_error() {
        assert!(BoxWindow::around((2, 2), 0.0, 3.0, 8, 8).is_err());
        assert!(BoxWindow::around((2, 2), f64::NAN, 3.0, 8, 8).is_err());
    }

    #[test]
    fn windows_match_parcel_boxes() {
        use crate::types::ParcelRecord;
        for (r0, c0, h, w) in [(2, 1, 4, 4), (1, 3, 5, 2), (0, 0, 7, 6), (3, 4, 1, 3)] {
            let mask = Array2::from_shape_fn((12, 12), |(r, c)| r >= r0 && r < r0 + h && c >= c0 && c < c0 + w);
            let p = ParcelRecord::from_mask(1, 1, mask.clone()).unwrap();
            let win = BoxWindow::around(p.center, p.box_height, p.box_width, 12, 12).unwrap();
            assert_eq!((win.r0, win.r1, win.c0, win.c1), (r0, r0 + h, c0, c0 + w));
            assert_eq!(win.crop_nearest(&mask, 4), Array2::<f64>::ones((4, 4)));
        }
    }

    #[test]
    fn paste_inverts_crop() {
        let mask = Array2::from_shape_fn((10, 10), |(r, c)| (r * 7 + c * 3) % 5 < 2);
        for (n, s) in [(4usize, 4usize), (3, 8), (6, 16), (9, 4)] {
            let win = BoxWindow::around((4, 4), n as f64, n as f64, 10, 10).unwrap();
            let patch = win.crop_nearest(&mask, s);
            if n <= s {
                for ((r, c), (i, j)) in win.paste_cells(s) {
                    assert_eq!(patch[[i, j]] == 1.0, mask[[r, c]], "n={n} s={s} at ({r},{c})");
                }
            }
            assert_eq!(win.paste_cells(s).len(), win.height() * win.width());
        }
    }

    #[test]
    fn windows_clip_to_image() {
        let win = BoxWindow::around((0, 9), 6.0, 6.0, 10, 10).unwrap();
        assert_eq!((win.r0, win.r1, win.c0, win.c1), (0, 4, 7, 10));
    }
}
