//! Plain-data domain types shared across the crate.

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Paired multispectral and radar time series for one patch.
///
/// Tensors are `[T, C, H, W]`. Dates are days since the start of the series
/// and must be strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSeries {
    pub patch_id: String,
    pub multispec: Array4<f32>,
    pub radar: Array4<f32>,
    pub dates: Vec<i64>,
    /// Radar acquisition dates; equal to `dates` once aligned.
    pub radar_dates: Vec<i64>,
}

impl AcquisitionSeries {
    pub fn len(&self) -> usize {
        self.multispec.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.multispec.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.multispec.shape()[3]
    }

    pub fn is_aligned(&self) -> bool {
        self.radar_dates == self.dates && self.radar.shape()[0] == self.multispec.shape()[0]
    }

    /// Checks the aligned-series invariants plus divisibility by `divisor`.
    pub fn validate(&self, divisor: usize) -> Result<()> {
        let ms = self.multispec.shape();
        let sar = self.radar.shape();
        if ms[0] == 0 {
            return Err(Error::Dimension(format!("series {} has no frames", self.patch_id)));
        }
        if self.dates.len() != ms[0] {
            return Err(Error::Dimension(format!(
                "series {}: {} dates for {} multispectral frames",
                self.patch_id,
                self.dates.len(),
                ms[0]
            )));
        }
        if self.radar_dates.len() != sar[0] {
            return Err(Error::Dimension(format!(
                "series {}: {} radar dates for {} radar frames",
                self.patch_id,
                self.radar_dates.len(),
                sar[0]
            )));
        }
        if ms[2] != sar[2] || ms[3] != sar[3] {
            return Err(Error::Dimension(format!(
                "series {}: multispectral {}x{} vs radar {}x{}",
                self.patch_id, ms[2], ms[3], sar[2], sar[3]
            )));
        }
        if !ms[2].is_multiple_of(divisor) || !ms[3].is_multiple_of(divisor) {
            return Err(Error::Dimension(format!(
                "series {}: {}x{} not divisible by {divisor}",
                self.patch_id, ms[2], ms[3]
            )));
        }
        for d in [&self.dates, &self.radar_dates] {
            if d.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Dimension(format!(
                    "series {}: dates not strictly increasing",
                    self.patch_id
                )));
            }
        }
        Ok(())
    }

    /// The frame pair at `index`; radar is included only for aligned series.
    pub fn frame(&self, index: usize) -> FramePair {
        let radar_frame = if self.is_aligned() {
            Some(self.radar.index_axis(Axis(0), index).to_owned())
        } else {
            None
        };
        FramePair {
            multispec_frame: self.multispec.index_axis(Axis(0), index).to_owned(),
            radar_frame,
            date: self.dates[index],
            source_index: index,
        }
    }
}

/// One acquisition taken from a series: the single-frame input.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub multispec_frame: Array3<f32>,
    pub radar_frame: Option<Array3<f32>>,
    pub date: i64,
    pub source_index: usize,
}

impl FramePair {
    /// A one-frame series holding this pair, for running a time-series model on it.
    pub fn as_series(&self, patch_id: &str) -> Option<AcquisitionSeries> {
        let radar = self.radar_frame.as_ref()?;
        Some(AcquisitionSeries {
            patch_id: patch_id.to_string(),
            multispec: self.multispec_frame.clone().insert_axis(Axis(0)),
            radar: radar.clone().insert_axis(Axis(0)),
            dates: vec![self.date],
            radar_dates: vec![self.date],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParcelRecord {
    pub parcel_id: u32,
    pub class_id: u32,
    /// `(row, col)` pixel coordinates.
    pub center: (usize, usize),
    pub box_height: f64,
    pub box_width: f64,
    pub mask: Array2<bool>,
}

/// Tight bounding box of a mask as `(row0, col0, row1, col1)`, inclusive.
pub fn mask_bbox(mask: &Array2<bool>) -> Option<(usize, usize, usize, usize)> {
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for ((r, c), &v) in mask.indexed_iter() {
        if v {
            bbox = Some(match bbox {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
    }
    bbox
}

impl ParcelRecord {
    /// Builds a record from its mask: box dims are the tight bounding box and the
    /// center is the box center, rounded down.
    pub fn from_mask(parcel_id: u32, class_id: u32, mask: Array2<bool>) -> Option<Self> {
        let (r0, c0, r1, c1) = mask_bbox(&mask)?;
        let h = r1 - r0 + 1;
        let w = c1 - c0 + 1;
        Some(Self {
            parcel_id,
            class_id,
            center: (r0 + (h - 1) / 2, c0 + (w - 1) / 2),
            box_height: h as f64,
            box_width: w as f64,
            mask,
        })
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }
}

/// Ground truth for one patch. Semantic labels: 0 background, `1..=K` crops,
/// `K + 1` void. Instance id 0 means "no parcel".
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticTarget {
    pub semantic: Array2<u32>,
    pub instance: Array2<u32>,
    pub parcels: Vec<ParcelRecord>,
}

impl PanopticTarget {
    /// Rebuilds parcel records from the two maps. Parcel class is read from the
    /// semantic map at the parcel's pixels.
    pub fn from_maps(semantic: Array2<u32>, instance: Array2<u32>) -> Result<Self> {
        if semantic.dim() != instance.dim() {
            return Err(Error::Dimension("semantic and instance maps differ in shape".into()));
        }
        let mut ids: Vec<u32> = instance.iter().copied().filter(|&i| i != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut parcels = Vec::with_capacity(ids.len());
        for id in ids {
            let mask = instance.mapv(|v| v == id);
            let class_id = semantic
                .iter()
                .zip(mask.iter())
                .find(|(_, &m)| m)
                .map(|(&s, _)| s)
                .unwrap_or(0);
            parcels.push(ParcelRecord::from_mask(id, class_id, mask).expect("nonempty mask"));
        }
        let t = Self {
            semantic,
            instance,
            parcels,
        };
        Ok(t)
    }

    pub fn height(&self) -> usize {
        self.semantic.nrows()
    }

    pub fn width(&self) -> usize {
        self.semantic.ncols()
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let (h, w) = self.semantic.dim();
        if self.instance.dim() != (h, w) {
            return Err(Error::Dimension("semantic and instance maps differ in shape".into()));
        }
        if let Some(bad) = self.semantic.iter().find(|&&s| s as usize > n_classes + 1) {
            return Err(Error::Target(format!("unknown semantic class {bad}")));
        }
        let mut covered = Array2::<bool>::from_elem((h, w), false);
        for p in &self.parcels {
            if p.mask.dim() != (h, w) {
                return Err(Error::Target(format!("parcel {} mask has wrong shape", p.parcel_id)));
            }
            if p.class_id == 0 || p.class_id as usize > n_classes {
                return Err(Error::Target(format!(
                    "parcel {} has class {} outside [1, {n_classes}]",
                    p.parcel_id, p.class_id
                )));
            }
            let (r0, c0, r1, c1) = mask_bbox(&p.mask)
                .ok_or_else(|| Error::Target(format!("parcel {} has an empty mask", p.parcel_id)))?;
            if (p.box_height - (r1 - r0 + 1) as f64).abs() > 1e-9
                || (p.box_width - (c1 - c0 + 1) as f64).abs() > 1e-9
            {
                return Err(Error::Target(format!("parcel {} box dims disagree with mask", p.parcel_id)));
            }
            let (cr, cc) = p.center;
            if cr < r0 || cr > r1 || cc < c0 || cc > c1 {
                return Err(Error::Target(format!("parcel {} center outside its box", p.parcel_id)));
            }
            for ((idx, &m), (&inst, &sem)) in p
                .mask
                .indexed_iter()
                .zip(self.instance.iter().zip(self.semantic.iter()))
            {
                if !m {
                    continue;
                }
                if covered[idx] {
                    return Err(Error::Target(format!("parcel {} overlaps another parcel", p.parcel_id)));
                }
                covered[idx] = true;
                if inst != p.parcel_id || sem != p.class_id {
                    return Err(Error::Target(format!(
                        "maps disagree with parcel {} at {:?}",
                        p.parcel_id, idx
                    )));
                }
            }
        }
        for (idx, &inst) in self.instance.indexed_iter() {
            if (inst != 0) != covered[idx] {
                return Err(Error::Target(format!("instance map has unowned id {inst} at {idx:?}")));
            }
        }
        Ok(())
    }
}

/// Per-step loss values. `combined = student_total + lambda1 * teacher_total + lambda2 * distil`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub center: f64,
    pub class_avg: f64,
    pub size_avg: f64,
    pub shape_avg: f64,
    pub total: f64,
    pub student_total: f64,
    pub teacher_total: f64,
    pub distil: f64,
    pub combined: f64,
}

impl LossBreakdown {
    pub fn recombine(&self, lambda1: f64, lambda2: f64) -> f64 {
        self.student_total + lambda1 * self.teacher_total + lambda2 * self.distil
    }
}
