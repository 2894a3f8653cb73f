//! Panoptic quality.
//!
//! Segments are keyed by `(class, instance)`. Background (class 0) is one
//! stuff segment per image whatever its instance ids. Ground-truth void
//! pixels (class `K + 1`) are removed from every intersection and union, and
//! an unmatched prediction lying mostly on void is not counted as a false
//! positive. A prediction and a ground-truth segment of the same class match
//! when their IoU exceeds one half, which makes every match unique.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::PanopticPrediction;
use crate::types::PanopticTarget;

/// A semantic map and an instance map of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticMaps {
    pub semantic: Array2<u32>,
    pub instance: Array2<u32>,
}

impl PanopticMaps {
    pub fn new(semantic: Array2<u32>, instance: Array2<u32>) -> Result<Self> {
        if semantic.dim() != instance.dim() {
            return Err(Error::Metric(format!(
                "semantic {:?} and instance {:?} maps differ in shape",
                semantic.dim(),
                instance.dim()
            )));
        }
        Ok(Self { semantic, instance })
    }
}

impl From<&PanopticTarget> for PanopticMaps {
    fn from(t: &PanopticTarget) -> Self {
        Self {
            semantic: t.semantic.clone(),
            instance: t.instance.clone(),
        }
    }
}

impl From<&PanopticPrediction> for PanopticMaps {
    fn from(p: &PanopticPrediction) -> Self {
        Self {
            semantic: p.semantic.clone(),
            instance: p.instance.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentKey {
    pub class_id: u32,
    pub instance: u32,
}

impl SegmentKey {
    fn at(semantic: u32, instance: u32) -> Self {
        Self {
            class_id: semantic,
            instance: if semantic == 0 { 0 } else { instance },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentMatch {
    pub pred: SegmentKey,
    pub gt: SegmentKey,
    pub iou: f64,
}

/// Running counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTally {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl ClassTally {
    pub fn merge(&mut self, other: &ClassTally) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

/// Tallies for classes `0..=K`, index = class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tallies {
    pub classes: Vec<ClassTally>,
}

impl Tallies {
    pub fn new(n_classes: usize) -> Self {
        Self {
            classes: vec![ClassTally::default(); n_classes + 1],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len() - 1
    }

    pub fn merge(&mut self, other: &Tallies) -> Result<()> {
        if other.classes.len() != self.classes.len() {
            return Err(Error::Metric("tallies cover different class sets".into()));
        }
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.merge(b);
        }
        Ok(())
    }
}

/// `TP / (TP + FP/2 + FN/2)`, 0 when all counts are 0.
pub fn recognition_quality(tp: u64, fp: u64, fn_: u64) -> f64 {
    let d = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    if d == 0.0 {
        0.0
    } else {
        tp as f64 / d
    }
}

/// Mean IoU of matched segments, 0 without matches.
pub fn segmentation_quality(iou_sum: f64, tp: u64) -> f64 {
    if tp == 0 {
        0.0
    } else {
        iou_sum / tp as f64
    }
}

pub fn panoptic_quality(sq: f64, rq: f64) -> f64 {
    sq * rq
}

fn check_maps(pred: &PanopticMaps, gt: &PanopticMaps, n_classes: usize) -> Result<()> {
    if pred.semantic.dim() != gt.semantic.dim()
        || pred.instance.dim() != gt.semantic.dim()
        || gt.instance.dim() != gt.semantic.dim()
    {
        return Err(Error::Metric(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.semantic.dim(),
            gt.semantic.dim()
        )));
    }
    let void = n_classes as u32 + 1;
    if let Some(&s) = gt.semantic.iter().find(|&&s| s > void) {
        return Err(Error::Metric(format!("ground-truth class {s} outside [0, {void}]")));
    }
    if let Some(&s) = pred.semantic.iter().find(|&&s| s > n_classes as u32) {
        return Err(Error::Metric(format!("predicted class {s} outside [0, {n_classes}]")));
    }
    Ok(())
}

/// Per-segment pixel statistics from one pass over the image.
struct Histogram {
    joint: HashMap<(SegmentKey, SegmentKey), u64>,
    pred_area: HashMap<SegmentKey, u64>,
    pred_void: HashMap<SegmentKey, u64>,
    gt_area: HashMap<SegmentKey, u64>,
}

fn histogram(pred: &PanopticMaps, gt: &PanopticMaps, void: u32) -> Histogram {
    let mut h = Histogram {
        joint: HashMap::new(),
        pred_area: HashMap::new(),
        pred_void: HashMap::new(),
        gt_area: HashMap::new(),
    };
    let pixels = pred
        .semantic
        .iter()
        .zip(pred.instance.iter())
        .zip(gt.semantic.iter().zip(gt.instance.iter()));
    for ((&ps, &pi), (&gs, &gi)) in pixels {
        let p = SegmentKey::at(ps, pi);
        *h.pred_area.entry(p).or_default() += 1;
        if gs == void {
            *h.pred_void.entry(p).or_default() += 1;
            continue;
        }
        let g = SegmentKey::at(gs, gi);
        *h.gt_area.entry(g).or_default() += 1;
        if p.class_id == g.class_id {
            *h.joint.entry((p, g)).or_default() += 1;
        }
    }
    h
}

/// Matched pairs with IoU > 0.5, sorted by ground-truth key.
pub fn match_segments(pred: &PanopticMaps, gt: &PanopticMaps, n_classes: usize) -> Result<Vec<SegmentMatch>> {
    check_maps(pred, gt, n_classes)?;
    let h = histogram(pred, gt, n_classes as u32 + 1);
    Ok(matches_from(&h))
}

fn matches_from(h: &Histogram) -> Vec<SegmentMatch> {
    let mut out: Vec<SegmentMatch> = h
        .joint
        .iter()
        .filter_map(|(&(p, g), &inter)| {
            let union = h.pred_area[&p] - h.pred_void.get(&p).copied().unwrap_or(0) + h.gt_area[&g] - inter;
            let iou = inter as f64 / union as f64;
            (iou > 0.5).then_some(SegmentMatch { pred: p, gt: g, iou })
        })
        .collect();
    out.sort_by_key(|m| (m.gt, m.pred));
    out
}

/// Tallies of one patch.
pub fn evaluate_patch(pred: &PanopticMaps, gt: &PanopticMaps, n_classes: usize) -> Result<Tallies> {
    check_maps(pred, gt, n_classes)?;
    let h = histogram(pred, gt, n_classes as u32 + 1);
    let matches = matches_from(&h);
    let mut t = Tallies::new(n_classes);
    let mut pred_matched = HashMap::new();
    let mut gt_matched = HashMap::new();
    for m in &matches {
        let c = &mut t.classes[m.gt.class_id as usize];
        c.tp += 1;
        c.iou_sum += m.iou;
        pred_matched.insert(m.pred, ());
        gt_matched.insert(m.gt, ());
    }
    for &g in h.gt_area.keys() {
        if !gt_matched.contains_key(&g) {
            t.classes[g.class_id as usize].fn_ += 1;
        }
    }
    for (&p, &area) in &h.pred_area {
        if pred_matched.contains_key(&p) {
            continue;
        }
        let on_void = h.pred_void.get(&p).copied().unwrap_or(0);
        if 2 * on_void > area {
            continue;
        }
        t.classes[p.class_id as usize].fp += 1;
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u32,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAverage {
    pub sq: f64,
    pub rq: f64,
    pub pq: f64,
    /// Number of classes in the average.
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// One record per class, background first.
    pub classes: Vec<ClassMetrics>,
    /// Crop classes with at least one TP, FP or FN.
    pub evaluated_classes: Vec<u32>,
    /// Average over the evaluated crop classes.
    pub average: ClassAverage,
    /// Same, with background added when it was seen.
    pub average_with_background: ClassAverage,
}

impl MetricReport {
    pub fn from_tallies(t: &Tallies) -> Self {
        let classes: Vec<ClassMetrics> = t
            .classes
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let sq = segmentation_quality(c.iou_sum, c.tp);
                let rq = recognition_quality(c.tp, c.fp, c.fn_);
                ClassMetrics {
                    class_id: k as u32,
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                    iou_sum: c.iou_sum,
                    sq,
                    rq,
                    pq: panoptic_quality(sq, rq),
                }
            })
            .collect();
        let evaluated_classes: Vec<u32> = (1..t.classes.len())
            .filter(|&k| !t.classes[k].is_empty())
            .map(|k| k as u32)
            .collect();
        let mean = |ids: &[u32]| {
            if ids.is_empty() {
                return ClassAverage::default();
            }
            let n = ids.len() as f64;
            let sum = |f: fn(&ClassMetrics) -> f64| ids.iter().map(|&k| f(&classes[k as usize])).sum::<f64>() / n;
            ClassAverage {
                sq: sum(|c| c.sq),
                rq: sum(|c| c.rq),
                pq: sum(|c| c.pq),
                n_classes: ids.len(),
            }
        };
        let average = mean(&evaluated_classes);
        let mut with_bg = evaluated_classes.clone();
        if !t.classes[0].is_empty() {
            with_bg.insert(0, 0);
        }
        let average_with_background = mean(&with_bg);
        Self {
            classes,
            evaluated_classes,
            average,
            average_with_background,
        }
    }

    pub fn tallies(&self) -> Tallies {
        Tallies {
            classes: self
                .classes
                .iter()
                .map(|c| ClassTally {
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                    iou_sum: c.iou_sum,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Metric(e.to_string()))
    }

    /// One row per class, then `average` and `average_with_background`.
    /// Quality columns are percentages.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,tp,fp,fn,sq,rq,pq\n");
        for c in &self.classes {
            let name = if c.class_id == 0 {
                "background".to_string()
            } else {
                c.class_id.to_string()
            };
            let _ = writeln!(
                s,
                "{name},{},{},{},{:.2},{:.2},{:.2}",
                c.tp,
                c.fp,
                c.fn_,
                100.0 * c.sq,
                100.0 * c.rq,
                100.0 * c.pq
            );
        }
        for (name, a) in [("average", &self.average), ("average_with_background", &self.average_with_background)] {
            let _ = writeln!(s, "{name},,,,{:.2},{:.2},{:.2}", 100.0 * a.sq, 100.0 * a.rq, 100.0 * a.pq);
        }
        s
    }
}

/// Accumulates tallies over aligned `(id, maps)` streams and reports.
pub fn evaluate_dataset(
    pred: &[(String, PanopticMaps)],
    gt: &[(String, PanopticMaps)],
    n_classes: usize,
) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} ground-truth patches",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = Tallies::new(n_classes);
    for ((pid, p), (gid, g)) in pred.iter().zip(gt) {
        if pid != gid {
            return Err(Error::Metric(format!("prediction {pid} paired with ground truth {gid}")));
        }
        total.merge(&evaluate_patch(p, g, n_classes)?)?;
    }
    Ok(MetricReport::from_tallies(&total))
}

/// Reference implementation: every prediction/ground-truth segment pair is
/// scored by counting pixels over the whole image.
pub fn brute_force_oracle(
    pred: &[(String, PanopticMaps)],
    gt: &[(String, PanopticMaps)],
    n_classes: usize,
) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::Metric("streams differ in length".into()));
    }
    let void = n_classes as u32 + 1;
    let mut total = Tallies::new(n_classes);
    for ((pid, p), (gid, g)) in pred.iter().zip(gt) {
        if pid != gid {
            return Err(Error::Metric(format!("prediction {pid} paired with ground truth {gid}")));
        }
        check_maps(p, g, n_classes)?;
        let (h, w) = p.semantic.dim();
        let pred_key = |r: usize, c: usize| SegmentKey::at(p.semantic[[r, c]], p.instance[[r, c]]);
        let gt_void = |r: usize, c: usize| g.semantic[[r, c]] == void;
        let gt_key = |r: usize, c: usize| SegmentKey::at(g.semantic[[r, c]], g.instance[[r, c]]);

        let mut pred_segs = BTreeMap::new();
        let mut gt_segs = BTreeMap::new();
        for r in 0..h {
            for c in 0..w {
                pred_segs.insert(pred_key(r, c), false);
                if !gt_void(r, c) {
                    gt_segs.insert(gt_key(r, c), false);
                }
            }
        }
        let pred_list: Vec<SegmentKey> = pred_segs.keys().copied().collect();
        let gt_list: Vec<SegmentKey> = gt_segs.keys().copied().collect();
        for &ps in &pred_list {
            for &gs in &gt_list {
                if ps.class_id != gs.class_id {
                    continue;
                }
                let (mut inter, mut union) = (0u64, 0u64);
                for r in 0..h {
                    for c in 0..w {
                        if gt_void(r, c) {
                            continue;
                        }
                        let a = pred_key(r, c) == ps;
                        let b = gt_key(r, c) == gs;
                        inter += (a && b) as u64;
                        union += (a || b) as u64;
                    }
                }
                let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
                if iou > 0.5 {
                    let t = &mut total.classes[gs.class_id as usize];
                    t.tp += 1;
                    t.iou_sum += iou;
                    pred_segs.insert(ps, true);
                    gt_segs.insert(gs, true);
                }
            }
        }
        for (gs, matched) in gt_segs {
            if !matched {
                total.classes[gs.class_id as usize].fn_ += 1;
            }
        }
        for (ps, matched) in pred_segs {
            if matched {
                continue;
            }
            let (mut area, mut on_void) = (0u64, 0u64);
            for r in 0..h {
                for c in 0..w {
                    if pred_key(r, c) == ps {
                        area += 1;
                        on_void += gt_void(r, c) as u64;
                    }
                }
            }
            if on_void as f64 / area as f64 <= 0.5 {
                total.classes[ps.class_id as usize].fp += 1;
            }
        }
    }
    Ok(MetricReport::from_tallies(&total))
}
