//! On-disk dataset layout.
//!
//! ```text
//! <root>/multispec/<id>.npy           f32 [T, C_ms, H, W]
//! <root>/radar_asc/<id>.npy           f32 [T_sar, C_orbit, H, W]
//! <root>/radar_desc/<id>.npy          f32 [T_sar, C_orbit, H, W]
//! <root>/meta/<id>.json               dates, radar dates, fold, parcel records
//! <root>/targets/<id>_semantic.npy    u32 [H, W]
//! <root>/targets/<id>_instance.npy    u32 [H, W]
//! ```
//!
//! Arrays are NPY v1.0. Target maps may also be stored as i64, i32, u16 or u8.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Array4, Axis};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AcquisitionSeries, PanopticTarget};

/// Which radar orbits are fed to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrbitMode {
    /// Ascending and descending stacked on channels.
    #[default]
    Stacked,
    Ascending,
    Descending,
}

/// Shape contract checked at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeContract {
    pub multispec_channels: usize,
    pub radar_channels_per_orbit: usize,
    pub height: usize,
    pub width: usize,
    pub t_min: usize,
    pub t_max: usize,
}

impl ShapeContract {
    /// The released 128x128 benchmark: 10 bands, 3-channel radar per orbit, 33..=61 frames.
    pub fn released_benchmark() -> Self {
        Self {
            multispec_channels: 10,
            radar_channels_per_orbit: 3,
            height: 128,
            width: 128,
            t_min: 33,
            t_max: 61,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub orbit: OrbitMode,
    pub n_classes: usize,
    pub contract: Option<ShapeContract>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParcelMeta {
    pub parcel_id: u32,
    pub class_id: u32,
    pub center: [usize; 2],
    pub box_height: f64,
    pub box_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub patch_id: String,
    pub dates: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radar_dates: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    #[serde(default)]
    pub parcels: Vec<ParcelMeta>,
}

fn multispec_path(root: &Path, id: &str) -> PathBuf {
    root.join("multispec").join(format!("{id}.npy"))
}

fn radar_path(root: &Path, orbit: &str, id: &str) -> PathBuf {
    root.join(format!("radar_{orbit}")).join(format!("{id}.npy"))
}

fn meta_path(root: &Path, id: &str) -> PathBuf {
    root.join("meta").join(format!("{id}.json"))
}

pub fn semantic_path(root: &Path, id: &str) -> PathBuf {
    root.join("targets").join(format!("{id}_semantic.npy"))
}

pub fn instance_path(root: &Path, id: &str) -> PathBuf {
    root.join("targets").join(format!("{id}_instance.npy"))
}

fn read_f32_4(path: &Path) -> Result<Array4<f32>> {
    if !path.exists() {
        return Err(Error::data(path, "missing file"));
    }
    read_npy::<_, Array4<f32>>(path).map_err(|e| Error::data(path, e.to_string()))
}

fn read_label_map(path: &Path) -> Result<Array2<u32>> {
    if !path.exists() {
        return Err(Error::data(path, "missing file"));
    }
    if let Ok(a) = read_npy::<_, Array2<u32>>(path) {
        return Ok(a);
    }
    let negative = || Error::data(path, "negative label");
    if let Ok(a) = read_npy::<_, Array2<i64>>(path) {
        if a.iter().any(|&v| v < 0) {
            return Err(negative());
        }
        return Ok(a.mapv(|v| v as u32));
    }
    if let Ok(a) = read_npy::<_, Array2<i32>>(path) {
        if a.iter().any(|&v| v < 0) {
            return Err(negative());
        }
        return Ok(a.mapv(|v| v as u32));
    }
    if let Ok(a) = read_npy::<_, Array2<u16>>(path) {
        return Ok(a.mapv(u32::from));
    }
    read_npy::<_, Array2<u8>>(path)
        .map(|a| a.mapv(u32::from))
        .map_err(|e| Error::data(path, format!("unsupported label array: {e}")))
}

pub fn read_meta(root: &Path, id: &str) -> Result<PatchMeta> {
    let path = meta_path(root, id);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::data(&path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))
}

/// Patch ids present in `<root>/meta`, sorted.
pub fn list_patch_ids(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("meta");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::data(&dir, e.to_string()))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Fold assignment from the released metadata, `(patch_id, fold)`.
pub fn read_folds(root: &Path) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for id in list_patch_ids(root)? {
        let meta = read_meta(root, &id)?;
        let fold = meta
            .fold
            .ok_or_else(|| Error::data(meta_path(root, &id), "no fold field"))?;
        out.push((id, fold));
    }
    Ok(out)
}

/// Reads one patch and its targets, checking shapes and class ids.
pub fn load_dataset_patch(root: &Path, id: &str, opts: &LoadOptions) -> Result<(AcquisitionSeries, PanopticTarget)> {
    let meta = read_meta(root, id)?;
    let ms_path = multispec_path(root, id);
    let multispec = read_f32_4(&ms_path)?;
    let (t, c_ms, h, w) = multispec.dim();
    if meta.dates.len() != t {
        return Err(Error::data(
            meta_path(root, id),
            format!("{} dates for {t} multispectral frames", meta.dates.len()),
        ));
    }
    let radar_dates = meta.radar_dates.clone().unwrap_or_else(|| meta.dates.clone());
    let mut orbits = Vec::new();
    let wanted: &[&str] = match opts.orbit {
        OrbitMode::Stacked => &["asc", "desc"],
        OrbitMode::Ascending => &["asc"],
        OrbitMode::Descending => &["desc"],
    };
    for orbit in wanted {
        let path = radar_path(root, orbit, id);
        let a = read_f32_4(&path)?;
        let (ts, _, hs, ws) = a.dim();
        if ts != radar_dates.len() || hs != h || ws != w {
            return Err(Error::data(
                &path,
                format!(
                    "radar shape {:?} inconsistent with {} radar dates and {h}x{w} multispectral frames",
                    a.shape(),
                    radar_dates.len()
                ),
            ));
        }
        if let Some(prev) = orbits.first() {
            let prev: &Array4<f32> = prev;
            if prev.shape()[1] != a.shape()[1] {
                return Err(Error::data(&path, "orbits disagree in channel count"));
            }
        }
        orbits.push(a);
    }
    let views: Vec<_> = orbits.iter().map(|a| a.view()).collect();
    let radar = concatenate(Axis(1), &views).map_err(|e| Error::data(root, e.to_string()))?;

    if let Some(c) = opts.contract {
        if c_ms != c.multispec_channels || h != c.height || w != c.width {
            return Err(Error::data(
                &ms_path,
                format!(
                    "multispectral shape {:?}, expected [T, {}, {}, {}]",
                    multispec.shape(),
                    c.multispec_channels,
                    c.height,
                    c.width
                ),
            ));
        }
        if t < c.t_min || t > c.t_max {
            return Err(Error::data(&ms_path, format!("{t} frames outside [{}, {}]", c.t_min, c.t_max)));
        }
        let per_orbit = radar.shape()[1] / wanted.len();
        if per_orbit != c.radar_channels_per_orbit {
            return Err(Error::data(
                radar_path(root, wanted[0], id),
                format!("{per_orbit} radar channels per orbit, expected {}", c.radar_channels_per_orbit),
            ));
        }
    }

    let sem_path = semantic_path(root, id);
    let semantic = read_label_map(&sem_path)?;
    let instance = read_label_map(&instance_path(root, id))?;
    if semantic.dim() != (h, w) || instance.dim() != (h, w) {
        return Err(Error::data(&sem_path, format!("target maps are not {h}x{w}")));
    }
    if let Some(bad) = semantic.iter().find(|&&s| s as usize > opts.n_classes + 1) {
        return Err(Error::data(&sem_path, format!("unknown class id {bad}")));
    }
    let target = PanopticTarget::from_maps(semantic, instance)?;
    if let Some(p) = target
        .parcels
        .iter()
        .find(|p| p.class_id == 0 || p.class_id as usize > opts.n_classes)
    {
        return Err(Error::data(
            &sem_path,
            format!("parcel {} carries class id {} outside [1, {}]", p.parcel_id, p.class_id, opts.n_classes),
        ));
    }
    for pm in &meta.parcels {
        match target.parcels.iter().find(|p| p.parcel_id == pm.parcel_id) {
            Some(p) if p.class_id == pm.class_id => {}
            _ => {
                return Err(Error::data(
                    meta_path(root, id),
                    format!("parcel {} disagrees with the target maps", pm.parcel_id),
                ))
            }
        }
    }

    let series = AcquisitionSeries {
        patch_id: id.to_string(),
        multispec,
        radar,
        dates: meta.dates,
        radar_dates,
    };
    Ok((series, target))
}

fn ensure_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn write_array<A: ndarray_npy::WritableElement, D: ndarray::Dimension>(
    path: &Path,
    a: &ndarray::Array<A, D>,
) -> Result<()> {
    ensure_dir(path)?;
    write_npy(path, a).map_err(|e| Error::data(path, e.to_string()))
}

/// Writes semantic and instance maps as `<root>/targets/<id>_{semantic,instance}.npy`.
pub fn write_panoptic_maps(root: &Path, id: &str, semantic: &Array2<u32>, instance: &Array2<u32>) -> Result<()> {
    write_array(&semantic_path(root, id), semantic)?;
    write_array(&instance_path(root, id), instance)
}

pub fn read_panoptic_maps(root: &Path, id: &str) -> Result<(Array2<u32>, Array2<u32>)> {
    Ok((read_label_map(&semantic_path(root, id))?, read_label_map(&instance_path(root, id))?))
}

/// Writes a patch in the dataset layout. The radar tensor is split in half on
/// channels into the ascending and descending orbit files.
pub fn write_dataset_patch(
    root: &Path,
    series: &AcquisitionSeries,
    target: &PanopticTarget,
    fold: Option<usize>,
) -> Result<()> {
    let id = &series.patch_id;
    write_array(&multispec_path(root, id), &series.multispec)?;
    let c = series.radar.shape()[1];
    if !c.is_multiple_of(2) {
        return Err(Error::Dimension(format!("cannot split {c} radar channels into two orbits")));
    }
    let asc = series.radar.slice(ndarray::s![.., ..c / 2, .., ..]).to_owned();
    let desc = series.radar.slice(ndarray::s![.., c / 2.., .., ..]).to_owned();
    write_array(&radar_path(root, "asc", id), &asc)?;
    write_array(&radar_path(root, "desc", id), &desc)?;
    write_panoptic_maps(root, id, &target.semantic, &target.instance)?;
    let meta = PatchMeta {
        patch_id: id.clone(),
        dates: series.dates.clone(),
        radar_dates: (series.radar_dates != series.dates).then(|| series.radar_dates.clone()),
        fold,
        parcels: target
            .parcels
            .iter()
            .map(|p| ParcelMeta {
                parcel_id: p.parcel_id,
                class_id: p.class_id,
                center: [p.center.0, p.center.1],
                box_height: p.box_height,
                box_width: p.box_width,
            })
            .collect(),
    };
    let path = meta_path(root, id);
    ensure_dir(&path)?;
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::data(&path, e.to_string()))?;
    std::fs::write(&path, text)?;
    Ok(())
}
