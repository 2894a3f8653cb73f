//! Procedural multi-modal patches.
//!
//! Parcels come from a seeded Voronoi partition of the patch. Every crop
//! class has a fixed seasonal reflectance curve shared by all patches, so a
//! full time series identifies the class while many single dates do not.
//! Clouds overwrite multispectral pixels only; the radar stream encodes
//! parcel geometry with multiplicative speckle and never sees clouds.

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AcquisitionSeries, PanopticTarget, ParcelRecord};

const MAX_LAYOUT_RETRIES: usize = 64;
const WORLD_SEED: u64 = 0x5eed_0fc0_ffee;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub t_range: (usize, usize),
    pub n_classes: usize,
    pub parcel_count_range: (usize, usize),
    /// Minimum parcel area in pixels.
    pub min_parcel_area: usize,
    pub cloud_probability: f64,
    pub cloud_coverage_range: (f64, f64),
    pub radar_speckle_level: f64,
    /// Standard deviation of additive multispectral pixel noise.
    pub noise_level: f64,
    /// Fraction of parcels relabelled as void.
    pub void_rate: f64,
    pub multispec_channels: usize,
    pub radar_channels_per_orbit: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            t_range: (10, 10),
            n_classes: 5,
            parcel_count_range: (5, 9),
            min_parcel_area: 12,
            cloud_probability: 0.3,
            cloud_coverage_range: (0.3, 1.0),
            radar_speckle_level: 0.15,
            noise_level: 0.03,
            void_rate: 0.0,
            multispec_channels: 10,
            radar_channels_per_orbit: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic config: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("height and width must be positive");
        }
        if self.t_range.0 == 0 || self.t_range.0 > self.t_range.1 {
            return bad("t_range must be a nonempty range starting at 1 or more");
        }
        if self.t_range.1 > 365 {
            return bad("at most 365 acquisitions per series");
        }
        if self.parcel_count_range.0 > self.parcel_count_range.1 {
            return bad("parcel_count_range is empty");
        }
        if self.n_classes == 0 {
            return bad("n_classes must be positive");
        }
        if !(0.0..=1.0).contains(&self.cloud_probability) || !(0.0..=1.0).contains(&self.void_rate) {
            return bad("probabilities must lie in [0, 1]");
        }
        let (lo, hi) = self.cloud_coverage_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("cloud_coverage_range must be a nonempty range within [0, 1]");
        }
        if !(self.radar_speckle_level >= 0.0) || !(self.noise_level >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if self.multispec_channels == 0 || self.radar_channels_per_orbit == 0 {
            return bad("channel counts must be positive");
        }
        Ok(())
    }

    pub fn radar_channels(&self) -> usize {
        2 * self.radar_channels_per_orbit
    }
}

/// Per-class signatures, identical for every patch generated with the same class count.
struct World {
    soil: Vec<f64>,
    canopy: Vec<f64>,
    peak_day: Vec<f64>,
    width_days: Vec<f64>,
    amplitude: Vec<f64>,
    tint: Vec<Vec<f64>>,
    radar_level: Vec<[f64; 2]>,
}

impl World {
    fn new(n_classes: usize, ms_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED ^ n_classes as u64);
        let soil: Vec<f64> = (0..ms_channels)
            .map(|c| 0.18 + 0.12 * c as f64 / ms_channels as f64)
            .collect();
        // red-edge jump: low visible, high near infrared
        let canopy: Vec<f64> = (0..ms_channels)
            .map(|c| if c < ms_channels / 3 { 0.06 } else { 0.5 - 0.15 * (c as f64 / ms_channels as f64) })
            .collect();
        let mut peak_day = Vec::with_capacity(n_classes);
        let mut width_days = Vec::with_capacity(n_classes);
        let mut amplitude = Vec::with_capacity(n_classes);
        let mut tint = Vec::with_capacity(n_classes);
        let mut radar_level = Vec::with_capacity(n_classes);
        for k in 0..n_classes {
            let frac = if n_classes == 1 { 0.5 } else { k as f64 / (n_classes - 1) as f64 };
            peak_day.push(70.0 + 220.0 * frac + rng.gen_range(-8.0..8.0));
            width_days.push(rng.gen_range(28.0..45.0));
            amplitude.push(rng.gen_range(0.75..1.0));
            tint.push((0..ms_channels).map(|_| rng.gen_range(-0.015..0.015)).collect());
            radar_level.push([rng.gen_range(0.35..0.6), rng.gen_range(0.2..0.4)]);
        }
        Self {
            soil,
            canopy,
            peak_day,
            width_days,
            amplitude,
            tint,
            radar_level,
        }
    }

    /// Vegetation fraction of class `k` (0-based) at `day`, with a phase shift.
    fn greenness(&self, k: usize, day: f64, shift: f64) -> f64 {
        let z = (day - self.peak_day[k] - shift) / self.width_days[k];
        self.amplitude[k] * (-0.5 * z * z).exp()
    }
}

struct Streams {
    layout: ChaCha8Rng,
    multispec: ChaCha8Rng,
    radar: ChaCha8Rng,
    clouds: ChaCha8Rng,
}

impl Streams {
    fn new(cfg_seed: u64, seed: u64) -> Self {
        let base = cfg_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed;
        let make = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(base);
            r.set_stream(stream);
            r
        };
        Self {
            layout: make(1),
            multispec: make(2),
            radar: make(3),
            clouds: make(4),
        }
    }
}

/// Voronoi cell index per pixel plus which cells are parcels.
struct Layout {
    cells: Array2<usize>,
    parcel_cells: Vec<usize>,
}

fn voronoi_layout(cfg: &SynthConfig, n_parcels: usize, rng: &mut ChaCha8Rng) -> Option<Layout> {
    let (h, w) = (cfg.height, cfg.width);
    let n_background = (n_parcels / 2).max(1);
    let n_cells = n_parcels + n_background;
    let min_dist = ((h * w) as f64 / n_cells as f64).sqrt() * 0.55;
    let mut seeds: Vec<(f64, f64)> = Vec::with_capacity(n_cells);
    let mut attempts = 0;
    while seeds.len() < n_cells {
        attempts += 1;
        if attempts > 2000 {
            return None;
        }
        let p = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        if seeds
            .iter()
            .all(|s| ((s.0 - p.0).powi(2) + (s.1 - p.1).powi(2)).sqrt() >= min_dist)
        {
            seeds.push(p);
        }
    }
    let cells = Array2::from_shape_fn((h, w), |(r, c)| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let mut best = (f64::INFINITY, 0);
        for (i, s) in seeds.iter().enumerate() {
            let d = (s.0 - y).powi(2) + (s.1 - x).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    });
    let mut order: Vec<usize> = (0..n_cells).collect();
    order.shuffle(rng);
    let parcel_cells: Vec<usize> = order[..n_parcels].to_vec();
    for &pc in &parcel_cells {
        let area = cells.iter().filter(|&&c| c == pc).count();
        if area < cfg.min_parcel_area {
            return None;
        }
    }
    Some(Layout { cells, parcel_cells })
}

/// Smooth random field in roughly [0, 1], built from a few Gaussian bumps.
fn smooth_field(h: usize, w: usize, bumps: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let centers: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.15..0.45) * h.max(w) as f64,
                rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    Array2::from_shape_fn((h, w), |(r, c)| {
        centers
            .iter()
            .map(|&(cy, cx, s, a)| {
                let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                a * (-d2 / (2.0 * s * s)).exp()
            })
            .sum()
    })
}

/// Boolean mask covering approximately `fraction` of the pixels.
fn cloud_mask(h: usize, w: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let field = smooth_field(h, w, 4, rng);
    if fraction >= 1.0 {
        return Array2::from_elem((h, w), true);
    }
    let mut values: Vec<f64> = field.iter().copied().collect();
    values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = ((fraction * values.len() as f64).round() as usize).min(values.len());
    if k == 0 {
        return Array2::from_elem((h, w), false);
    }
    let thresh = values[k - 1];
    field.mapv(|v| v >= thresh)
}

/// Generates one patch; deterministic in `(cfg, seed)`.
pub fn generate_synthetic_patch(cfg: &SynthConfig, seed: u64) -> Result<(AcquisitionSeries, PanopticTarget)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let world = World::new(cfg.n_classes, cfg.multispec_channels);
    let mut rng = Streams::new(cfg.seed, seed);

    let t = rng.layout.gen_range(cfg.t_range.0..=cfg.t_range.1);
    let n_parcels = rng.layout.gen_range(cfg.parcel_count_range.0..=cfg.parcel_count_range.1);
    let layout = (0..MAX_LAYOUT_RETRIES)
        .find_map(|_| voronoi_layout(cfg, n_parcels, &mut rng.layout))
        .ok_or_else(|| {
            Error::Generation(format!(
                "could not pack {n_parcels} parcels of area >= {} into {h}x{w} after {MAX_LAYOUT_RETRIES} attempts",
                cfg.min_parcel_area
            ))
        })?;

    let mut days: Vec<i64> = (0..365).collect();
    days.shuffle(&mut rng.layout);
    let mut dates: Vec<i64> = days[..t].to_vec();
    dates.sort_unstable();

    // parcel attributes, indexed by position in layout.parcel_cells
    let classes: Vec<usize> = (0..n_parcels).map(|_| rng.layout.gen_range(0..cfg.n_classes)).collect();
    let is_void: Vec<bool> = (0..n_parcels).map(|_| rng.layout.gen_bool(cfg.void_rate)).collect();
    let mut cell_parcel = vec![None; layout.cells.iter().max().copied().unwrap_or(0) + 1];
    for (i, &cell) in layout.parcel_cells.iter().enumerate() {
        cell_parcel[cell] = Some(i);
    }

    // ground truth
    let void_class = cfg.n_classes as u32 + 1;
    let mut semantic = Array2::<u32>::zeros((h, w));
    let mut instance = Array2::<u32>::zeros((h, w));
    let mut next_id = 1u32;
    let mut parcel_ids = vec![0u32; n_parcels];
    for i in 0..n_parcels {
        if !is_void[i] {
            parcel_ids[i] = next_id;
            next_id += 1;
        }
    }
    for ((r, c), &cell) in layout.cells.indexed_iter() {
        if let Some(i) = cell_parcel[cell] {
            if is_void[i] {
                semantic[[r, c]] = void_class;
            } else {
                semantic[[r, c]] = classes[i] as u32 + 1;
                instance[[r, c]] = parcel_ids[i];
            }
        }
    }
    let mut parcels = Vec::new();
    for i in 0..n_parcels {
        if is_void[i] {
            continue;
        }
        let mask = instance.mapv(|v| v == parcel_ids[i]);
        parcels.push(ParcelRecord::from_mask(parcel_ids[i], classes[i] as u32 + 1, mask).expect("nonempty parcel"));
    }
    let target = PanopticTarget {
        semantic,
        instance,
        parcels,
    };

    // multispectral stream
    let c_ms = cfg.multispec_channels;
    let ms_rng = &mut rng.multispec;
    let parcel_shift: Vec<f64> = (0..n_parcels).map(|_| ms_rng.gen_range(-6.0..6.0)).collect();
    let parcel_offset: Vec<Vec<f64>> = (0..n_parcels)
        .map(|_| (0..c_ms).map(|_| ms_rng.gen_range(-0.02..0.02)).collect())
        .collect();
    let bg_texture = smooth_field(h, w, 6, ms_rng);
    let bg_green = ms_rng.gen_range(0.05..0.25);
    let noise = Normal::new(0.0, cfg.noise_level.max(1e-12)).expect("valid normal");
    let mut multispec = Array4::<f32>::zeros((t, c_ms, h, w));
    for (ti, &day) in dates.iter().enumerate() {
        let day = day as f64;
        let bg_season = bg_green * (0.6 + 0.4 * (std::f64::consts::TAU * (day - 120.0) / 365.0).cos().abs());
        for ((r, cc), &cell) in layout.cells.indexed_iter() {
            let (g, offset, tint): (f64, Option<&[f64]>, Option<&[f64]>) = match cell_parcel[cell] {
                Some(i) => {
                    let k = classes[i];
                    (
                        world.greenness(k, day, parcel_shift[i]),
                        Some(&parcel_offset[i][..]),
                        Some(&world.tint[k][..]),
                    )
                }
                None => (bg_season * (0.5 + bg_texture[[r, cc]]), None, None),
            };
            for ch in 0..c_ms {
                let mut v = world.soil[ch] + (world.canopy[ch] - world.soil[ch]) * g;
                if let Some(o) = offset {
                    v += o[ch];
                }
                if let Some(tn) = tint {
                    v += tn[ch];
                }
                if cfg.noise_level > 0.0 {
                    v += noise.sample(ms_rng);
                }
                multispec[[ti, ch, r, cc]] = v as f32;
            }
        }
    }

    // clouds overwrite multispectral pixels only
    for ti in 0..t {
        if !rng.clouds.gen_bool(cfg.cloud_probability) {
            continue;
        }
        let (lo, hi) = cfg.cloud_coverage_range;
        let fraction = if hi > lo { rng.clouds.gen_range(lo..=hi) } else { lo };
        let mask = cloud_mask(h, w, fraction, &mut rng.clouds);
        for ((r, cc), &m) in mask.indexed_iter() {
            if !m {
                continue;
            }
            let base = rng.clouds.gen_range(0.65..0.8);
            for ch in 0..c_ms {
                multispec[[ti, ch, r, cc]] = (base + rng.clouds.gen_range(-0.02..0.02)) as f32;
            }
        }
    }

    // radar stream: per-parcel backscatter, darkened cell borders, speckle
    let per_orbit = cfg.radar_channels_per_orbit;
    let sar_rng = &mut rng.radar;
    let parcel_bs: Vec<[f64; 2]> = (0..n_parcels)
        .map(|i| {
            let base = world.radar_level[classes[i]];
            [base[0] + sar_rng.gen_range(-0.08..0.08), base[1] + sar_rng.gen_range(-0.06..0.06)]
        })
        .collect();
    let bg_bs = [sar_rng.gen_range(0.15..0.25), sar_rng.gen_range(0.08..0.15)];
    let orbit_gain = [1.0, sar_rng.gen_range(0.85..0.95)];
    let border = Array2::from_shape_fn((h, w), |(r, c)| {
        let me = layout.cells[[r, c]];
        let nb = [
            (r > 0).then(|| layout.cells[[r - 1, c]]),
            (r + 1 < h).then(|| layout.cells[[r + 1, c]]),
            (c > 0).then(|| layout.cells[[r, c - 1]]),
            (c + 1 < w).then(|| layout.cells[[r, c + 1]]),
        ];
        nb.iter().flatten().any(|&o| o != me)
    });
    let speckle = Normal::new(0.0, cfg.radar_speckle_level.max(1e-12)).expect("valid normal");
    let mut radar = Array4::<f32>::zeros((t, 2 * per_orbit, h, w));
    for (ti, &day) in dates.iter().enumerate() {
        let day = day as f64;
        for ((r, cc), &cell) in layout.cells.indexed_iter() {
            let (vv, vh) = match cell_parcel[cell] {
                Some(i) => {
                    let grow = 0.12 * world.greenness(classes[i], day, 0.0);
                    (parcel_bs[i][0] + grow, parcel_bs[i][1] + grow)
                }
                None => (bg_bs[0], bg_bs[1]),
            };
            let edge = if border[[r, cc]] { 0.55 } else { 1.0 };
            for (orbit, gain) in orbit_gain.iter().enumerate() {
                for ch in 0..per_orbit {
                    let clean = match ch % 3 {
                        0 => vv,
                        1 => vh,
                        _ => vh / vv.max(1e-3) * 0.5,
                    } * gain
                        * edge;
                    let factor = if cfg.radar_speckle_level > 0.0 {
                        (1.0 + speckle.sample(sar_rng)).max(0.0)
                    } else {
                        1.0
                    };
                    radar[[ti, orbit * per_orbit + ch, r, cc]] = (clean * factor) as f32;
                }
            }
        }
    }

    let series = AcquisitionSeries {
        patch_id: format!("synth_{seed:06}"),
        multispec,
        radar,
        radar_dates: dates.clone(),
        dates,
    };
    Ok((series, target))
}
