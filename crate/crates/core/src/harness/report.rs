use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::read_panoptic_maps;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

use super::config::TrainConfig;
use super::train::{read_loss_log, StepRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub run: String,
    pub mode: String,
    pub seed: u64,
    pub config_hash: String,
    /// Files written for this run, relative to the report directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: Vec<RunEntry>,
    /// Tables covering all runs.
    pub tables: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct MetricRow {
    run: String,
    mode: String,
    seed: u64,
    evaluation: String,
    sq: f64,
    rq: f64,
    pq: f64,
    sq_with_background: f64,
    rq_with_background: f64,
    pq_with_background: f64,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Collects every run directory under `results` (one holding a
/// `config.toml`) into tables, figures and `manifest.json` under `out`.
pub fn emit_report(results: &Path, out: &Path) -> Result<Manifest> {
    if !results.is_dir() {
        return Err(Error::data(results, "results directory does not exist"));
    }
    std::fs::create_dir_all(out)?;
    let mut manifest = Manifest::default();
    let mut rows = Vec::new();
    for dir in sorted_entries(results)? {
        let cfg_path = dir.join("config.toml");
        if !cfg_path.is_file() {
            continue;
        }
        let run = dir.file_name().expect("entry name").to_string_lossy().to_string();
        let cfg = TrainConfig::load(&cfg_path, &[])?;
        let mut entry = RunEntry {
            run: run.clone(),
            mode: cfg.mode.as_str().to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash()?,
            files: Vec::new(),
        };
        for f in sorted_entries(&dir)? {
            let name = f.file_name().expect("entry name").to_string_lossy().to_string();
            if let Some(eval) = name.strip_prefix("metrics_").and_then(|n| n.strip_suffix(".json")) {
                let report: MetricReport = serde_json::from_str(&std::fs::read_to_string(&f)?)
                    .map_err(|e| Error::data(&f, e.to_string()))?;
                let csv = format!("{run}_{eval}.csv");
                std::fs::write(out.join(&csv), report.to_csv())?;
                entry.files.push(csv);
                rows.push(MetricRow {
                    run: run.clone(),
                    mode: entry.mode.clone(),
                    seed: cfg.seed,
                    evaluation: eval.to_string(),
                    sq: report.average.sq,
                    rq: report.average.rq,
                    pq: report.average.pq,
                    sq_with_background: report.average_with_background.sq,
                    rq_with_background: report.average_with_background.rq,
                    pq_with_background: report.average_with_background.pq,
                });
            }
        }
        let losses = dir.join("losses.jsonl");
        if losses.is_file() {
            let log = read_loss_log(&losses)?;
            if !log.is_empty() {
                let png = format!("{run}_loss.png");
                draw_loss_curve(&log, 640, 320).save(out.join(&png)).map_err(|e| Error::data(out, e.to_string()))?;
                entry.files.push(png);
            }
        }
        let pred_dir = dir.join("predictions");
        let targets = pred_dir.join("targets");
        if targets.is_dir() {
            for f in sorted_entries(&targets)? {
                let name = f.file_name().expect("entry name").to_string_lossy().to_string();
                let Some(id) = name.strip_suffix("_semantic.npy") else {
                    continue;
                };
                let (sem, inst) = read_panoptic_maps(&pred_dir, id)?;
                let gt = read_panoptic_maps(&dir.join("ground_truth"), id).ok();
                let img = render_panoptic(&sem, &inst, gt.as_ref().map(|(s, i)| (s, i)), 4);
                let png = format!("{run}_{id}_panoptic.png");
                img.save(out.join(&png)).map_err(|e| Error::data(out, e.to_string()))?;
                entry.files.push(png);
            }
        }
        manifest.runs.push(entry);
    }
    if !rows.is_empty() {
        let mut csv = String::from("run,mode,seed,evaluation,sq,rq,pq,sq_with_background,rq_with_background,pq_with_background\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
                r.run,
                r.mode,
                r.seed,
                r.evaluation,
                100.0 * r.sq,
                100.0 * r.rq,
                100.0 * r.pq,
                100.0 * r.sq_with_background,
                100.0 * r.rq_with_background,
                100.0 * r.pq_with_background
            ));
        }
        std::fs::write(out.join("metrics.csv"), csv)?;
        std::fs::write(
            out.join("metrics.json"),
            serde_json::to_string_pretty(&rows).map_err(|e| Error::Metric(e.to_string()))?,
        )?;
        manifest.tables = vec!["metrics.csv".into(), "metrics.json".into()];
    }
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Metric(e.to_string()))?,
    )?;
    Ok(manifest)
}

const SERIES_COLOURS: [Rgb<u8>; 3] = [Rgb([31, 119, 180]), Rgb([214, 39, 40]), Rgb([44, 160, 44])];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Combined loss (blue), student loss (red) and teacher loss (green) per step.
/// Curves that stay at zero are left out.
pub fn draw_loss_curve(log: &[StepRecord], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 20i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (margin, margin), (margin, margin + h), axis);
    draw_line(&mut img, (margin, margin + h), (margin + w, margin + h), axis);
    let series: Vec<Vec<f64>> = [
        log.iter().map(|r| r.loss.combined).collect::<Vec<_>>(),
        log.iter().map(|r| r.loss.student_total).collect(),
        log.iter().map(|r| r.loss.teacher_total).collect(),
    ]
    .into_iter()
    .map(|s| if s.iter().all(|&v| v == 0.0) { Vec::new() } else { s })
    .collect();
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || log.is_empty() {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = log.len().max(2) - 1;
    let px = |i: usize, v: f64| {
        let x = margin + (i as f64 / n as f64 * w as f64).round() as i64;
        let y = margin + h - ((v - lo) / span * h as f64).round() as i64;
        (x, y)
    };
    for (s, &c) in series.iter().zip(&SERIES_COLOURS) {
        for i in 1..s.len() {
            if s[i - 1].is_finite() && s[i].is_finite() {
                draw_line(&mut img, px(i - 1, s[i - 1]), px(i, s[i]), c);
            }
        }
    }
    img
}

fn instance_colour(id: u32) -> Rgb<u8> {
    // golden-ratio hue walk keeps neighbouring ids apart
    let hue = (id as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let s = |v: f64| (55.0 + 200.0 * v) as u8;
    Rgb([s(r), s(g), s(b)])
}

fn paint(img: &mut RgbImage, semantic: &Array2<u32>, instance: &Array2<u32>, x0: u32, scale: u32) {
    for ((r, c), &s) in semantic.indexed_iter() {
        let colour = match (s, instance[[r, c]]) {
            (0, _) => Rgb([20, 20, 20]),
            (_, 0) => Rgb([110, 110, 110]),
            (_, id) => instance_colour(id),
        };
        for dy in 0..scale {
            for dx in 0..scale {
                img.put_pixel(x0 + c as u32 * scale + dx, r as u32 * scale + dy, colour);
            }
        }
    }
}

/// Instance map coloured per id, with the ground truth to its right when given.
pub fn render_panoptic(
    semantic: &Array2<u32>,
    instance: &Array2<u32>,
    ground_truth: Option<(&Array2<u32>, &Array2<u32>)>,
    scale: u32,
) -> RgbImage {
    let (h, w) = semantic.dim();
    let panel = w as u32 * scale;
    let panels = if ground_truth.is_some() { 2 } else { 1 };
    let gap = if panels == 2 { 4 } else { 0 };
    let mut img = RgbImage::from_pixel(panel * panels + gap, h as u32 * scale, Rgb([255, 255, 255]));
    paint(&mut img, semantic, instance, 0, scale);
    if let Some((s, i)) = ground_truth {
        paint(&mut img, s, i, panel + gap, scale);
    }
    img
}
