use std::time::Instant;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::backbone::{FrameBatch, SeriesBatch};
use crate::error::{Error, Result};
use crate::types::{AcquisitionSeries, FramePair};

use super::network::Network;

/// Wall-clock latency in seconds. `spread = max - min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub spread: f64,
    pub samples: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("latency needs at least one repeat".into()));
        }
        let mut s = samples.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Ok(Self {
            median,
            min: s[0],
            max: s[n - 1],
            spread: s[n - 1] - s[0],
            samples,
        })
    }
}

/// Times `f` `repeats` times after `warmup` untimed calls.
pub fn time_repeated<F: FnMut() -> Result<()>>(mut f: F, warmup: usize, repeats: usize) -> Result<LatencyStats> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    LatencyStats::from_samples(samples)
}

/// Teacher backbone plus dense head on one full series.
pub fn benchmark_teacher(net: &Network, series: &AcquisitionSeries, warmup: usize, repeats: usize) -> Result<LatencyStats> {
    let batch = SeriesBatch::new(&[series], net.dtype(), &Device::Cpu)?;
    time_repeated(|| net.teacher_forward(&batch).map(|_| ()), warmup, repeats)
}

/// Student backbone plus dense head on one frame.
pub fn benchmark_student(net: &Network, frame: &FramePair, warmup: usize, repeats: usize) -> Result<LatencyStats> {
    let batch = FrameBatch::new(&[frame], net.dtype(), &Device::Cpu)?;
    time_repeated(|| net.student_forward(&batch).map(|_| ()), warmup, repeats)
}
