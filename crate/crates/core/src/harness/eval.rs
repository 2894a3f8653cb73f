use candle_core::Device;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FrameBatch, SeriesBatch};
use crate::data::sample_single_frame;
use crate::error::{Error, Result};
use crate::head::PanopticPrediction;
use crate::metrics::{evaluate_dataset, MetricReport, PanopticMaps};
use crate::types::AcquisitionSeries;

use super::data::Patch;
use super::network::{derive_seed, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalProtocol {
    /// The full series of both modalities.
    TimeSeries,
    /// One seeded random acquisition per patch.
    SingleFrame,
}

impl EvalProtocol {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalProtocol::TimeSeries => "time_series",
            EvalProtocol::SingleFrame => "single_frame",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Teacher,
    Student,
}

impl EvalModel {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalModel::Teacher => "teacher",
            EvalModel::Student => "student",
        }
    }
}

/// Runs `model` under `protocol` and scores the assembled panoptic maps.
/// The student only accepts single frames; the teacher under the
/// single-frame protocol sees a one-step series.
pub fn evaluate(
    net: &Network,
    model: EvalModel,
    patches: &[Patch],
    protocol: EvalProtocol,
    seed: u64,
    batch_size: usize,
) -> Result<(MetricReport, Vec<PanopticPrediction>)> {
    match (model, protocol) {
        (EvalModel::Student, EvalProtocol::TimeSeries) => {
            return Err(Error::Config("a single-frame student cannot run the time_series protocol".into()))
        }
        (EvalModel::Student, _) if net.student().is_none() => {
            return Err(Error::Config("checkpoint holds no student".into()))
        }
        (EvalModel::Teacher, _) if net.teacher().is_none() => {
            return Err(Error::Config("checkpoint holds no teacher".into()))
        }
        _ => {}
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let dtype = net.dtype();
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval_frames"));
    let frames = match protocol {
        EvalProtocol::SingleFrame => Some(
            patches
                .iter()
                .map(|p| sample_single_frame(&p.series, &mut rng))
                .collect::<Result<Vec<_>>>()?,
        ),
        EvalProtocol::TimeSeries => None,
    };
    let thresholds = net.config().detection;
    let mut preds = Vec::with_capacity(patches.len());
    for (k, chunk) in patches.chunks(batch_size).enumerate() {
        let lo = k * batch_size;
        let dense = match (model, &frames) {
            (EvalModel::Student, Some(f)) => {
                let fr: Vec<_> = f[lo..lo + chunk.len()].iter().collect();
                net.student_forward(&FrameBatch::new(&fr, dtype, &device)?)?.1
            }
            (EvalModel::Teacher, Some(f)) => {
                let one: Vec<AcquisitionSeries> = f[lo..lo + chunk.len()]
                    .iter()
                    .zip(chunk)
                    .map(|(fp, p)| {
                        fp.as_series(p.id())
                            .ok_or_else(|| Error::Alignment(format!("series {} is not aligned", p.id())))
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<_> = one.iter().collect();
                net.teacher_forward(&SeriesBatch::new(&refs, dtype, &device)?)?.1
            }
            (EvalModel::Teacher, None) => {
                let refs: Vec<_> = chunk.iter().map(|p| &p.series).collect();
                net.teacher_forward(&SeriesBatch::new(&refs, dtype, &device)?)?.1
            }
            (EvalModel::Student, None) => unreachable!("rejected above"),
        };
        preds.extend(net.head().predict(&dense, &thresholds)?);
    }
    let pred_maps: Vec<(String, PanopticMaps)> = patches
        .iter()
        .zip(&preds)
        .map(|(p, pr)| (p.id().to_string(), PanopticMaps::from(pr)))
        .collect();
    let gt_maps: Vec<(String, PanopticMaps)> = patches
        .iter()
        .map(|p| (p.id().to_string(), PanopticMaps::from(&p.target)))
        .collect();
    let report = evaluate_dataset(&pred_maps, &gt_maps, net.config().n_classes)?;
    Ok((report, preds))
}

