use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FrameBatch, SeriesBatch};
use crate::data::{sample_single_frame, write_panoptic_maps};
use crate::error::{Error, Result};
use crate::head::DenseOutputs;
use crate::losses::{distillation_feature_loss, paps_total_loss, BatchTargets, PapsLoss};
use crate::metrics::MetricReport;
use crate::types::{FramePair, LossBreakdown};

use super::config::{TrainConfig, TrainMode};
use super::data::{load_splits, Patch, Splits};
use super::eval::{evaluate, EvalModel, EvalProtocol};
use super::network::{derive_seed, CheckpointInfo, Network};

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub mode: TrainMode,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Validation metrics after an epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub model: EvalModel,
    pub protocol: EvalProtocol,
    pub report: MetricReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<StepRecord>,
    pub evaluations: Vec<EvalRecord>,
    pub info: CheckpointInfo,
}

/// Evaluations run on the validation split for a given mode.
pub fn default_evaluations(mode: TrainMode) -> Vec<(EvalModel, EvalProtocol)> {
    match mode {
        TrainMode::TeacherOnly => vec![(EvalModel::Teacher, EvalProtocol::TimeSeries)],
        TrainMode::StudentOnly => vec![(EvalModel::Student, EvalProtocol::SingleFrame)],
        TrainMode::OnlineDistill => vec![
            (EvalModel::Teacher, EvalProtocol::TimeSeries),
            (EvalModel::Student, EvalProtocol::SingleFrame),
        ],
        TrainMode::OfflineDistill => vec![(EvalModel::Student, EvalProtocol::SingleFrame)],
    }
}

/// Loads the data named by the config, trains, and writes the run directory:
/// `config.toml`, `losses.jsonl`, `checkpoint.safetensors`,
/// `metrics_<model>_<protocol>.{json,csv}` and `predictions/`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = load_splits(&cfg.data, &cfg.model)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml_string()?)?;
    let outcome = train_on(cfg, &splits, Some(&cfg.output_dir))?;
    outcome
        .network
        .save(&cfg.output_dir.join("checkpoint.safetensors"), &outcome.info)?;
    let last_epoch = outcome.evaluations.iter().map(|e| e.epoch).max();
    for e in outcome.evaluations.iter().filter(|e| Some(e.epoch) == last_epoch) {
        let stem = format!("metrics_{}_{}", e.model.as_str(), e.protocol.as_str());
        std::fs::write(cfg.output_dir.join(format!("{stem}.json")), e.report.to_json()?)?;
        std::fs::write(cfg.output_dir.join(format!("{stem}.csv")), e.report.to_csv())?;
    }
    if !splits.val.is_empty() {
        let (model, protocol) = default_evaluations(cfg.mode)[0];
        let n = splits.val.len().min(4);
        let (_, preds) = evaluate(
            &outcome.network,
            model,
            &splits.val[..n],
            protocol,
            cfg.seed,
            cfg.batch_size,
        )?;
        let dir = cfg.output_dir.join("predictions");
        for (p, pred) in splits.val[..n].iter().zip(&preds) {
            write_panoptic_maps(&dir, p.id(), &pred.semantic, &pred.instance)?;
            write_panoptic_maps(&cfg.output_dir.join("ground_truth"), p.id(), &p.target.semantic, &p.target.instance)?;
        }
    }
    Ok(outcome)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Training loop on in-memory splits. When `run_dir` is given the loss log
/// is streamed to `run_dir/losses.jsonl`.
pub fn train_on(cfg: &TrainConfig, splits: &Splits, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dtype = DType::F32;
    let device = Device::Cpu;
    let mode = cfg.mode;
    let network = match mode {
        TrainMode::OfflineDistill => {
            let path = cfg
                .teacher_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("offline_distill needs teacher_checkpoint".into()))?;
            offline_network(cfg, path, dtype)?
        }
        _ => Network::for_mode(&cfg.model, mode, dtype, cfg.seed)?,
    };

    let mut trainable = network.head_vars();
    if mode.needs_student() {
        trainable.extend(network.student_vars());
    }
    if matches!(mode, TrainMode::TeacherOnly | TrainMode::OnlineDistill) {
        trainable.extend(network.teacher_vars());
    }
    let o = &cfg.optimizer;
    let mut opt = AdamW::new(
        trainable.into_iter().map(|(_, v)| v).collect(),
        ParamsAdamW {
            lr: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        },
    )?;

    let mut log_file = match run_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(BufWriter::new(File::create(d.join("losses.jsonl"))?))
        }
        None => None,
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "order"));
    let mut frame_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "frames"));
    let m = &cfg.model;
    let train = &splits.train;
    let mut log = Vec::new();
    let mut evaluations = Vec::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        // drawn for every patch in every mode so the streams stay aligned
        let frames: Vec<FramePair> = train
            .iter()
            .map(|p| sample_single_frame(&p.series, &mut frame_rng))
            .collect::<Result<_>>()?;
        for chunk in order.chunks(cfg.batch_size) {
            let patches: Vec<&Patch> = chunk.iter().map(|&i| &train[i]).collect();
            let targets = BatchTargets::new(
                &patches.iter().map(|p| &p.target).collect::<Vec<_>>(),
                &patches.iter().map(|p| &p.centerness).collect::<Vec<_>>(),
                m.beta,
                dtype,
                &device,
            )?;
            if targets.parcel_count() == 0 {
                continue;
            }
            let series = || SeriesBatch::new(&patches.iter().map(|p| &p.series).collect::<Vec<_>>(), dtype, &device);
            let frame_batch =
                || FrameBatch::new(&chunk.iter().map(|&i| &frames[i]).collect::<Vec<_>>(), dtype, &device);
            let paps = |dense: &DenseOutputs| -> Result<PapsLoss> {
                paps_total_loss(network.head(), dense, &targets)
                    .map_err(|e| blame_non_finite(e, dense, step))?
                    .ok_or_else(|| Error::Loss("batch without parcels".into()))
            };

            let mut rec;
            let combined = match mode {
                TrainMode::TeacherOnly => {
                    let (_, dense) = network.teacher_forward(&series()?)?;
                    let lt = paps(&dense)?;
                    rec = lt.breakdown()?;
                    rec.teacher_total = rec.total;
                    lt.total
                }
                TrainMode::StudentOnly => {
                    let (_, dense) = network.student_forward(&frame_batch()?)?;
                    let ls = paps(&dense)?;
                    rec = ls.breakdown()?;
                    rec.student_total = rec.total;
                    ls.total
                }
                TrainMode::OnlineDistill => {
                    let (t_out, t_dense) = network.teacher_forward(&series()?)?;
                    let (s_pyr, s_dense) = network.student_forward(&frame_batch()?)?;
                    let ls = paps(&s_dense)?;
                    let lt = paps(&t_dense)?;
                    let ld = distillation_feature_loss(&s_pyr, &t_out.decoded, m.distill_norm)?;
                    rec = ls.breakdown()?;
                    rec.student_total = rec.total;
                    rec.teacher_total = lt.total_value()?;
                    rec.distil = scalar(&ld)?;
                    ((ls.total + (lt.total * m.lambda1)?)? + (ld * m.lambda2)?)?
                }
                TrainMode::OfflineDistill => {
                    let teacher = network.teacher().expect("offline network has a teacher");
                    let t_pyr = teacher.forward(&series()?)?.decoded.detach();
                    let (s_pyr, s_dense) = network.student_forward(&frame_batch()?)?;
                    let ls = paps(&s_dense)?;
                    let ld = distillation_feature_loss(&s_pyr, &t_pyr, m.distill_norm)?;
                    rec = ls.breakdown()?;
                    rec.student_total = rec.total;
                    rec.distil = scalar(&ld)?;
                    (ls.total + (ld * m.lambda2)?)?
                }
            };
            rec.combined = scalar(&combined)?;
            let record = StepRecord {
                step,
                epoch,
                mode,
                loss: rec,
            };
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &record).map_err(|e| Error::Loss(e.to_string()))?;
                f.write_all(b"\n")?;
            }
            if !rec.combined.is_finite() {
                if let Some(f) = log_file.as_mut() {
                    f.flush()?;
                }
                return Err(Error::NonFinite {
                    step,
                    detail: format!("{rec:?}"),
                });
            }
            opt.backward_step(&combined)?;
            log.push(record);
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if !splits.val.is_empty() && (last || due) {
            for (model, protocol) in default_evaluations(mode) {
                let (report, _) = evaluate(&network, model, &splits.val, protocol, cfg.seed, cfg.batch_size)?;
                info!(
                    "epoch {} {} {}: PQ {:.2} SQ {:.2} RQ {:.2}",
                    epoch + 1,
                    model.as_str(),
                    protocol.as_str(),
                    100.0 * report.average.pq,
                    100.0 * report.average.sq,
                    100.0 * report.average.rq
                );
                evaluations.push(EvalRecord {
                    epoch: epoch + 1,
                    model,
                    protocol,
                    report,
                });
            }
        }
        if let Some(r) = log.last() {
            info!("epoch {} done, step {step}, combined loss {:.4}", epoch + 1, r.loss.combined);
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    let info = CheckpointInfo {
        mode,
        seed: cfg.seed,
        epochs: cfg.epochs,
        steps: step,
        config_hash: cfg.hash()?,
    };
    Ok(TrainOutcome {
        network,
        log,
        evaluations,
        info,
    })
}

/// A loss that fails on diverged outputs (say a NaN box in a shape crop) is
/// reported as a numeric failure rather than a data error.
fn blame_non_finite(e: Error, dense: &DenseOutputs, step: usize) -> Error {
    let finite = |t: &Tensor| {
        t.sum_all()
            .and_then(|s| s.to_dtype(DType::F64)?.to_scalar::<f64>())
            .is_ok_and(f64::is_finite)
    };
    if [&dense.heatmap, &dense.size, &dense.class_logits, &dense.shape_features]
        .into_iter()
        .all(finite)
    {
        return e;
    }
    Error::NonFinite {
        step,
        detail: format!("non-finite network outputs ({e})"),
    }
}

/// A fresh student next to the teacher and head loaded from `path`.
fn offline_network(cfg: &TrainConfig, path: &Path, dtype: DType) -> Result<Network> {
    let (loaded, _) = Network::load(path, dtype)?;
    if loaded.config() != &cfg.model {
        return Err(Error::Config(format!(
            "teacher checkpoint {} was trained with a different model config",
            path.display()
        )));
    }
    if loaded.teacher().is_none() {
        return Err(Error::Config(format!("{} holds no teacher", path.display())));
    }
    let net = Network::new(&cfg.model, true, true, dtype, cfg.seed)?;
    let src = loaded.teacher_vars();
    for ((na, dst), (nb, s)) in net.teacher_vars().iter().zip(&src) {
        debug_assert_eq!(na, nb);
        dst.set(s.as_tensor())?;
    }
    for ((_, dst), (_, s)) in net.head_vars().iter().zip(&loaded.head_vars()) {
        dst.set(s.as_tensor())?;
    }
    Ok(net)
}

/// Reads a loss log written by [`train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let s = std::fs::read_to_string(path)?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::data(path, e.to_string())))
        .collect()
}
