use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::SynthConfig;
use crate::error::Result;

use super::config::{DataSource, OptimizerConfig, TrainConfig, TrainMode};
use super::data::{load_splits, Splits};
use super::eval::{evaluate, EvalModel, EvalProtocol};
use super::train::train_on;

/// Plain student against an online-distilled student/teacher pair, repeated
/// over seeds on one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs_student: usize,
    pub epochs_online: usize,
    pub seeds: Vec<u64>,
}

impl StudyConfig {
    /// 600/200 patches of 48x48 with 10 acquisitions, 5 classes and 30%
    /// cloudy frames; a reduced backbone so three seeds fit a desk budget.
    pub fn desk_scale() -> Self {
        let synth = SynthConfig::default();
        let model = ModelConfig {
            n_levels: 3,
            channels: vec![8, 16, 32],
            n_heads: 4,
            n_classes: synth.n_classes,
            multispec_channels: synth.multispec_channels,
            radar_channels: synth.radar_channels(),
            head_channels: 16,
            shape_patch_size: 8,
            ..ModelConfig::default()
        };
        Self {
            synth,
            n_train: 600,
            n_val: 200,
            model,
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            epochs_student: 5,
            epochs_online: 5,
            seeds: vec![0, 1, 2],
        }
    }

    fn train_config(&self, mode: TrainMode, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            model: self.model.clone(),
            optimizer: self.optimizer,
            epochs,
            batch_size: self.batch_size,
            data: DataSource::Synthetic {
                synth: self.synth.clone(),
                n_train: self.n_train,
                n_val: self.n_val,
            },
            teacher_checkpoint: None,
            output_dir: "study".into(),
            eval_every: 0,
            seed,
        }
    }
}

/// Validation PQ (in percent) of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudySeed {
    pub seed: u64,
    pub plain_student_pq: f64,
    pub distilled_student_pq: f64,
    pub teacher_pq: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutcome {
    pub seeds: Vec<StudySeed>,
    pub seconds: f64,
}

impl StudyOutcome {
    fn mean(&self, f: impl Fn(&StudySeed) -> f64) -> f64 {
        if self.seeds.is_empty() {
            return 0.0;
        }
        self.seeds.iter().map(f).sum::<f64>() / self.seeds.len() as f64
    }

    pub fn plain_student_pq(&self) -> f64 {
        self.mean(|s| s.plain_student_pq)
    }

    pub fn distilled_student_pq(&self) -> f64 {
        self.mean(|s| s.distilled_student_pq)
    }

    pub fn teacher_pq(&self) -> f64 {
        self.mean(|s| s.teacher_pq)
    }
}

/// Runs every seed; `progress` sees each seed as it finishes. The student is
/// scored on one seeded frame per validation patch, the teacher on the full
/// series.
pub fn run_study(cfg: &StudyConfig, mut progress: impl FnMut(&StudySeed)) -> Result<StudyOutcome> {
    let start = Instant::now();
    let source = cfg.train_config(TrainMode::StudentOnly, 0, 0);
    source.validate()?;
    let splits = load_splits(&source.data, &cfg.model)?;
    let train_only = Splits {
        train: splits.train.clone(),
        val: Vec::new(),
    };
    let pq = |r: &crate::metrics::MetricReport| 100.0 * r.average.pq;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let t = Instant::now();
        let plain = train_on(&cfg.train_config(TrainMode::StudentOnly, cfg.epochs_student, seed), &train_only, None)?;
        let (plain_report, _) = evaluate(
            &plain.network,
            EvalModel::Student,
            &splits.val,
            EvalProtocol::SingleFrame,
            seed,
            cfg.batch_size,
        )?;
        drop(plain);
        let online = train_on(&cfg.train_config(TrainMode::OnlineDistill, cfg.epochs_online, seed), &train_only, None)?;
        let (student_report, _) = evaluate(
            &online.network,
            EvalModel::Student,
            &splits.val,
            EvalProtocol::SingleFrame,
            seed,
            cfg.batch_size,
        )?;
        let (teacher_report, _) = evaluate(
            &online.network,
            EvalModel::Teacher,
            &splits.val,
            EvalProtocol::TimeSeries,
            seed,
            cfg.batch_size,
        )?;
        let s = StudySeed {
            seed,
            plain_student_pq: pq(&plain_report),
            distilled_student_pq: pq(&student_report),
            teacher_pq: pq(&teacher_report),
            seconds: t.elapsed().as_secs_f64(),
        };
        info!(
            "study seed {seed}: plain {:.2} distilled {:.2} teacher {:.2} ({:.0}s)",
            s.plain_student_pq, s.distilled_student_pq, s.teacher_pq, s.seconds
        );
        progress(&s);
        seeds.push(s);
    }
    Ok(StudyOutcome {
        seeds,
        seconds: start.elapsed().as_secs_f64(),
    })
}
