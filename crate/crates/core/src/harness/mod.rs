//! Training, evaluation, latency benchmarking and report emission.

mod bench;
mod config;
mod data;
mod eval;
mod network;
mod report;
mod study;
mod train;

pub use bench::{benchmark_student, benchmark_teacher, time_repeated, LatencyStats};
pub use config::{apply_override, DataSource, OptimizerConfig, TrainConfig, TrainMode, TRAIN_SCHEMA_VERSION};
pub use data::{load_splits, synthetic_patches, Patch, Splits};
pub use eval::{evaluate, EvalModel, EvalProtocol};
pub use network::{derive_seed, CheckpointInfo, Network, CHECKPOINT_FORMAT};
pub use report::{emit_report, draw_loss_curve, render_panoptic, Manifest, RunEntry};
pub use study::{run_study, StudyConfig, StudyOutcome, StudySeed};
pub use train::{default_evaluations, read_loss_log, train, train_on, EvalRecord, StepRecord, TrainOutcome};
