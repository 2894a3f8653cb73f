//! Teacher and student feature extractors.
//!
//! Both produce decoder pyramids of identical shape, so one head and one
//! feature-matching loss serve the pair.

mod attention;
mod decoder;
mod encoder;
mod model;

pub use attention::{
    date_encoding, gate_groups, masked_softmax, modality_attention_summary, temporal_collapse, AttentionStack, Ltae,
};
pub use decoder::{CrossModalityFusion, Decoder};
pub use encoder::SpatialEncoder;
pub use model::{FeaturePyramid, FrameBatch, SeriesBatch, Student, Teacher, TeacherOutput};
