//! Input series, targets and the synthetic generator.

mod align;
mod dataset;
mod sampling;
mod synth;
mod targets;

pub use align::align_radar_to_multispec;
pub use dataset::{
    instance_path, list_patch_ids, load_dataset_patch, read_folds, read_meta, read_panoptic_maps, semantic_path,
    write_dataset_patch, write_panoptic_maps, LoadOptions, OrbitMode, ParcelMeta, PatchMeta, ShapeContract,
};
pub use sampling::{make_folds, sample_single_frame};
pub use synth::{generate_synthetic_patch, SynthConfig};
pub use targets::{make_centerness_target, CenternessTarget};
