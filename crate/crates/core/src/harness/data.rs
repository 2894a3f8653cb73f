use std::collections::HashSet;

use crate::config::ModelConfig;
use crate::data::{
    align_radar_to_multispec, generate_synthetic_patch, load_dataset_patch, make_centerness_target, read_folds,
    CenternessTarget, LoadOptions, SynthConfig,
};
use crate::error::{Error, Result};
use crate::types::{AcquisitionSeries, PanopticTarget};

use super::config::DataSource;

/// A patch ready for training: aligned series, ground truth and its heatmap.
#[derive(Debug, Clone)]
pub struct Patch {
    pub series: AcquisitionSeries,
    pub target: PanopticTarget,
    pub centerness: CenternessTarget,
}

impl Patch {
    pub fn new(series: AcquisitionSeries, target: PanopticTarget) -> Result<Self> {
        let series = align_radar_to_multispec(&series)?;
        let centerness = make_centerness_target(&target)?;
        Ok(Self {
            series,
            target,
            centerness,
        })
    }

    pub fn id(&self) -> &str {
        &self.series.patch_id
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Patch>,
    pub val: Vec<Patch>,
}

/// Generates patches for the given seeds, named `syn<seed>`.
pub fn synthetic_patches(synth: &SynthConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<Patch>> {
    seeds
        .into_iter()
        .map(|s| {
            let (mut series, target) = generate_synthetic_patch(synth, s)?;
            series.patch_id = format!("syn{s:05}");
            Patch::new(series, target)
        })
        .collect()
}

pub fn load_splits(source: &DataSource, model: &ModelConfig) -> Result<Splits> {
    match source {
        DataSource::Synthetic { synth, n_train, n_val } => Ok(Splits {
            train: synthetic_patches(synth, 0..*n_train as u64)?,
            val: synthetic_patches(synth, *n_train as u64..(*n_train + *n_val) as u64)?,
        }),
        DataSource::Directory {
            root,
            train_folds,
            val_folds,
            orbit,
        } => {
            let opts = LoadOptions {
                orbit: *orbit,
                n_classes: model.n_classes,
                contract: None,
            };
            let folds = read_folds(root)?;
            let pick = |wanted: &[usize]| -> Result<Vec<Patch>> {
                let wanted: HashSet<usize> = wanted.iter().copied().collect();
                folds
                    .iter()
                    .filter(|(_, f)| wanted.contains(f))
                    .map(|(id, _)| {
                        let (s, t) = load_dataset_patch(root, id, &opts)?;
                        Patch::new(s, t)
                    })
                    .collect()
            };
            let train = pick(train_folds)?;
            if train.is_empty() {
                return Err(Error::data(root, format!("no patches in folds {train_folds:?}")));
            }
            Ok(Splits {
                train,
                val: pick(val_folds)?,
            })
        }
    }
}
