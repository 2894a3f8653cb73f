use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{FeaturePyramid, FrameBatch, SeriesBatch, Student, Teacher, TeacherOutput};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::head::{DenseOutputs, PanopticHead};
use crate::nn::ParamStore;

use super::config::TrainMode;

pub const CHECKPOINT_FORMAT: &str = "orbitkd-checkpoint-1";

/// Seed of an independent stream, derived from the run seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Backbones and the shared head, each in its own parameter store so that
/// their initial values do not depend on which of them exist.
pub struct Network {
    cfg: ModelConfig,
    teacher: Option<(ParamStore, Teacher)>,
    student: Option<(ParamStore, Student)>,
    head: (ParamStore, PanopticHead),
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("teacher", &self.teacher.is_some())
            .field("student", &self.student.is_some())
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl Network {
    pub fn new(cfg: &ModelConfig, with_teacher: bool, with_student: bool, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !with_teacher && !with_student {
            return Err(Error::Config("a network needs a teacher or a student".into()));
        }
        let teacher = if with_teacher {
            let store = ParamStore::new(dtype, derive_seed(seed, "teacher"));
            let t = Teacher::new(cfg, store.root().pp("teacher"))?;
            Some((store, t))
        } else {
            None
        };
        let student = if with_student {
            let store = ParamStore::new(dtype, derive_seed(seed, "student"));
            let s = Student::new(cfg, store.root().pp("student"))?;
            Some((store, s))
        } else {
            None
        };
        let store = ParamStore::new(dtype, derive_seed(seed, "head"));
        let head = PanopticHead::new(cfg, store.root().pp("head"))?;
        Ok(Self {
            cfg: cfg.clone(),
            teacher,
            student,
            head: (store, head),
        })
    }

    pub fn for_mode(cfg: &ModelConfig, mode: TrainMode, dtype: DType, seed: u64) -> Result<Self> {
        Self::new(cfg, mode.needs_teacher(), mode.needs_student(), dtype, seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.head.0.dtype()
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref().map(|(_, t)| t)
    }

    pub fn student(&self) -> Option<&Student> {
        self.student.as_ref().map(|(_, s)| s)
    }

    pub fn head(&self) -> &PanopticHead {
        &self.head.1
    }

    pub fn teacher_vars(&self) -> Vec<(String, Var)> {
        self.teacher.as_ref().map(|(s, _)| s.named_vars()).unwrap_or_default()
    }

    pub fn student_vars(&self) -> Vec<(String, Var)> {
        self.student.as_ref().map(|(s, _)| s.named_vars()).unwrap_or_default()
    }

    pub fn head_vars(&self) -> Vec<(String, Var)> {
        self.head.0.named_vars()
    }

    /// Every variable, sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut v = self.head_vars();
        v.extend(self.student_vars());
        v.extend(self.teacher_vars());
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Trainable parameters of the student path: student backbone plus head.
    pub fn student_parameter_count(&self) -> usize {
        self.student_vars().iter().chain(self.head_vars().iter()).map(|(_, v)| v.elem_count()).sum()
    }

    /// Trainable parameters of the teacher path: teacher backbone plus head.
    pub fn teacher_parameter_count(&self) -> usize {
        self.teacher_vars().iter().chain(self.head_vars().iter()).map(|(_, v)| v.elem_count()).sum()
    }

    pub fn teacher_forward(&self, batch: &SeriesBatch) -> Result<(TeacherOutput, DenseOutputs)> {
        let t = self
            .teacher()
            .ok_or_else(|| Error::Config("network has no teacher".into()))?;
        let out = t.forward(batch)?;
        let dense = self.head.1.dense(out.decoded.finest())?;
        Ok((out, dense))
    }

    pub fn student_forward(&self, batch: &FrameBatch) -> Result<(FeaturePyramid, DenseOutputs)> {
        let s = self
            .student()
            .ok_or_else(|| Error::Config("network has no student".into()))?;
        let pyr = s.forward(batch)?;
        let dense = self.head.1.dense(pyr.finest())?;
        Ok((pyr, dense))
    }

    /// Writes all parameters plus the model config and `extra` metadata.
    pub fn save(&self, path: &Path, extra: &CheckpointInfo) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("model_config".to_string(), self.cfg.to_toml_string()?);
        meta.insert(
            "info".to_string(),
            serde_json::to_string(extra).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        let vars = self.named_vars();
        let mut buffers = Vec::with_capacity(vars.len());
        for (name, var) in &vars {
            let t = var.as_tensor().flatten_all()?;
            let (dtype, bytes) = match var.dtype() {
                DType::F32 => (StDtype::F32, t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()),
                DType::F64 => (StDtype::F64, t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()),
                other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
            };
            buffers.push((name.clone(), dtype, var.dims().to_vec(), bytes));
        }
        let views: Vec<(String, TensorView<'_>)> = buffers
            .iter()
            .map(|(n, d, s, b)| {
                TensorView::new(*d, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<_>>()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Rebuilds the network described by a checkpoint and loads its values.
    pub fn load(path: &Path, dtype: DType) -> Result<(Self, CheckpointInfo)> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let (_, metadata) =
            SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = metadata
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
        if meta.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint(format!("{}: not an {CHECKPOINT_FORMAT} file", path.display())));
        }
        let cfg = ModelConfig::from_toml_str(
            meta.get("model_config")
                .ok_or_else(|| Error::Checkpoint("missing model_config".into()))?,
        )?;
        let info: CheckpointInfo = serde_json::from_str(
            meta.get("info")
                .ok_or_else(|| Error::Checkpoint("missing info".into()))?,
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let names: Vec<String> = st.names().into_iter().map(str::to_string).collect();
        let has = |p: &str| names.iter().any(|n| n.starts_with(p));
        let net = Self::new(&cfg, has("teacher."), has("student."), dtype, 0)?;
        let vars = net.named_vars();
        if vars.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                names.len(),
                vars.len()
            )));
        }
        for (name, var) in &vars {
            let view = st
                .tensor(name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
            if view.shape() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} vs model {:?}",
                    view.shape(),
                    var.dims()
                )));
            }
            let data = view.data();
            let t = match view.dtype() {
                StDtype::F32 => {
                    let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, view.shape(), var.device())?
                }
                StDtype::F64 => {
                    let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, view.shape(), var.device())?
                }
                other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
            };
            var.set(&t.to_dtype(dtype)?)?;
        }
        Ok((net, info))
    }
}

/// Provenance stored alongside checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub config_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_levels: 2,
            channels: vec![4, 8],
            n_heads: 2,
            n_classes: 3,
            multispec_channels: 3,
            radar_channels: 2,
            head_channels: 4,
            shape_patch_size: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn student_init_does_not_depend_on_teacher() {
        let a = Network::new(&tiny(), false, true, DType::F32, 4).unwrap();
        let b = Network::new(&tiny(), true, true, DType::F32, 4).unwrap();
        for ((na, va), (nb, vb)) in a.student_vars().iter().zip(b.student_vars()) {
            assert_eq!(na, &nb);
            let x: Vec<f32> = va.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = vb.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y);
        }
        assert_ne!(derive_seed(4, "teacher"), derive_seed(4, "student"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        let net = Network::new(&tiny(), true, true, DType::F32, 9).unwrap();
        let info = CheckpointInfo {
            mode: TrainMode::OnlineDistill,
            seed: 9,
            epochs: 1,
            steps: 3,
            config_hash: "abc".into(),
        };
        net.save(&path, &info).unwrap();
        let (back, info2) = Network::load(&path, DType::F32).unwrap();
        assert_eq!(info, info2);
        assert_eq!(back.config(), net.config());
        let va = net.named_vars();
        let vb = back.named_vars();
        assert_eq!(va.len(), vb.len());
        for ((na, a), (nb, b)) in va.iter().zip(&vb) {
            assert_eq!(na, nb);
            let x: Vec<f32> = a.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = b.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y, "{na}");
        }
        let student_only = Network::new(&tiny(), false, true, DType::F32, 9).unwrap();
        student_only.save(&path, &info).unwrap();
        let (back, _) = Network::load(&path, DType::F32).unwrap();
        assert!(back.teacher().is_none() && back.student().is_some());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(Network::load(&path, DType::F32), Err(Error::Checkpoint(_))));
    }
}
