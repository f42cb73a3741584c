//! Named-array checkpoints: a safetensors archive of little-endian `f32`
//! arrays plus a JSON metadata sidecar at `<path>.meta.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelSpec};
use crate::error::{Error, Result};

pub const FRAMEWORK_VERSION: &str = concat!("seqssl ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingStage {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_spec: ModelSpec,
    pub training_stage: TrainingStage,
    pub epochs: usize,
    pub seed: u64,
    pub framework_version: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arrays: BTreeMap<String, NamedArray>,
    pub meta: CheckpointMeta,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl Checkpoint {
    /// Snapshots every parameter and buffer. The stage must agree with the
    /// heads the model carries.
    pub fn from_model(model: &Model, stage: TrainingStage, epochs: usize, seed: u64) -> Result<Self> {
        let mut arrays = BTreeMap::new();
        model.visit_params(&mut |p| {
            arrays.insert(p.name.clone(), NamedArray { shape: p.shape.clone(), data: p.value.clone() });
        });
        let meta = CheckpointMeta {
            model_spec: model.spec().clone(),
            training_stage: stage,
            epochs,
            seed,
            framework_version: FRAMEWORK_VERSION.to_string(),
            extra: BTreeMap::new(),
        };
        let ckpt = Checkpoint { arrays, meta };
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.arrays.keys().any(|k| k.starts_with(prefix))
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.model_spec.validate()?;
        for (name, a) in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::format("checkpoint", format!("{name}: shape {:?} does not match payload", a.shape)));
            }
            if a.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format("checkpoint", format!("{name}: non-finite values")));
            }
        }
        let classifier = self.has_prefix("classifier.");
        let projector = self.has_prefix("projector.");
        let consistent = match self.meta.training_stage {
            TrainingStage::Pretrained => projector && !classifier,
            TrainingStage::Finetuned => classifier,
        };
        if !consistent {
            return Err(Error::format(
                "checkpoint",
                format!("stage {:?} disagrees with heads present (projector={projector}, classifier={classifier})", self.meta.training_stage),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .arrays
            .iter()
            .map(|(n, a)| (n.clone(), a.data.iter().flat_map(|v| v.to_le_bytes()).collect(), a.shape.clone()))
            .collect();
        let views = bytes
            .iter()
            .map(|(n, b, s)| Ok((n.as_str(), TensorView::new(Dtype::F32, s.clone(), b).map_err(st_err)?)))
            .collect::<Result<Vec<_>>>()?;
        let payload = safetensors::tensor::serialize(views, None).map_err(st_err)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, payload).map_err(|e| Error::io(path, e))?;
        let meta_path = sidecar(path);
        let meta = serde_json::to_string_pretty(&self.meta)?;
        fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload = fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta_path = sidecar(path);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
        let st = SafeTensors::deserialize(&payload).map_err(st_err)?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::format("checkpoint", format!("{name}: expected F32, found {:?}", view.dtype())));
            }
            let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            arrays.insert(name, NamedArray { shape: view.shape().to_vec(), data });
        }
        let ckpt = Checkpoint { arrays, meta };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::format("checkpoint", e.to_string())
}

impl Model {
    /// Rebuilds a model whose heads match the checkpoint stage and copies
    /// every named array in. Missing, extra, or misshapen arrays are errors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        ckpt.validate()?;
        let mut model = build_model(&ckpt.meta.model_spec, 0)?;
        if !ckpt.has_prefix("predictor.") {
            model.predictor = None;
        }
        if !ckpt.has_prefix("projector.") {
            model.projector = None;
        }
        if !ckpt.has_prefix("classifier.") {
            model.classifier = None;
        }
        let mut problem: Option<String> = None;
        let mut seen = 0usize;
        model.visit_params_mut(&mut |p| match ckpt.arrays.get(&p.name) {
            Some(a) if a.shape == p.shape => {
                p.value.copy_from_slice(&a.data);
                seen += 1;
            }
            Some(a) => {
                problem.get_or_insert(format!("{}: shape {:?}, expected {:?}", p.name, a.shape, p.shape));
            }
            None => {
                problem.get_or_insert(format!("missing array {}", p.name));
            }
        });
        if let Some(p) = problem {
            return Err(Error::format("checkpoint", p));
        }
        if seen != ckpt.arrays.len() {
            return Err(Error::format("checkpoint", format!("{} unexpected arrays", ckpt.arrays.len() - seen)));
        }
        Ok(model)
    }
}
