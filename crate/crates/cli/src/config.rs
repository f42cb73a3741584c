use std::path::{Path, PathBuf};

use seqssl::augment::AugmentConfig;
use seqssl::data::{parse_planes, PhantomSpec, Plane, Split, DEFAULT_RATIOS};
use seqssl::model::{BackboneKind, ModelSpec};
use seqssl::report::{ProjectionMethod, FRACTIONS};
use seqssl::trainer::{FinetuneConfig, PretrainConfig, SweepConfig, DESK_BATCH_AXIS};
use seqssl::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "SEQSSL_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of volume containers (input to `ingest`).
    pub volumes: Option<PathBuf>,
    /// Prepared dataset directory holding `manifest.jsonl` and slice files.
    pub dataset: Option<PathBuf>,
    pub fraction: f64,
    pub planes: String,
    pub size: usize,
    pub ratios: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { volumes: None, dataset: None, fraction: 0.3, planes: "sag,cor,ax".into(), size: 84, ratios: DEFAULT_RATIOS }
    }
}

impl DataConfig {
    pub fn planes(&self) -> Result<Vec<Plane>> {
        parse_planes(&self.planes).map_err(|e| Error::validation("data.planes", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone_kind: String,
    pub proj_dim: usize,
    /// Defaults to `ceil(proj_dim / 4)`.
    pub pred_hidden_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone_kind: "resnet18".into(), proj_dim: 128, pred_hidden_dim: None }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec> {
        let kind: BackboneKind = self.backbone_kind.parse().map_err(|_| {
            Error::validation("model.backbone_kind", format!("unknown backbone {:?}", self.backbone_kind))
        })?;
        let mut spec = ModelSpec::with_proj_dim(kind, self.proj_dim);
        if let Some(h) = self.pred_hidden_dim {
            spec.pred_hidden_dim = h;
        }
        spec.validate().map_err(|e| Error::validation("model", e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub fractions: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub jobs: usize,
}

impl Default for SweepAxes {
    fn default() -> Self {
        SweepAxes { fractions: FRACTIONS.to_vec(), batch_sizes: DESK_BATCH_AXIS.to_vec(), resolutions: Vec::new(), jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub method: ProjectionMethod,
    pub split: Split,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig { method: ProjectionMethod::Pca, split: Split::Test }
    }
}

/// Everything a command needs. When `seed` is set it replaces the seeds of
/// the phantom, split, pre-training and fine-tuning stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Input checkpoint for `finetune`, `eval` and `embed`.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub phantom: PhantomSpec,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub sweep: SweepAxes,
    pub embed: EmbedConfig,
}

impl ExperimentConfig {
    pub fn split_seed(&self) -> u64 {
        self.seed.unwrap_or(self.phantom.seed)
    }

    /// Pushes the global seed and the shared augmentation settings into
    /// the stage configs.
    pub fn resolve(mut self) -> Self {
        if let Some(seed) = self.seed {
            self.phantom.seed = seed;
            self.pretrain.seed = seed;
            self.finetune.seed = seed;
        }
        self.pretrain.augment = self.augment.clone();
        self
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            fractions: self.sweep.fractions.clone(),
            batch_sizes: self.sweep.batch_sizes.clone(),
            resolutions: self.sweep.resolutions.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            jobs: self.sweep.jobs,
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated) in `table`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::validation(path, "empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::validation(path, format!("{p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// `SEQSSL_PRETRAIN__EPOCHS=5` sets `pretrain.epochs = 5`.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, toml::Value)> {
    let mut out: Vec<(String, toml::Value)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let key = k.strip_prefix(ENV_PREFIX)?;
            Some((key.to_ascii_lowercase().replace("__", "."), parse_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// JSON to TOML, dropping nulls (TOML has none; absent means default).
fn json_to_toml(v: &serde_json::Value) -> Option<toml::Value> {
    use serde_json::Value as J;
    Some(match v {
        J::Null => return None,
        J::Bool(b) => toml::Value::Boolean(*b),
        J::Number(n) => match n.as_i64() {
            Some(i) => toml::Value::Integer(i),
            None => toml::Value::Float(n.as_f64()?),
        },
        J::String(s) => toml::Value::String(s.clone()),
        J::Array(a) => toml::Value::Array(a.iter().filter_map(json_to_toml).collect()),
        J::Object(o) => toml::Value::Table(o.iter().filter_map(|(k, v)| Some((k.clone(), json_to_toml(v)?))).collect()),
    })
}

/// Reads a TOML config, or a JSON one. A run-metadata file is accepted
/// too: its `config` object is used.
fn read_table(p: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    if p.extension().is_some_and(|e| e == "json") {
        let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::validation("config", e.to_string()))?;
        if let Some(inner) = v.get_mut("config") {
            v = inner.take();
        }
        return match json_to_toml(&v) {
            Some(toml::Value::Table(t)) => Ok(t),
            _ => Err(Error::validation("config", "top level must be an object")),
        };
    }
    toml::from_str::<toml::Table>(&text).map_err(|e| Error::validation("config", e.to_string()))
}

/// File, then environment, then explicit flag overrides.
pub fn load(path: Option<&Path>, env: &[(String, toml::Value)], flags: &[(String, toml::Value)]) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    for (k, v) in env.iter().chain(flags) {
        set_path(&mut table, k, v.clone())?;
    }
    let cfg: ExperimentConfig =
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::validation("config", e.to_string().trim().to_string()))?;
    Ok(cfg.resolve())
}

pub fn int(v: impl Into<i64>) -> toml::Value {
    toml::Value::Integer(v.into())
}
