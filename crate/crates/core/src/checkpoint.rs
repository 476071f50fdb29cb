//! Parameter archives: a safetensors file whose metadata carries the
//! manifest (model revision, λ, stage and the architecture config).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::CanfVcpp;
use crate::nn::ParamStore;

/// Bumped when parameter names or layer shapes change incompatibly.
pub const MODEL_REVISION: u32 = 1;

/// Rate settings, indexed by the bitstream's λ id.
pub const LAMBDAS: [u32; 4] = [256, 512, 1024, 2048];

pub fn lambda_index(lambda: u32) -> Result<u8> {
    LAMBDAS
        .iter()
        .position(|&l| l == lambda)
        .map(|i| i as u8)
        .ok_or_else(|| Error::InvalidArgument(format!("λ = {lambda} is not one of {LAMBDAS:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub revision: u32,
    pub lambda: u32,
    pub stage: u8,
    pub model: ModelConfig,
}

impl Manifest {
    pub fn new(lambda: u32, stage: u8, model: ModelConfig) -> Self {
        Self {
            revision: MODEL_REVISION,
            lambda,
            stage,
            model,
        }
    }

    fn to_metadata(&self) -> Result<HashMap<String, String>> {
        let mut m = HashMap::new();
        m.insert("revision".into(), self.revision.to_string());
        m.insert("lambda".into(), self.lambda.to_string());
        m.insert("stage".into(), self.stage.to_string());
        m.insert(
            "model".into(),
            serde_json::to_string(&self.model).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        Ok(m)
    }

    fn from_metadata(m: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{k}`")));
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("manifest field `{k}` is not a number")))
        };
        Ok(Self {
            revision: num("revision")? as u32,
            lambda: num("lambda")? as u32,
            stage: num("stage")? as u8,
            model: serde_json::from_str(get("model")?).map_err(|e| Error::Checkpoint(e.to_string()))?,
        })
    }
}

/// Names that were in the archive but not the model, and vice versa.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub unknown: Vec<String>,
    pub missing: Vec<String>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Copies every named tensor into `store`.
    pub fn apply(&self, store: &ParamStore) -> Result<LoadReport> {
        let unknown = store.assign(&self.tensors)?;
        let missing = store
            .names()
            .into_iter()
            .filter(|n| !self.tensors.contains_key(n))
            .collect();
        Ok(LoadReport { unknown, missing })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let tensors: Vec<(String, Tensor)> = store
        .all_vars()
        .into_iter()
        .map(|(k, v)| (k, v.as_tensor().clone()))
        .collect();
    let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(manifest.to_metadata()?))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let manifest = Manifest::from_metadata(
        meta.metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("archive has no manifest".into()))?,
    )?;
    if manifest.revision != MODEL_REVISION {
        log::warn!(
            "checkpoint revision {} differs from model revision {MODEL_REVISION}; loading by name",
            manifest.revision
        );
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
        .into_iter()
        .collect();
    Ok(Checkpoint { manifest, tensors })
}

/// Rebuilds the model described by a checkpoint and loads its weights.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ParamStore, CanfVcpp, Manifest)> {
    let ck = load_checkpoint(path)?;
    let store = ParamStore::new(ck.manifest.model.seed);
    let model = CanfVcpp::new(&store, &ck.manifest.model)?;
    let report = ck.apply(&store)?;
    if !report.missing.is_empty() {
        log::warn!("{} parameters missing from checkpoint keep their initialization", report.missing.len());
    }
    if !report.unknown.is_empty() {
        log::warn!("{} checkpoint entries ignored", report.unknown.len());
    }
    Ok((store, model, ck.manifest))
}
