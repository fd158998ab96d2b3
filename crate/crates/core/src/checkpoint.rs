//! Single-file checkpoints: one JSON manifest line followed by
//! little-endian `f32` blobs.

use crate::error::{io_err, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamSet;
use diffcore::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const FORMAT: &str = "ftfoot-checkpoint-1";
/// Name prefixes of optimizer state tensors.
pub const MOMENT1: &str = "optim.m/";
pub const MOMENT2: &str = "optim.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the blob after the manifest line.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config_hash: String,
    pub step: u64,
    pub model_config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Model parameters and optimizer state at a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub step: u64,
    /// Model parameters plus `optim.m/…` and `optim.v/…` moments.
    pub tensors: BTreeMap<String, Tensor>,
}

/// What a forced load did with tensors that did not match.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    /// Checkpoint tensors not used (unknown name or mismatched shape).
    pub skipped: Vec<String>,
    /// Model parameters left at their fresh initialization.
    pub missing: Vec<String>,
}

impl Checkpoint {
    pub fn new(model: &Model, moments: Option<(&ParamSet, &ParamSet)>, step: u64) -> Self {
        let mut tensors: BTreeMap<String, Tensor> = model.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        if let Some((m, v)) = moments {
            for (k, t) in m.iter() {
                tensors.insert(format!("{MOMENT1}{k}"), t.clone());
            }
            for (k, t) in v.iter() {
                tensors.insert(format!("{MOMENT2}{k}"), t.clone());
            }
        }
        Self {
            model_config: model.config().clone(),
            step,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let offset = blob.len();
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes: blob.len() - offset,
            });
        }
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            config_hash: self.model_config.hash(),
            step: self.step,
            model_config: self.model_config.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |name: &str, msg: String| Error::Checkpoint { name: name.into(), msg };
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("<manifest>", "missing manifest line".into()))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad("<manifest>", e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(bad("<manifest>", format!("unsupported format `{}`", manifest.format)));
        }
        let found = manifest.model_config.hash();
        if found != manifest.config_hash {
            return Err(Error::ConfigHash {
                expected: manifest.config_hash,
                found,
            });
        }
        let body = &bytes[nl + 1..];
        let mut tensors = BTreeMap::new();
        let mut end = 0;
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.bytes != 4 * n {
                return Err(bad(&e.name, format!("{} bytes recorded for shape {:?}", e.bytes, e.shape)));
            }
            let Some(raw) = body.get(e.offset..e.offset + e.bytes) else {
                return Err(bad(&e.name, format!("blob truncated: needs bytes {}..{} of {}", e.offset, e.offset + e.bytes, body.len())));
            };
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| bad(&e.name, err.to_string()))?;
            tensors.insert(e.name.clone(), t);
            end = end.max(e.offset + e.bytes);
        }
        if end != body.len() {
            return Err(bad("<blobs>", format!("{} trailing bytes", body.len() - end)));
        }
        Ok(Self {
            model_config: manifest.model_config,
            step: manifest.step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Model parameters (without optimizer state).
    pub fn params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (k, v) in &self.tensors {
            if !k.starts_with(MOMENT1) && !k.starts_with(MOMENT2) {
                ps.insert(k.clone(), v.clone());
            }
        }
        ps
    }

    /// Optimizer moments, if stored.
    pub fn moments(&self) -> Option<(ParamSet, ParamSet)> {
        let (mut m, mut v) = (ParamSet::new(), ParamSet::new());
        for (k, t) in &self.tensors {
            if let Some(n) = k.strip_prefix(MOMENT1) {
                m.insert(n, t.clone());
            } else if let Some(n) = k.strip_prefix(MOMENT2) {
                v.insert(n, t.clone());
            }
        }
        (!m.is_empty()).then_some((m, v))
    }

    /// Builds the stored model. With `expected` set, its hash must match
    /// the checkpoint's unless `force`, in which case only parameters with
    /// matching name and shape are loaded into a fresh `expected` model.
    pub fn into_model(&self, expected: Option<&ModelConfig>, force: bool) -> Result<(Model, LoadReport)> {
        let cfg = match expected {
            Some(e) if e.hash() != self.model_config.hash() => {
                if !force {
                    return Err(Error::ConfigHash {
                        expected: e.hash(),
                        found: self.model_config.hash(),
                    });
                }
                e
            }
            _ => return Ok((Model::from_params(self.model_config.clone(), self.params())?, LoadReport::default())),
        };
        let mut model = Model::new(cfg.clone(), 0)?;
        let stored = self.params();
        let mut report = LoadReport::default();
        for (name, t) in stored.iter() {
            match model.params.get_mut(name) {
                Ok(dst) if dst.shape() == t.shape() => *dst = t.clone(),
                _ => report.skipped.push(name.clone()),
            }
        }
        report.missing = model
            .params
            .names()
            .filter(|n| stored.get(n).map_or(true, |t| Some(t.shape()) != model.params.get(n).ok().map(|m| m.shape())))
            .cloned()
            .collect();
        Ok((model, report))
    }
}
