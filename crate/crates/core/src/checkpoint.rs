//! Versioned JSON checkpoints: model parameters plus the fine-tuning anchor,
//! Fisher weights and where they came from.
//!
//! Floats are written in shortest round-trip form and parsed back exactly,
//! so a saved model reloads bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continual::{FisherDiagonal, ParameterSnapshot};
use crate::error::{Error, Result};
use crate::model::{Architecture, BiasModelConfig, Classifier, Init, ModelDims, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub architecture: Architecture,
    pub dims: ModelDims,
    pub bias: BiasModelConfig,
    pub init: Init,
    pub params: ParamSet,
}

/// How a checkpoint was produced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointProvenance {
    pub seed: u64,
    /// Training or fine-tuning configuration, as written.
    pub config: serde_json::Value,
    /// Generator/source descriptions of the datasets involved.
    pub datasets: Vec<String>,
    /// Checkpoint this one was fine-tuned from, if any.
    pub parent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelState,
    /// Anchor parameters of the fine-tuning penalty.
    pub snapshot: Option<ParameterSnapshot>,
    pub fisher: Option<FisherDiagonal>,
    pub provenance: CheckpointProvenance,
    /// SHA-256 of the model parameters, checked on load.
    pub checksum: String,
}

impl Checkpoint {
    pub fn new(model: &Classifier, provenance: CheckpointProvenance) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model: ModelState {
                architecture: model.architecture(),
                dims: *model.dims(),
                bias: *model.bias(),
                init: model.init(),
                params: model.params().clone(),
            },
            snapshot: None,
            fisher: None,
            provenance,
            checksum: model.params().checksum(),
        }
    }

    pub fn with_anchor(mut self, snapshot: ParameterSnapshot, fisher: Option<FisherDiagonal>) -> Self {
        self.snapshot = Some(snapshot);
        self.fisher = fisher;
        self
    }

    pub fn classifier(&self) -> Result<Classifier> {
        let m = &self.model;
        Classifier::from_parts(m.architecture, m.dims, m.bias, m.init, m.params.clone())
    }

    /// Checks version, checksum and that snapshot and Fisher weights match
    /// the model's main parameters.
    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if self.model.params.checksum() != self.checksum {
            return Err(Error::Checkpoint("parameter checksum mismatch".into()));
        }
        if !self.model.params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        let model = self.classifier()?;
        let mut main = ParamSet::new();
        for (name, t) in model.params().iter().take(model.main_len()) {
            main.push(name, t.clone());
        }
        if let Some(s) = &self.snapshot {
            main.check_compatible(s.params())?;
        }
        if let Some(f) = &self.fisher {
            main.check_compatible(f.values())?;
            FisherDiagonal::from_values(f.values().clone(), f.sample_size, f.source.clone())?;
        }
        Ok(())
    }

    /// Writes pretty JSON through a temporary file, so an interrupted save
    /// never leaves a truncated checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}
