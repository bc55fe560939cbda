use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::dataio::{NormStats, TargetKind};
use crate::error::{Error, Result};
use crate::features::MaxentConfig;
use crate::numerics::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a model and feed it raw records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub norm: NormStats,
    pub maxent: Option<MaxentConfig>,
    pub species: Vec<String>,
    pub kind: TargetKind,
    /// Epoch the parameters were taken from, counting from 1.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn new(model: &Model, norm: NormStats, species: Vec<String>, kind: TargetKind, epoch: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            spec: model.spec.clone(),
            params: model.params.clone(),
            norm,
            maxent: model.maxent.clone(),
            species,
            kind,
            epoch,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.spec.clone(), self.maxent.clone(), self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.species.len() != ck.spec.n_species {
            return Err(Error::Schema("checkpoint roster does not match its model".into()));
        }
        Ok(ck)
    }
}
