//! Versioned JSON checkpoints with atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentNorm, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{AeTrainer, DiffusionTrainer, OneStageTrainer};

pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "diffcom-checkpoint";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Training progress carried alongside the weights.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingState {
    pub ae: Option<AeTrainer>,
    pub one_stage: Option<OneStageTrainer>,
    pub diffusion: Option<DiffusionTrainer>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub version: u32,
    pub config: ModelConfig,
    pub norm: LatentNorm,
    /// Total optimizer steps applied to these weights.
    pub step: u64,
    pub params: Vec<NamedTensor>,
    #[serde(default)]
    pub training: TrainingState,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, training: TrainingState) -> Self {
        let params = model
            .store
            .ids()
            .map(|id| NamedTensor { name: model.store.name(id).to_string(), value: model.store.get(id).clone() })
            .collect();
        Checkpoint {
            kind: KIND.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.cfg.clone(),
            norm: model.norm.clone(),
            step,
            params,
            training,
        }
    }

    /// Rebuilds the model and loads every parameter by name.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config, 0)?;
        if self.norm.mean.len() != model.state_dim() || self.norm.std.len() != model.state_dim() {
            return Err(Error::ConfigMismatch("latent normalization width does not match the model".into()));
        }
        model.norm = self.norm.clone();
        if self.params.len() != model.store.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} tensors, configuration builds {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            let id = model
                .store
                .find(&p.name)
                .ok_or_else(|| Error::ConfigMismatch(format!("unknown parameter {}", p.name)))?;
            let dst = model.store.get_mut(id);
            if dst.shape() != p.value.shape() || p.value.len() != p.value.data().len() {
                return Err(Error::ConfigMismatch(format!("parameter {} has the wrong shape", p.name)));
            }
            *dst = p.value.clone();
        }
        Ok(model)
    }

    /// Loads the parameters whose names start with `prefix` into `model`.
    pub fn load_params_into(&self, model: &mut Model, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let id = model
                .store
                .find(&p.name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {}", p.name)))?;
            let dst = model.store.get_mut(id);
            if dst.shape() != p.value.shape() {
                return Err(Error::ConfigMismatch(format!("parameter {} has the wrong shape", p.name)));
            }
            *dst = p.value.clone();
            n += 1;
        }
        Ok(n)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.kind != KIND {
            return Err(Error::Version(format!("not a checkpoint (kind {:?})", ck.kind)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!("checkpoint version {} is not supported", ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes to a sibling temporary file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::Io(e)
    })
}

/// Copies every parameter whose name starts with `prefix` from `src` into `dst`.
pub fn copy_params(dst: &mut Model, src: &Model, prefix: &str) -> Result<usize> {
    let mut n = 0;
    for id in src.store.ids() {
        let name = src.store.name(id);
        if !name.starts_with(prefix) {
            continue;
        }
        let did = dst.store.find(name).ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))?;
        if dst.store.get(did).shape() != src.store.get(id).shape() {
            return Err(Error::ConfigMismatch(format!("parameter {name} has the wrong shape")));
        }
        *dst.store.get_mut(did) = src.store.get(id).clone();
        n += 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn roundtrip_preserves_weights() {
        let m = Model::new(&ModelConfig::smoke(Variant::Full), 3).unwrap();
        let ck = Checkpoint::from_model(&m, 12, TrainingState::default());
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().to_model().unwrap();
        for id in m.store.ids() {
            assert_eq!(m.store.get(id), back.store.get(id));
        }
    }

    #[test]
    fn wrong_version_is_rejected() {
        let m = Model::new(&ModelConfig::smoke(Variant::OneStage), 3).unwrap();
        let mut ck = Checkpoint::from_model(&m, 0, TrainingState::default());
        ck.version = 99;
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()), Err(Error::Version(_))));
    }
}
