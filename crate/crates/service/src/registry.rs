//! Registered checkpoints, persisted as `registry.json` in the registry
//! directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use priorpath::checkpoint::{Checkpoint, ModelKind};
use priorpath::data::Stain;
use serde::{Deserialize, Serialize};

use crate::{ServiceError, ServiceResult};

pub const REGISTRY_FILE: &str = "registry.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Coarse mask to fine mask.
    Fine,
    /// Fine mask to RGB image.
    Rgb,
}

impl Stage {
    pub fn of(kind: ModelKind) -> Self {
        if kind.is_mask_model() {
            Stage::Fine
        } else {
            Stage::Rgb
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub model_id: String,
    pub stage: Stage,
    pub kind: ModelKind,
    pub checkpoint: PathBuf,
    pub width: usize,
    pub height: usize,
    pub dataset: String,
    pub stain: Stain,
}

#[derive(Default, Serialize, Deserialize)]
struct RegistryFile {
    models: Vec<ModelEntry>,
}

/// Loaded registry: entries in registration order plus their checkpoints.
pub struct Registry {
    dir: PathBuf,
    entries: Vec<ModelEntry>,
    loaded: HashMap<String, Arc<Checkpoint>>,
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

impl Registry {
    /// Opens (or starts) the registry in `dir`, loading every checkpoint.
    pub fn open(dir: impl Into<PathBuf>) -> ServiceResult<Self> {
        let dir = dir.into();
        let path = dir.join(REGISTRY_FILE);
        let file: RegistryFile = if path.exists() {
            let text = fs::read_to_string(&path)
                .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| ServiceError::BadRequest(format!("{}: {e}", path.display())))?
        } else if dir.is_dir() {
            RegistryFile::default()
        } else {
            return Err(ServiceError::NotFound(format!(
                "registry directory {}",
                dir.display()
            )));
        };
        let mut loaded = HashMap::new();
        for e in &file.models {
            let ck = Checkpoint::load(resolve(&dir, &e.checkpoint))?;
            loaded.insert(e.model_id.clone(), Arc::new(ck));
        }
        Ok(Self {
            dir,
            entries: file.models,
            loaded,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn list(&self) -> &[ModelEntry] {
        &self.entries
    }

    pub fn get(&self, model_id: &str) -> ServiceResult<(&ModelEntry, Arc<Checkpoint>)> {
        let entry = self
            .entries
            .iter()
            .find(|e| e.model_id == model_id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown model `{model_id}`")))?;
        Ok((entry, Arc::clone(&self.loaded[model_id])))
    }

    /// Adds a checkpoint under `model_id` and rewrites the registry file.
    pub fn register(
        &mut self,
        model_id: &str,
        checkpoint: impl AsRef<Path>,
        dataset: &str,
        stain: Stain,
    ) -> ServiceResult<ModelEntry> {
        if model_id.is_empty()
            || !model_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(ServiceError::BadRequest(format!(
                "model id `{model_id}` must be non-empty [A-Za-z0-9._-]"
            )));
        }
        if self.loaded.contains_key(model_id) {
            return Err(ServiceError::Conflict(format!(
                "model id `{model_id}` is already registered"
            )));
        }
        let path = checkpoint.as_ref().to_path_buf();
        let ck = Checkpoint::load(resolve(&self.dir, &path))?;
        let entry = ModelEntry {
            model_id: model_id.into(),
            stage: Stage::of(ck.kind),
            kind: ck.kind,
            checkpoint: path,
            width: ck.config.patch_width,
            height: ck.config.patch_height,
            dataset: dataset.into(),
            stain,
        };
        self.entries.push(entry.clone());
        self.loaded.insert(model_id.into(), Arc::new(ck));
        self.save()?;
        Ok(entry)
    }

    fn save(&self) -> ServiceResult<()> {
        let path = self.dir.join(REGISTRY_FILE);
        let text = serde_json::to_string_pretty(&RegistryFile {
            models: self.entries.clone(),
        })
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
        fs::write(&path, text + "\n")
            .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))
    }
}
