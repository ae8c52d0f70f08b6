//! Checkpoints: one safetensors archive holding the trainable weights and optimizer moments, with
//! the JSON manifest embedded under the `manifest` metadata key and mirrored to a `.json` sidecar.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use wavegms_autodiff::{safetensors, Float};

use super::TrainConfig;
use crate::error::{io_err, Error, Result};
use crate::pipeline::ModelConfig;
use crate::vae::VaeSettings;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub epochs_completed: usize,
    pub step: usize,
    pub optimizer_steps: u64,
    /// Learning rate of the last completed epoch.
    pub lr: f64,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub vae: VaeSettings,
    pub vae_fingerprint: String,
    /// Name and shape of every stored tensor.
    pub tensors: BTreeMap<String, Vec<usize>>,
}

pub struct Checkpoint<F: Float> {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, ArrayD<F>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl<F: Float> Checkpoint<F> {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        let meta = BTreeMap::from([(MANIFEST_KEY.to_string(), json.clone())]);
        safetensors::save(path, &self.tensors, &meta)?;
        let side = sidecar_path(path);
        std::fs::write(&side, json).map_err(io_err(&side))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
        }
        let st = safetensors::load::<F>(path)?;
        let json = st
            .metadata
            .get(MANIFEST_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("{} has no manifest", path.display())))?;
        let manifest: CheckpointManifest = serde_json::from_str(json)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        for (name, shape) in &manifest.tensors {
            match st.tensors.get(name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                Some(a) => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: manifest says {shape:?}, archive holds {:?}",
                        a.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("{name} listed in the manifest but not stored"))),
            }
        }
        Ok(Checkpoint {
            manifest,
            tensors: st.tensors,
        })
    }

    /// Tensors that belong to the model (everything except optimizer state).
    pub fn model_tensors(&self) -> BTreeMap<String, ArrayD<F>> {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("optim."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}
