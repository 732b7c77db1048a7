//! Model checkpoints: a JSON manifest plus a little-endian f32 blob holding
//! every parameter back to back in manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{f32_from_le, f32_le_bytes, read_file, read_json, write_json};
use crate::error::{Error, Result};
use crate::network::{ModelConfig, RegistrationModel};
use crate::trainer::Phase;

pub const CHECKPOINT_FORMAT: &str = "iconforge-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub dtype: String,
    pub phase: Phase,
    pub epoch: usize,
    pub step2_enabled: bool,
    pub model: ModelConfig,
    /// Blob file name, relative to the manifest.
    pub blob: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &RegistrationModel, phase: Phase, epoch: usize, blob: String) -> Self {
        let tensors: Vec<_> =
            model.store().iter().map(|(_, p)| (p.name.clone(), p.shape.clone(), p.value.clone())).collect();
        Self {
            manifest: CheckpointManifest {
                format: CHECKPOINT_FORMAT.into(),
                names: tensors.iter().map(|t| t.0.clone()).collect(),
                shapes: tensors.iter().map(|t| t.1.clone()).collect(),
                dtype: "float32-le".into(),
                phase,
                epoch,
                step2_enabled: model.step2_enabled(),
                model: *model.config(),
                blob,
            },
            tensors,
        }
    }

    /// Rebuilds the model with fresh optimizer state.
    pub fn to_model(&self) -> Result<RegistrationModel> {
        let mut model = RegistrationModel::new(self.manifest.model)?;
        model.load_parameters(&self.tensors, self.manifest.step2_enabled)?;
        Ok(model)
    }
}

fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

pub fn write_checkpoint(path: &Path, model: &RegistrationModel, phase: Phase, epoch: usize) -> Result<()> {
    let blob = blob_path(path);
    let name = blob
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let ck = Checkpoint::from_model(model, phase, epoch, name);
    std::fs::write(&blob, f32_le_bytes(ck.tensors.iter().flat_map(|t| t.2.iter().copied())))?;
    write_json(&ck.manifest, path)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = read_json(path)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "float32-le" {
        return Err(Error::Format(format!(
            "unsupported checkpoint format `{}` / dtype `{}`",
            manifest.format, manifest.dtype
        )));
    }
    if manifest.names.len() != manifest.shapes.len() {
        return Err(Error::Format("checkpoint names and shapes differ in length".into()));
    }
    let blob = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let total: usize = manifest.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let flat = f32_from_le(&read_file(&blob)?, total, &blob)?;
    let mut at = 0;
    let tensors = manifest
        .names
        .iter()
        .zip(&manifest.shapes)
        .map(|(n, s)| {
            let len: usize = s.iter().product();
            at += len;
            (n.clone(), s.clone(), flat[at - len..at].to_vec())
        })
        .collect();
    Ok(Checkpoint { manifest, tensors })
}

pub fn load_model(path: &Path) -> Result<(RegistrationModel, CheckpointManifest)> {
    let ck = read_checkpoint(path)?;
    Ok((ck.to_model()?, ck.manifest))
}
