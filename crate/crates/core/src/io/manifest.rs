//! Dataset manifests: JSON describing training datasets by file path.
//!
//! ```json
//! {
//!   "datasets": [
//!     {"name": "lung", "mode": "intra", "modality": "ct",
//!      "volumes": ["insp.nii.gz", "exp.nii.gz"], "pairs": [[0, 1], [1, 0]]}
//!   ],
//!   "config": {"lr": 5e-5, "canonical_side": 64}
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_file, read_labels, read_landmarks, read_volume};
use crate::error::{Error, Result};
use crate::eval::LandmarkSet;
use crate::network::ModelConfig;
use crate::preprocess::Modality;
use crate::trainer::{DatasetSpec, PairingMode, TrainConfig};
use crate::volume::LabelVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub mode: PairingMode,
    #[serde(default, alias = "preprocessing")]
    pub modality: Modality,
    pub volumes: Vec<PathBuf>,
    #[serde(default)]
    pub pairs: Vec<(usize, usize)>,
    /// Empty, or one label map per volume.
    #[serde(default)]
    pub labels: Vec<PathBuf>,
    /// Empty, or one landmark file per volume.
    #[serde(default)]
    pub landmarks: Vec<PathBuf>,
}

/// Optional overrides of built-in defaults; command-line flags override
/// these in turn.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestConfig {
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub canonical_side: Option<usize>,
    pub pairs_per_dataset: Option<usize>,
    pub epochs_phase1: Option<usize>,
    pub epochs_phase2: Option<usize>,
    pub seed: Option<u64>,
    pub base_channels: Option<usize>,
}

impl ManifestConfig {
    pub fn apply(&self, train: &mut TrainConfig, model: &mut ModelConfig) {
        if let Some(x) = self.lambda {
            train.loss.lambda = x;
        }
        if let Some(x) = self.lr {
            train.lr = x;
        }
        if let Some(x) = self.pairs_per_dataset {
            train.pairs_per_dataset = x;
        }
        if let Some(x) = self.epochs_phase1 {
            train.epochs_phase1 = x;
        }
        if let Some(x) = self.epochs_phase2 {
            train.epochs_phase2 = x;
        }
        if let Some(x) = self.seed {
            train.seed = x;
            model.seed = x;
        }
        if let Some(x) = self.canonical_side {
            model.canonical_side = x;
        }
        if let Some(x) = self.base_channels {
            model.unet.base_channels = x;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub datasets: Vec<DatasetEntry>,
    #[serde(default)]
    pub config: ManifestConfig,
}

impl DatasetManifest {
    /// Reads every volume into memory.
    pub fn load_datasets(&self) -> Result<Vec<DatasetSpec>> {
        self.datasets
            .iter()
            .map(|d| {
                let spec = DatasetSpec {
                    name: d.name.clone(),
                    mode: d.mode,
                    modality: d.modality,
                    volumes: d.volumes.iter().map(|p| read_volume(p)).collect::<Result<_>>()?,
                    pairs: d.pairs.clone(),
                };
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }

    pub fn load_labels(&self, dataset: usize) -> Result<Vec<LabelVolume>> {
        self.datasets[dataset].labels.iter().map(|p| read_labels(p)).collect()
    }

    pub fn load_landmarks(&self, dataset: usize) -> Result<Vec<LandmarkSet>> {
        self.datasets[dataset].landmarks.iter().map(|p| read_landmarks(p)).collect()
    }
}

/// Parses a manifest, resolves its paths and checks that every referenced
/// file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut m: DatasetManifest = serde_json::from_slice(&read_file(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for d in &mut m.datasets {
        for (kind, list) in [("labels", &d.labels), ("landmarks", &d.landmarks)] {
            if !list.is_empty() && list.len() != d.volumes.len() {
                return Err(Error::Config(format!(
                    "dataset `{}` lists {} {kind} for {} volumes",
                    d.name,
                    list.len(),
                    d.volumes.len()
                )));
            }
        }
        for p in d.volumes.iter_mut().chain(&mut d.labels).chain(&mut d.landmarks) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
    }
    Ok(m)
}
