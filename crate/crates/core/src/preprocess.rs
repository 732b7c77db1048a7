//! Intensity and grid normalization applied identically before training and
//! inference.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::transform::TransformMap;
use crate::volume::{resample_to_shape, Geometry, Volume};

/// Default network input side length.
pub const DEFAULT_CANONICAL_SIDE: usize = 175;

pub const CT_MIN_HU: f32 = -1000.0;
pub const CT_MAX_HU: f32 = 1000.0;

/// Intensity normalization applied before prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ct,
    Mri,
    #[default]
    None,
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ct" => Ok(Modality::Ct),
            "mri" => Ok(Modality::Mri),
            "none" => Ok(Modality::None),
            other => Err(format!("unknown modality `{other}` (expected ct, mri or none)")),
        }
    }
}

/// Clips to [-1000, 1000] HU and maps linearly onto [0, 1].
pub fn normalize_ct(v: &Volume) -> Result<Volume> {
    let span = CT_MAX_HU - CT_MIN_HU;
    v.map(|x| (x.clamp(CT_MIN_HU, CT_MAX_HU) - CT_MIN_HU) / span)
}

/// Linearly interpolated order statistic at rank `q * (n - 1)`.
pub fn percentile(values: &[f32], q: f64) -> f64 {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = rank - lo as f64;
    (1.0 - t) * sorted[lo] as f64 + t * sorted[hi] as f64
}

/// Clips to `[0, p99]` and divides by the 99th percentile.
pub fn normalize_mri(v: &Volume) -> Result<Volume> {
    let p99 = percentile(v.data(), 0.99);
    if p99 <= 0.0 {
        return v.map(|_| 0.0);
    }
    v.map(|x| ((x as f64).clamp(0.0, p99) / p99) as f32)
}

pub fn normalize(v: &Volume, modality: Modality) -> Result<Volume> {
    match modality {
        Modality::Ct => normalize_ct(v),
        Modality::Mri => normalize_mri(v),
        Modality::None => Ok(v.clone()),
    }
}

/// Resamples onto the `side^3` network grid.
pub fn to_canonical(v: &Volume, side: usize) -> Result<Volume> {
    resample_to_shape(v, [side; 3])
}

/// The one preprocessing entry point shared by training and inference:
/// intensity normalization followed by canonical resampling.
pub fn prepare(v: &Volume, modality: Modality, side: usize) -> Result<Volume> {
    to_canonical(&normalize(v, modality)?, side)
}

/// Re-grids a canonical-resolution map onto the original image grid.
/// Normalized coordinates are shared, so only the node positions change.
pub fn map_to_original(phi: &TransformMap, original: &Geometry) -> Result<TransformMap> {
    phi.resampled(original.dims)
}
