//! On-disk formats: NIfTI-1 volumes, raw volumes with JSON sidecars,
//! transform maps, landmark CSVs, checkpoints and dataset manifests.
//!
//! Raw payloads are always little-endian and stored x-fastest. A sidecar
//! lives next to its payload with `.json` appended to the full file name.

mod checkpoint;
mod manifest;
pub mod nifti;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_model, read_checkpoint, write_checkpoint, Checkpoint, CheckpointManifest};
pub use manifest::{load_manifest, DatasetEntry, DatasetManifest, ManifestConfig};
pub use nifti::{read_nifti, read_nifti_labels, read_nifti_with_meta, write_nifti, write_nifti_with_meta, NiftiMeta};

use crate::error::{Error, Result};
use crate::eval::LandmarkSet;
use crate::transform::TransformMap;
use crate::volume::{Dims, Geometry, LabelVolume, Volume};

/// Identifier stored in every transform sidecar.
pub const TRANSFORM_CONVENTION: &str = "pullback-normalized-v1";

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().map(|n| n.to_string_lossy().to_ascii_lowercase()).unwrap_or_default();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn f32_le_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn f32_from_le(bytes: &[u8], expected: usize, path: &Path) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!("{}: {} bytes, expected {}", path.display(), bytes.len(), expected * 4)));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RawDtype {
    Float32Le,
    Uint32Le,
}

/// Sidecar of a raw volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: RawDtype,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}

fn raw_header(g: &Geometry, dtype: RawDtype) -> RawHeader {
    RawHeader { dims: g.dims, spacing: g.spacing, origin: g.origin, dtype }
}

pub fn write_raw_volume(v: &Volume, path: &Path) -> Result<()> {
    std::fs::write(path, f32_le_bytes(v.data().iter().copied()))?;
    write_json(&raw_header(v.geometry(), RawDtype::Float32Le), &sidecar_path(path))
}

fn read_raw(path: &Path, want: RawDtype) -> Result<(Geometry, Vec<u8>)> {
    let h: RawHeader = read_json(&sidecar_path(path))?;
    if h.dtype != want {
        return Err(Error::Format(format!("{}: dtype {:?}, expected {want:?}", path.display(), h.dtype)));
    }
    Ok((Geometry::new(h.dims, h.spacing, h.origin)?, read_file(path)?))
}

pub fn read_raw_volume(path: &Path) -> Result<Volume> {
    let (g, bytes) = read_raw(path, RawDtype::Float32Le)?;
    Volume::new(g, f32_from_le(&bytes, g.len(), path)?)
}

pub fn write_raw_labels(lv: &LabelVolume, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = lv.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    write_json(&raw_header(lv.geometry(), RawDtype::Uint32Le), &sidecar_path(path))
}

pub fn read_raw_labels(path: &Path) -> Result<LabelVolume> {
    let (g, bytes) = read_raw(path, RawDtype::Uint32Le)?;
    if bytes.len() != g.len() * 4 {
        return Err(Error::Format(format!("{}: {} bytes for {} labels", path.display(), bytes.len(), g.len())));
    }
    LabelVolume::new(g, bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// NIfTI for `.nii`/`.nii.gz`, raw-with-sidecar otherwise.
pub fn read_volume(path: &Path) -> Result<Volume> {
    if is_nifti(path) {
        read_nifti(path)
    } else {
        read_raw_volume(path)
    }
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    if is_nifti(path) {
        write_nifti(v, path)
    } else {
        write_raw_volume(v, path)
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    if is_nifti(path) {
        read_nifti_labels(path)
    } else {
        read_raw_labels(path)
    }
}

pub fn write_labels(lv: &LabelVolume, path: &Path) -> Result<()> {
    if is_nifti(path) {
        write_nifti(&lv.to_volume(), path)
    } else {
        write_raw_labels(lv, path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformHeader {
    pub dims: Dims,
    pub convention: String,
}

/// Writes `phi` as `dims[0]*dims[1]*dims[2]` records of three
/// little-endian f32 `(x, y, z)` normalized coordinates, x-fastest.
pub fn write_transform(phi: &TransformMap, path: &Path) -> Result<()> {
    let n = phi.node_count();
    let d = phi.data();
    std::fs::write(path, f32_le_bytes((0..n).flat_map(|v| [d[v], d[n + v], d[2 * n + v]])))?;
    write_json(&TransformHeader { dims: phi.dims(), convention: TRANSFORM_CONVENTION.into() }, &sidecar_path(path))
}

pub fn read_transform(path: &Path) -> Result<TransformMap> {
    let h: TransformHeader = read_json(&sidecar_path(path))?;
    if h.convention != TRANSFORM_CONVENTION {
        return Err(Error::Format(format!("unknown transform convention `{}`", h.convention)));
    }
    let n = h.dims.iter().product::<usize>();
    let records = f32_from_le(&read_file(path)?, 3 * n, path)?;
    let mut planar = vec![0.0f32; 3 * n];
    for (v, r) in records.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * n + v] = r[c];
        }
    }
    TransformMap::new(h.dims, planar)
}

/// Landmarks as `x,y,z` rows in millimetres. A first row that does not
/// parse as numbers is treated as a header; blank lines are ignored.
pub fn parse_landmarks(text: &str) -> Result<LandmarkSet> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        match parsed {
            Some(v) if v.len() == 3 => points.push([v[0], v[1], v[2]]),
            None if n == 0 => continue,
            _ => return Err(Error::Format(format!("landmark line {}: `{line}`", n + 1))),
        }
    }
    LandmarkSet::new(points)
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    parse_landmarks(text)
}

/// Writes with a header row; values use the shortest exact decimal form.
pub fn write_landmarks(lm: &LandmarkSet, path: &Path) -> Result<()> {
    let mut text = String::from("x,y,z\n");
    for p in &lm.points {
        text.push_str(&format!("{:?},{:?},{:?}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, text)?;
    Ok(())
}
