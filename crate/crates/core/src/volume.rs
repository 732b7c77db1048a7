//! Axis-aligned 3D scalar grids with physical metadata.
//!
//! Storage is 32-bit with `x` as the fastest-varying axis:
//! `index = (k * ny + j) * nx + i` for `dims = [nx, ny, nz]`.
//!
//! Sampling uses normalized coordinates: the voxel center `i` of an axis with
//! `n` voxels sits at `i / (n - 1)`, so every grid spans `[0, 1]^3`.
//! Off-grid queries are clamped to the border (replicate).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;

/// Voxels per axis, `[nx, ny, nz]`.
pub type Dims = [usize; 3];

/// A point in normalized grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCoord(pub [f64; 3]);

impl NormalizedCoord {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self([x, y, z])
    }

    /// Normalized position of voxel center `(i, j, k)` on a grid.
    pub fn of_voxel(dims: Dims, i: usize, j: usize, k: usize) -> Self {
        Self([node_coord(i, dims[0]), node_coord(j, dims[1]), node_coord(k, dims[2])])
    }
}

#[inline]
pub(crate) fn node_coord(i: usize, n: usize) -> f64 {
    i as f64 / (n - 1) as f64
}

fn check_geometry(dims: Dims, spacing: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidVolume(format!("dims must be >= 2 per axis, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

/// Physical frame shared by [`Volume`] and [`LabelVolume`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: Dims,
    /// Millimetres per voxel.
    pub spacing: [f64; 3],
    /// Physical position (mm) of voxel `(0, 0, 0)`.
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: Dims, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_geometry(dims, spacing)?;
        Ok(Self { dims, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: Dims) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        kernels::voxel_count(self.dims)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same physical extent `(dims - 1) * spacing` on a different grid.
    pub fn resized(&self, new_dims: Dims) -> Result<Self> {
        let mut spacing = self.spacing;
        for a in 0..3 {
            spacing[a] = self.spacing[a] * (self.dims[a] - 1) as f64 / (new_dims[a].max(2) - 1) as f64;
        }
        Self::new(new_dims, spacing, self.origin)
    }

    pub fn physical_to_normalized(&self, p: [f64; 3]) -> NormalizedCoord {
        NormalizedCoord(std::array::from_fn(|a| {
            (p[a] - self.origin[a]) / (self.spacing[a] * (self.dims[a] - 1) as f64)
        }))
    }

    pub fn normalized_to_physical(&self, p: NormalizedCoord) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + p.0[a] * self.spacing[a] * (self.dims[a] - 1) as f64)
    }
}

/// A 3D scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geom: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::InvalidVolume(format!(
                "expected {} voxels for dims {:?}, got {}",
                geom.len(),
                geom.dims,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite value at index {pos}")));
        }
        Ok(Self { geom, data })
    }

    /// Unit-spacing volume built from a function of voxel indices.
    pub fn from_fn(dims: Dims, f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        Self::from_fn_with(Geometry::unit(dims)?, f)
    }

    pub fn from_fn_with(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = geom.dims;
        let mut data = Vec::with_capacity(geom.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(geom, data)
    }

    pub fn filled(geom: Geometry, value: f32) -> Result<Self> {
        Self::new(geom, vec![value; geom.len()])
    }

    pub(crate) fn from_parts_unchecked(geom: Geometry, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), geom.len());
        Self { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> Dims {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geom.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[kernels::linear_index(self.geom.dims, i, j, k)]
    }

    /// Same geometry, new values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.geom, data)
    }

    /// Same geometry, values mapped voxelwise.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        self.with_data(self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Trilinear interpolation at a normalized coordinate with border-replicate
/// clamping.
pub fn trilinear_sample(v: &Volume, p: NormalizedCoord) -> f64 {
    kernels::sample_point(&v.data, v.geom.dims, p.0)
}

/// Resamples onto `new_dims` nodes spanning the same normalized extent.
/// Spacing is rescaled so the physical extent is preserved.
pub fn resample_to_shape(v: &Volume, new_dims: Dims) -> Result<Volume> {
    let geom = v.geom.resized(new_dims)?;
    let data = kernels::resample(&v.data, 1, v.geom.dims, new_dims);
    Ok(Volume::from_parts_unchecked(geom, data))
}

/// Spatial derivatives in normalized units: central differences inside,
/// one-sided at the border.
pub fn gradient_central(v: &Volume) -> Result<[Volume; 3]> {
    let dims = v.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::shape(format!("gradient needs dims >= 3, got {dims:?}")));
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let grads = std::array::from_fn(|axis| {
        let n = dims[axis];
        let scale = (n - 1) as f64;
        let mut out = vec![0.0f32; v.data.len()];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let idx = kernels::linear_index(dims, i, j, k);
                    let pos = [i, j, k][axis];
                    let s = strides[axis];
                    let d = if pos == 0 {
                        v.data[idx + s] as f64 - v.data[idx] as f64
                    } else if pos == n - 1 {
                        v.data[idx] as f64 - v.data[idx - s] as f64
                    } else {
                        0.5 * (v.data[idx + s] as f64 - v.data[idx - s] as f64)
                    };
                    out[idx] = (d * scale) as f32;
                }
            }
        }
        Volume::from_parts_unchecked(v.geom, out)
    });
    Ok(grads)
}

/// Non-negative integer label image; label 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    geom: Geometry,
    data: Vec<u32>,
}

impl LabelVolume {
    pub fn new(geom: Geometry, data: Vec<u32>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::InvalidVolume(format!(
                "expected {} labels for dims {:?}, got {}",
                geom.len(),
                geom.dims,
                data.len()
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> u32) -> Result<Self> {
        let [nx, ny, nz] = geom.dims;
        let mut data = Vec::with_capacity(geom.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(geom, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> Dims {
        self.geom.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u32 {
        self.data[kernels::linear_index(self.geom.dims, i, j, k)]
    }

    /// Distinct non-zero labels, ascending.
    pub fn labels(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.data.iter().copied().filter(|&x| x != 0).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Label ids as a float image (for writing through float formats).
    pub fn to_volume(&self) -> Volume {
        Volume::from_parts_unchecked(self.geom, self.data.iter().map(|&x| x as f32).collect())
    }

    /// Rounds a float image to labels; negative or non-integral values are rejected.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        let data = v
            .data()
            .iter()
            .map(|&x| {
                if x < 0.0 || x.fract() != 0.0 {
                    Err(Error::InvalidVolume(format!("{x} is not a label id")))
                } else {
                    Ok(x as u32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(*v.geometry(), data)
    }
}
