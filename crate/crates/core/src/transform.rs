//! Dense transformation maps in normalized coordinates.
//!
//! A [`TransformMap`] stores, at every node of the target grid, the
//! normalized source coordinate it pulls from: the warped image is
//! `I ∘ Φ`, i.e. `warp(I, Φ)(x) = I(Φ(x))`.

use crate::error::{Error, Result};
use crate::kernels;
use crate::volume::{Dims, Geometry, LabelVolume, NormalizedCoord, Volume};

/// Identifier written to transform sidecars.
pub const MAP_CONVENTION: &str = "pullback-normalized-v1";

/// A dense map `Φ: [0,1]^3 -> R^3` sampled on a grid.
///
/// Values are planar: all x-components, then y, then z, each in the
/// volume layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformMap {
    dims: Dims,
    data: Vec<f32>,
}

impl TransformMap {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::shape(format!("map dims must be >= 2, got {dims:?}")));
        }
        if data.len() != 3 * kernels::voxel_count(dims) {
            return Err(Error::shape(format!(
                "map {:?} needs {} values, got {}",
                dims,
                3 * kernels::voxel_count(dims),
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidVolume("non-finite map value".into()));
        }
        Ok(Self { dims, data })
    }

    pub(crate) fn from_parts_unchecked(dims: Dims, data: Vec<f32>) -> Self {
        Self { dims, data }
    }

    /// Builds a map from a function of node indices returning a normalized
    /// source coordinate.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Result<Self> {
        let n = kernels::voxel_count(dims);
        let mut data = vec![0.0f32; 3 * n];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let v = kernels::linear_index(dims, i, j, k);
                    let p = f(i, j, k);
                    for a in 0..3 {
                        data[a * n + v] = p[a] as f32;
                    }
                }
            }
        }
        Self::new(dims, data)
    }

    /// Identity plus a displacement given in normalized units.
    pub fn from_displacement(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Result<Self> {
        Self::from_fn(dims, |i, j, k| {
            let d = f(i, j, k);
            let x = NormalizedCoord::of_voxel(dims, i, j, k).0;
            [x[0] + d[0], x[1] + d[1], x[2] + d[2]]
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn node_count(&self) -> usize {
        kernels::voxel_count(self.dims)
    }

    /// Stored value at node `(i, j, k)`.
    pub fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let n = self.node_count();
        let v = kernels::linear_index(self.dims, i, j, k);
        [self.data[v] as f64, self.data[n + v] as f64, self.data[2 * n + v] as f64]
    }

    /// Displacement `Φ(x) - x` at node `(i, j, k)`, normalized units.
    pub fn displacement_at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let p = self.at(i, j, k);
        let x = NormalizedCoord::of_voxel(self.dims, i, j, k).0;
        [p[0] - x[0], p[1] - x[1], p[2] - x[2]]
    }

    /// Trilinear evaluation of the value field at an arbitrary coordinate
    /// (border-replicate outside the grid).
    pub fn evaluate(&self, p: NormalizedCoord) -> [f64; 3] {
        let n = self.node_count();
        std::array::from_fn(|a| kernels::sample_point(&self.data[a * n..(a + 1) * n], self.dims, p.0))
    }

    /// The same map re-gridded onto `new_dims` by trilinear interpolation of
    /// its values.
    pub fn resampled(&self, new_dims: Dims) -> Result<Self> {
        if new_dims.iter().any(|&d| d < 2) {
            return Err(Error::shape(format!("map dims must be >= 2, got {new_dims:?}")));
        }
        Ok(Self::from_parts_unchecked(new_dims, kernels::resample(&self.data, 3, self.dims, new_dims)))
    }

    /// Largest displacement magnitude measured in voxels of this grid.
    pub fn max_displacement_voxels(&self) -> f64 {
        let mut m = 0.0f64;
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let d = self.displacement_at(i, j, k);
                    let s: f64 = (0..3).map(|a| (d[a] * (self.dims[a] - 1) as f64).powi(2)).sum();
                    m = m.max(s.sqrt());
                }
            }
        }
        m
    }
}

/// `Φ(x) = x` on every node.
pub fn identity_map(dims: Dims) -> Result<TransformMap> {
    TransformMap::from_fn(dims, |i, j, k| NormalizedCoord::of_voxel(dims, i, j, k).0)
}

/// `outer ∘ inner`, on the inner map's grid.
pub fn compose(outer: &TransformMap, inner: &TransformMap) -> TransformMap {
    let data = kernels::sample_field(&outer.data, 3, outer.dims, &inner.data, inner.dims);
    TransformMap::from_parts_unchecked(inner.dims, data)
}

fn output_geometry(v: &Volume, phi: &TransformMap, reference: Option<&Geometry>) -> Result<Geometry> {
    match reference {
        Some(g) if g.dims != phi.dims => {
            Err(Error::shape(format!("reference grid {:?} does not match map grid {:?}", g.dims, phi.dims)))
        }
        Some(g) => Ok(*g),
        None => v.geometry().resized(phi.dims),
    }
}

/// `v ∘ Φ` on the map's grid. Output geometry comes from `reference` (the
/// target image) or, when absent, from `v` re-gridded to the map's dims.
pub fn warp(v: &Volume, phi: &TransformMap, reference: Option<&Geometry>) -> Result<Volume> {
    let geom = output_geometry(v, phi, reference)?;
    let data = kernels::sample_field(v.data(), 1, v.dims(), &phi.data, phi.dims);
    Ok(Volume::from_parts_unchecked(geom, data))
}

/// Nearest-neighbour label pull-back (label ids are never interpolated).
pub fn warp_labels(lv: &LabelVolume, phi: &TransformMap, reference: Option<&Geometry>) -> Result<LabelVolume> {
    let geom = match reference {
        Some(g) if g.dims != phi.dims => {
            return Err(Error::shape(format!("reference grid {:?} does not match map grid {:?}", g.dims, phi.dims)))
        }
        Some(g) => *g,
        None => lv.geometry().resized(phi.dims)?,
    };
    let src = lv.dims();
    let nearest = |p: f64, n: usize| -> usize {
        let u = (p * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
        u.round() as usize
    };
    LabelVolume::from_fn(geom, |i, j, k| {
        let p = phi.at(i, j, k);
        lv.get(nearest(p[0], src[0]), nearest(p[1], src[1]), nearest(p[2], src[2]))
    })
}

/// Jacobians (central differences, normalized units) at interior nodes.
#[derive(Clone, Debug)]
pub struct JacobianField {
    /// Interior extent, `dims - 2` per axis.
    pub dims: Dims,
    /// One matrix per interior node, `jac[row][col] = dΦ_row / dx_col`.
    pub mats: Vec<[[f64; 3]; 3]>,
}

impl JacobianField {
    pub fn determinants(&self) -> impl Iterator<Item = f64> + '_ {
        self.mats.iter().map(det3)
    }
}

pub fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn jacobian_field(phi: &TransformMap) -> Result<JacobianField> {
    let dims = phi.dims;
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::shape(format!("jacobian needs dims >= 3, got {dims:?}")));
    }
    let n = phi.node_count();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut mats = Vec::with_capacity((dims[0] - 2) * (dims[1] - 2) * (dims[2] - 2));
    for k in 1..dims[2] - 1 {
        for j in 1..dims[1] - 1 {
            for i in 1..dims[0] - 1 {
                let v = kernels::linear_index(dims, i, j, k);
                let mut m = [[0.0; 3]; 3];
                for (row, mrow) in m.iter_mut().enumerate() {
                    let c = &phi.data[row * n..(row + 1) * n];
                    for col in 0..3 {
                        let s = strides[col];
                        mrow[col] = 0.5 * (c[v + s] as f64 - c[v - s] as f64) * (dims[col] - 1) as f64;
                    }
                }
                mats.push(m);
            }
        }
    }
    Ok(JacobianField { dims: dims.map(|d| d - 2), mats })
}

/// Fraction of interior nodes whose Jacobian determinant is negative.
pub fn neg_jacobian_fraction(phi: &TransformMap) -> Result<f64> {
    let jf = jacobian_field(phi)?;
    let neg = jf.determinants().filter(|&d| d < 0.0).count();
    Ok(neg as f64 / jf.mats.len() as f64)
}
