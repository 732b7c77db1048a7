use crate::error::{Error, Result};
use crate::kernels;
use crate::transform::TransformMap;
use crate::volume::{Dims, Geometry, Volume};

/// Planar multi-channel 3D buffer: `[channel][z][y][x]`, `x` fastest.
///
/// Unlike [`Volume`], singleton axes are allowed (deep pooling levels of a
/// small grid).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, dims: Dims, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.contains(&0) {
            return Err(Error::shape(format!("empty tensor {channels}x{dims:?}")));
        }
        if data.len() != channels * kernels::voxel_count(dims) {
            return Err(Error::shape(format!(
                "tensor {channels}x{dims:?} needs {} values, got {}",
                channels * kernels::voxel_count(dims),
                data.len()
            )));
        }
        Ok(Self { channels, dims, data })
    }

    pub(crate) fn from_raw(channels: usize, dims: Dims, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), channels * kernels::voxel_count(dims));
        Self { channels, dims, data }
    }

    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self::from_raw(channels, dims, vec![0.0; channels * kernels::voxel_count(dims)])
    }

    pub fn from_volume(v: &Volume) -> Self {
        Self::from_raw(1, v.dims(), v.data().to_vec())
    }

    pub fn from_map(m: &TransformMap) -> Self {
        Self::from_raw(3, m.dims(), m.data().to_vec())
    }

    pub fn to_map(&self) -> Result<TransformMap> {
        if self.channels != 3 {
            return Err(Error::shape(format!("a map needs 3 channels, got {}", self.channels)));
        }
        TransformMap::new(self.dims, self.data.clone())
    }

    pub fn to_volume(&self, geom: Geometry) -> Result<Volume> {
        if self.channels != 1 || geom.dims != self.dims {
            return Err(Error::shape(format!(
                "cannot view {}x{:?} as a volume on {:?}",
                self.channels, self.dims, geom.dims
            )));
        }
        Volume::new(geom, self.data.clone())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        kernels::voxel_count(self.dims)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }
}
