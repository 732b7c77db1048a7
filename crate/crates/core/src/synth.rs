//! Synthetic volumes, deformations and labelled phantoms for tests,
//! benchmarks and desk-scale experiments.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::kernels;
use crate::transform::{warp, warp_labels, TransformMap};
use crate::volume::{Dims, Geometry, LabelVolume, NormalizedCoord, Volume};

/// Separable Gaussian blur of one plane, border-replicate, kernel truncated
/// at 3 sigma. `sigma <= 0` returns the input.
pub fn gaussian_smooth(data: &[f32], dims: Dims, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= norm);
    let mut cur: Vec<f64> = data.iter().map(|&x| x as f64).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let v = kernels::linear_index(dims, i, j, k);
                    let pos = [i, j, k][axis] as isize;
                    let base = v as isize - pos * strides[axis] as isize;
                    let mut acc = 0.0;
                    for (t, w) in taps.iter().enumerate() {
                        let q = (pos + t as isize - radius).clamp(0, n - 1);
                        acc += w * cur[(base + q * strides[axis] as isize) as usize];
                    }
                    next[v] = acc;
                }
            }
        }
        cur = next;
    }
    cur.into_iter().map(|x| x as f32).collect()
}

fn normal_field<R: Rng>(n: usize, rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Gaussian-smoothed white noise, generated with a margin so the result is
/// statistically uniform up to the borders.
fn smooth_noise<R: Rng>(dims: Dims, sigma: f64, rng: &mut R) -> Vec<f32> {
    let pad = (3.0 * sigma.max(0.0)).ceil() as usize;
    let big = dims.map(|d| d + 2 * pad);
    let full = gaussian_smooth(&normal_field(kernels::voxel_count(big), rng), big, sigma);
    let mut out = Vec::with_capacity(kernels::voxel_count(dims));
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out.push(full[kernels::linear_index(big, i + pad, j + pad, k + pad)]);
            }
        }
    }
    out
}

/// Smoothed white noise rescaled to `[0, 1]`: a texture with structure on
/// the scale of `sigma` voxels.
pub fn textured_volume<R: Rng>(dims: Dims, sigma: f64, rng: &mut R) -> Result<Volume> {
    let raw = smooth_noise(dims, sigma, rng);
    let (lo, hi) = raw.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let span = (hi - lo).max(f32::EPSILON);
    Volume::new(Geometry::unit(dims)?, raw.into_iter().map(|x| (x - lo) / span).collect())
}

/// Identity plus a Gaussian-smoothed random displacement whose largest
/// per-node Euclidean length is `max_voxels` (measured in voxels of `dims`).
pub fn smooth_displacement<R: Rng>(dims: Dims, sigma: f64, max_voxels: f64, rng: &mut R) -> Result<TransformMap> {
    let n = kernels::voxel_count(dims);
    let comps: Vec<Vec<f32>> = (0..3).map(|_| smooth_noise(dims, sigma, rng)).collect();
    let longest = (0..n)
        .map(|v| comps.iter().map(|c| (c[v] as f64).powi(2)).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let scale = max_voxels / longest;
    TransformMap::from_displacement(dims, |i, j, k| {
        let v = kernels::linear_index(dims, i, j, k);
        [0, 1, 2].map(|a| comps[a][v] as f64 * scale / (dims[a] - 1) as f64)
    })
}

/// Pull-back map `x -> c + s * (x - c) + t` about the grid centre `c`,
/// with per-axis scale `s` and translation `t` in voxels.
pub fn affine_map(dims: Dims, scale: [f64; 3], translation_voxels: [f64; 3]) -> Result<TransformMap> {
    TransformMap::from_fn(dims, |i, j, k| {
        let x = [i, j, k];
        [0, 1, 2].map(|a| {
            let last = (dims[a] - 1) as f64;
            let c = last / 2.0;
            (c + scale[a] * (x[a] as f64 - c) + translation_voxels[a]) / last
        })
    })
}

/// A random map whose values stay inside the grid and at least 0.2 cells
/// away from every grid plane of a field on `dims`, so trilinear sampling
/// through it is smooth under small perturbations.
pub fn off_node_map<R: Rng>(dims: Dims, amplitude_voxels: f64, rng: &mut R) -> Result<TransformMap> {
    TransformMap::from_fn(dims, |i, j, k| {
        let x = NormalizedCoord::of_voxel(dims, i, j, k).0;
        [0, 1, 2].map(|a| {
            let last = (dims[a] - 1) as f64;
            let u = (x[a] * last + rng.random_range(-amplitude_voxels..=amplitude_voxels)).clamp(0.0, last - 1e-9);
            let cell = u.floor().min(last - 1.0);
            (cell + 0.2 + 0.6 * (u - cell).min(1.0)) / last
        })
    })
}

/// An axis-aligned ellipsoid in normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub label: u32,
    pub intensity: f32,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Renders ellipsoids (later ones paint over earlier ones) onto a
/// background, modulated by `texture` (values in `[0, 1]`) with weight
/// `texture_weight`.
pub fn render_phantom(
    dims: Dims,
    shapes: &[Ellipsoid],
    background: f32,
    texture: Option<&Volume>,
    texture_weight: f32,
) -> Result<(Volume, LabelVolume)> {
    let g = Geometry::unit(dims)?;
    let labels = LabelVolume::from_fn(g, |i, j, k| {
        let p = NormalizedCoord::of_voxel(dims, i, j, k).0;
        shapes.iter().rev().find(|s| s.contains(p)).map_or(0, |s| s.label)
    })?;
    let image = Volume::from_fn_with(g, |i, j, k| {
        let p = NormalizedCoord::of_voxel(dims, i, j, k).0;
        let base = shapes.iter().rev().find(|s| s.contains(p)).map_or(background, |s| s.intensity);
        let t = texture.map_or(0.0, |t| t.get(i, j, k) - 0.5);
        (base + texture_weight * t).clamp(0.0, 1.0)
    })?;
    Ok((image, labels))
}

/// Image and labels pulled back through `phi`.
pub fn deform_subject(image: &Volume, labels: &LabelVolume, phi: &TransformMap) -> Result<(Volume, LabelVolume)> {
    Ok((warp(image, phi, None)?, warp_labels(labels, phi, None)?))
}
