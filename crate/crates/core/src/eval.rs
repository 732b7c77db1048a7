//! Registration metrics on original image grids.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::network::RegistrationModel;
use crate::preprocess::{map_to_original, prepare, Modality};
use crate::trainer::{instance_optimize, InstanceConfig, InstanceStatus};
use crate::transform::{neg_jacobian_fraction, warp_labels, TransformMap};
use crate::volume::{node_coord, Dims, Geometry, LabelVolume, NormalizedCoord, Volume};

/// Physical points (mm) in the frame of one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite landmark coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn physical_to_normalized(p: [f64; 3], geom: &Geometry) -> NormalizedCoord {
    geom.physical_to_normalized(p)
}

pub fn normalized_to_physical(p: NormalizedCoord, geom: &Geometry) -> [f64; 3] {
    geom.normalized_to_physical(p)
}

/// `Φ - id` per axis, with the identity rounded the way maps store it so
/// that an identity map has exactly zero displacement.
fn displacement_planes(phi: &TransformMap) -> [Vec<f32>; 3] {
    let dims = phi.dims();
    let n = phi.node_count();
    std::array::from_fn(|a| {
        let stride = [1, dims[0], dims[0] * dims[1]][a];
        (0..n)
            .map(|v| {
                let idx = (v / stride) % dims[a];
                phi.data()[a * n + v] - node_coord(idx, dims[a]) as f32
            })
            .collect()
    })
}

/// Per-landmark distances (mm) between fixed landmarks carried through
/// `phi_ab` (pull-back map on the fixed grid) and their moving partners.
/// The map is evaluated as `x + u(x)` with `u` interpolated trilinearly.
pub fn landmark_errors(
    phi_ab: &TransformMap,
    fixed_lm: &LandmarkSet,
    moving_lm: &LandmarkSet,
    fixed: &Geometry,
    moving: &Geometry,
) -> Result<Vec<f64>> {
    if fixed_lm.len() != moving_lm.len() {
        return Err(Error::LandmarkCount { fixed: fixed_lm.len(), moving: moving_lm.len() });
    }
    let disp = displacement_planes(phi_ab);
    let dims = phi_ab.dims();
    Ok(fixed_lm
        .points
        .iter()
        .zip(&moving_lm.points)
        .map(|(f, m)| {
            let x = physical_to_normalized(*f, fixed).0;
            let mapped = std::array::from_fn(|a| x[a] + kernels::sample_point(&disp[a], dims, x));
            let p = normalized_to_physical(NormalizedCoord(mapped), moving);
            (0..3).map(|a| (p[a] - m[a]).powi(2)).sum::<f64>().sqrt()
        })
        .collect())
}

/// Mean target registration error in mm.
pub fn mtre(
    phi_ab: &TransformMap,
    fixed_lm: &LandmarkSet,
    moving_lm: &LandmarkSet,
    fixed: &Geometry,
    moving: &Geometry,
) -> Result<f64> {
    let e = landmark_errors(phi_ab, fixed_lm, moving_lm, fixed, moving)?;
    if e.is_empty() {
        return Err(Error::LandmarkCount { fixed: 0, moving: 0 });
    }
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    pub per_label: BTreeMap<u32, f64>,
    /// `None` when neither volume has a foreground label.
    pub mean: Option<f64>,
}

/// Dice per nonzero label over the union of labels present in either
/// volume.
pub fn dice(warped: &LabelVolume, target: &LabelVolume) -> Result<DiceScores> {
    if warped.dims() != target.dims() {
        return Err(Error::shape(format!("dice of {:?} and {:?}", warped.dims(), target.dims())));
    }
    let mut counts: BTreeMap<u32, [u64; 3]> = BTreeMap::new();
    for (&a, &b) in warped.data().iter().zip(target.data()) {
        if a != 0 {
            counts.entry(a).or_default()[0] += 1;
        }
        if b != 0 {
            counts.entry(b).or_default()[1] += 1;
        }
        if a != 0 && a == b {
            counts.entry(a).or_default()[2] += 1;
        }
    }
    let per_label: BTreeMap<u32, f64> =
        counts.into_iter().map(|(l, [na, nb, both])| (l, 2.0 * both as f64 / (na + nb) as f64)).collect();
    let mean = (!per_label.is_empty()).then(|| per_label.values().sum::<f64>() / per_label.len() as f64);
    Ok(DiceScores { per_label, mean })
}

/// Metrics for one registered pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mtre_mm: Option<f64>,
    pub dice_per_label: Option<BTreeMap<u32, f64>>,
    pub dice_mean: Option<f64>,
    pub neg_jac_fraction: f64,
    pub wall_time_s: f64,
}

impl MetricsReport {
    /// Equality of every metric, ignoring timing.
    pub fn same_metrics(&self, other: &Self) -> bool {
        self.mtre_mm == other.mtre_mm
            && self.dice_per_label == other.dice_per_label
            && self.dice_mean == other.dice_mean
            && self.neg_jac_fraction == other.neg_jac_fraction
    }
}

/// One step of the evaluation pipeline, recorded in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "kebab-case")]
pub enum PipelineStep {
    Preprocess { canonical: Dims },
    Predict { grid: Dims },
    InstanceOptimize { iterations: usize, status: InstanceStatus },
    MapToOriginal { from: Dims, to: Dims },
    Metric { name: String, grid: Dims },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub steps: Vec<PipelineStep>,
}

impl PipelineTrace {
    /// True when every metric ran on `original` after the map was moved
    /// there.
    pub fn metrics_on_original_grid(&self, original: Dims) -> bool {
        let Some(mapped) =
            self.steps.iter().position(|s| matches!(s, PipelineStep::MapToOriginal { to, .. } if *to == original))
        else {
            return false;
        };
        self.steps.iter().enumerate().all(|(i, s)| match s {
            PipelineStep::Metric { grid, .. } => i > mapped && *grid == original,
            _ => true,
        })
    }
}

/// Optional evaluation annotations for a pair.
#[derive(Clone, Copy, Debug, Default)]
pub struct Annotations<'a> {
    pub fixed_landmarks: Option<&'a LandmarkSet>,
    pub moving_landmarks: Option<&'a LandmarkSet>,
    pub fixed_labels: Option<&'a LabelVolume>,
    pub moving_labels: Option<&'a LabelVolume>,
}

/// Preprocesses both images with the shared pipeline, predicts `Φ` (moving
/// pulled onto fixed), optionally instance-optimizes, and re-grids the map
/// onto the original fixed image.
pub fn register_pair(
    model: &RegistrationModel,
    fixed: &Volume,
    moving: &Volume,
    modalities: (Modality, Modality),
    io: Option<&InstanceConfig>,
    trace: &mut PipelineTrace,
) -> Result<TransformMap> {
    let side = model.config().canonical_side;
    let f = prepare(fixed, modalities.0, side)?;
    let m = prepare(moving, modalities.1, side)?;
    trace.steps.push(PipelineStep::Preprocess { canonical: f.dims() });
    let phi = match io {
        Some(cfg) if cfg.iterations > 0 => {
            let r = instance_optimize(model, &m, &f, cfg)?;
            trace.steps.push(PipelineStep::InstanceOptimize { iterations: cfg.iterations, status: r.status });
            r.phi_ab
        }
        _ => model.predict_full(&m, &f)?,
    };
    trace.steps.push(PipelineStep::Predict { grid: phi.dims() });
    let out = map_to_original(&phi, fixed.geometry())?;
    trace.steps.push(PipelineStep::MapToOriginal { from: phi.dims(), to: out.dims() });
    Ok(out)
}

/// Metrics of a map already on the original fixed grid.
pub fn compute_metrics(
    phi: &TransformMap,
    fixed: &Geometry,
    moving: &Geometry,
    ann: &Annotations<'_>,
    trace: &mut PipelineTrace,
) -> Result<MetricsReport> {
    let start = Instant::now();
    if phi.dims() != fixed.dims {
        return Err(Error::shape(format!(
            "metrics need the map on the original fixed grid {:?}, got {:?}",
            fixed.dims,
            phi.dims()
        )));
    }
    let grid = phi.dims();
    let mut metric = |name: &str| trace.steps.push(PipelineStep::Metric { name: name.into(), grid });
    let neg_jac_fraction = neg_jacobian_fraction(phi)?;
    metric("neg_jac_fraction");
    let mtre_mm = match (ann.fixed_landmarks, ann.moving_landmarks) {
        (Some(fl), Some(ml)) => {
            metric("mtre");
            Some(mtre(phi, fl, ml, fixed, moving)?)
        }
        _ => None,
    };
    let (dice_per_label, dice_mean) = match (ann.fixed_labels, ann.moving_labels) {
        (Some(fl), Some(ml)) => {
            metric("dice");
            let warped = warp_labels(ml, phi, Some(fixed))?;
            let d = dice(&warped, fl)?;
            (Some(d.per_label), d.mean)
        }
        _ => (None, None),
    };
    Ok(MetricsReport {
        mtre_mm,
        dice_per_label,
        dice_mean,
        neg_jac_fraction,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Full protocol for one pair: register, map back to the original grid,
/// then measure.
pub fn evaluate_pair(
    model: &RegistrationModel,
    fixed: &Volume,
    moving: &Volume,
    modalities: (Modality, Modality),
    io: Option<&InstanceConfig>,
    ann: &Annotations<'_>,
) -> Result<(MetricsReport, TransformMap, PipelineTrace)> {
    let start = Instant::now();
    let mut trace = PipelineTrace::default();
    let phi = register_pair(model, fixed, moving, modalities, io, &mut trace)?;
    let mut report = compute_metrics(&phi, fixed.geometry(), moving.geometry(), ann, &mut trace)?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((report, phi, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelConfig, UNetConfig};
    use crate::transform::identity_map;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(d: Dims) -> Geometry {
        Geometry::new(d, [1.5, 0.8, 2.0], [-10.0, 4.0, 7.5]).unwrap()
    }

    #[test]
    fn physical_normalized_endpoints_and_roundtrip() {
        let g = geom([9, 7, 5]);
        assert_eq!(physical_to_normalized(g.origin, &g).0, [0.0; 3]);
        let far: [f64; 3] = std::array::from_fn(|a| g.origin[a] + g.spacing[a] * (g.dims[a] - 1) as f64);
        assert_eq!(physical_to_normalized(far, &g).0, [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = [0; 3].map(|_| rng.random_range(-50.0..50.0));
            let q = normalized_to_physical(physical_to_normalized(p, &g), &g);
            assert!((0..3).all(|a| (p[a] - q[a]).abs() < 1e-9));
        }
    }

    #[test]
    fn mtre_identity_and_three_four_five() {
        let g = geom([8, 8, 8]);
        let id = identity_map(g.dims).unwrap();
        let pts = LandmarkSet::new(vec![[-8.0, 5.0, 9.0], [0.0, 6.0, 12.0]]).unwrap();
        assert!(mtre(&id, &pts, &pts, &g, &g).unwrap() < 1e-12);
        let moved = LandmarkSet::new(pts.points.iter().map(|p| [p[0] + 3.0, p[1] + 4.0, p[2]]).collect()).unwrap();
        assert_eq!(mtre(&id, &pts, &moved, &g, &g).unwrap(), 5.0);
        let short = LandmarkSet::new(vec![[0.0; 3]]).unwrap();
        assert_eq!(mtre(&id, &pts, &short, &g, &g).unwrap_err().code(), "landmark-count");
    }

    #[test]
    fn dice_cases() {
        let g = Geometry::unit([8, 8, 8]).unwrap();
        let a = LabelVolume::from_fn(g, |i, j, k| u32::from(i < 4 && j < 4 && k < 2)).unwrap();
        let b = LabelVolume::from_fn(g, |i, j, k| u32::from((2..6).contains(&i) && j < 4 && k < 2)).unwrap();
        assert_eq!(dice(&a, &a).unwrap().mean, Some(1.0));
        let d = dice(&a, &b).unwrap();
        assert_eq!(d.per_label[&1], 0.5);
        assert_eq!(dice(&b, &a).unwrap(), d);
        let c = LabelVolume::from_fn(g, |i, _, _| u32::from(i >= 6)).unwrap();
        assert_eq!(dice(&a, &c).unwrap().mean, Some(0.0));
        // a label destroyed by warping still counts
        let two = LabelVolume::from_fn(g, |i, _, _| if i < 4 { 1 } else { 2 }).unwrap();
        let one = LabelVolume::from_fn(g, |i, _, _| u32::from(i < 4)).unwrap();
        let d = dice(&one, &two).unwrap();
        assert_eq!(d.per_label[&2], 0.0);
        assert_eq!(d.mean, Some(0.5));
    }

    #[test]
    fn identity_model_on_identical_images() {
        let cfg = ModelConfig {
            unet: UNetConfig { base_channels: 2, ..UNetConfig::default() },
            canonical_side: 8,
            ..ModelConfig::default()
        };
        let model = RegistrationModel::new(cfg).unwrap();
        let g = Geometry::new([10, 9, 11], [1.0, 1.2, 0.9], [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Volume::from_fn_with(g, |_, _, _| rng.random_range(0.0..1.0)).unwrap();
        let labels = LabelVolume::from_fn(g, |i, j, _| u32::from(i > 3) + u32::from(j > 5)).unwrap();
        let lm = LandmarkSet::new(vec![[2.0, 3.0, 4.0], [5.5, 1.0, 8.0]]).unwrap();
        let ann = Annotations {
            fixed_landmarks: Some(&lm),
            moving_landmarks: Some(&lm),
            fixed_labels: Some(&labels),
            moving_labels: Some(&labels),
        };
        let (report, phi, trace) = evaluate_pair(&model, &v, &v, (Modality::None, Modality::None), None, &ann).unwrap();
        assert_eq!(phi.dims(), g.dims);
        assert_eq!(report.dice_mean, Some(1.0));
        assert_eq!(report.neg_jac_fraction, 0.0);
        assert!(report.mtre_mm.unwrap() < 1e-5);
        assert!(trace.metrics_on_original_grid(g.dims));
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn metrics_refuse_canonical_grid_maps() {
        let g = geom([9, 9, 9]);
        let id = identity_map([8, 8, 8]).unwrap();
        let mut t = PipelineTrace::default();
        let err = compute_metrics(&id, &g, &g, &Annotations::default(), &mut t).unwrap_err();
        assert_eq!(err.code(), "shape");
        assert!(!t.metrics_on_original_grid(g.dims));
    }
}
