//! The two-step predictor: a three-level coarse-to-fine stage followed by a
//! full-resolution refinement, all four stages being UNets of one
//! architecture.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::transform::{identity_map, TransformMap};
use crate::volume::{Dims, Volume};

/// Shape of every UNet in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { depth: 3, base_channels: 8, in_channels: 2, out_channels: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    /// Side length of the cubic network input grid.
    pub canonical_side: usize,
    /// A raw network output of 1 displaces by this many canonical voxels.
    pub displacement_gain_voxels: f64,
    pub leaky_slope: f32,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            canonical_side: crate::preprocess::DEFAULT_CANONICAL_SIDE,
            displacement_gain_voxels: 10.0,
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let u = &self.unet;
        if u.depth == 0 || u.base_channels == 0 || u.in_channels != 2 || u.out_channels != 3 {
            return Err(Error::Config(format!("invalid unet config {u:?}")));
        }
        if self.canonical_side < 3 {
            return Err(Error::Config(format!("canonical side {} is below 3", self.canonical_side)));
        }
        if !self.displacement_gain_voxels.is_finite() || self.displacement_gain_voxels < 0.0 {
            return Err(Error::Config("displacement gain must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn canonical_dims(&self) -> Dims {
        [self.canonical_side; 3]
    }

    /// Normalized displacement produced by a raw output of 1.
    pub fn gain(&self) -> f32 {
        (self.displacement_gain_voxels / (self.canonical_side - 1) as f64) as f32
    }
}

/// The four stages of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Step one at 1/4 resolution.
    Level1,
    /// Step one at 1/2 resolution.
    Level2,
    /// Step one at full resolution.
    Level3,
    /// Step two at full resolution.
    Refine,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Level1, Stage::Level2, Stage::Level3, Stage::Refine];
    pub const STEP_ONE: [Stage; 3] = [Stage::Level1, Stage::Level2, Stage::Level3];

    /// Parameter name prefix; step-one stages share `step1.`.
    pub fn prefix(self) -> &'static str {
        match self {
            Stage::Level1 => "step1.l1",
            Stage::Level2 => "step1.l2",
            Stage::Level3 => "step1.l3",
            Stage::Refine => "step2.refine",
        }
    }

    /// Number of 2x poolings from the canonical grid to this stage's input.
    pub fn pool_count(self) -> usize {
        match self {
            Stage::Level1 => 2,
            Stage::Level2 => 1,
            Stage::Level3 | Stage::Refine => 0,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

pub const STEP1_PREFIX: &str = "step1.";

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct UNet {
    encoder: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
    output: ConvLayer,
}

fn add_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: String,
    c_in: usize,
    c_out: usize,
    slope: f32,
    zero: bool,
) -> Result<ConvLayer> {
    let n = c_out * c_in * 27;
    let w = if zero {
        vec![0.0; n]
    } else {
        let fan_in = (c_in * 27) as f64;
        let std = (2.0 / ((1.0 + (slope as f64).powi(2)) * fan_in)).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(rng) as f32).collect()
    };
    let w = store.add(format!("{name}.w"), vec![c_out, c_in, 27], w)?;
    let b = store.add(format!("{name}.b"), vec![c_out], vec![0.0; c_out])?;
    Ok(ConvLayer { w, b })
}

impl UNet {
    fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let u = cfg.unet;
        let width = |d: usize| u.base_channels << d;
        let mut encoder = Vec::with_capacity(u.depth);
        for d in 0..u.depth {
            let c_in = if d == 0 { u.in_channels } else { width(d - 1) };
            encoder.push(add_conv(store, rng, format!("{prefix}.enc{d}"), c_in, width(d), cfg.leaky_slope, false)?);
        }
        let mut decoder = Vec::with_capacity(u.depth - 1);
        for d in (0..u.depth - 1).rev() {
            let c_in = width(d + 1) + width(d);
            decoder.push(add_conv(store, rng, format!("{prefix}.dec{d}"), c_in, width(d), cfg.leaky_slope, false)?);
        }
        let output = add_conv(store, rng, format!("{prefix}.out"), width(0), u.out_channels, cfg.leaky_slope, true)?;
        Ok(Self { encoder, decoder, output })
    }

    fn conv(tape: &mut Tape, store: &ParamStore, x: Var, layer: ConvLayer) -> Result<Var> {
        let w = tape.param(store, layer.w);
        let b = tape.param(store, layer.b);
        tape.conv3d(x, w, b)
    }

    /// Raw output (`out_channels` at the input's resolution).
    fn record(&self, tape: &mut Tape, store: &ParamStore, x: Var, slope: f32) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (d, layer) in self.encoder.iter().enumerate() {
            if d > 0 {
                h = tape.avg_pool2x(h)?;
            }
            let c = Self::conv(tape, store, h, *layer)?;
            h = tape.leaky_relu(c, slope)?;
            skips.push(h);
        }
        for (layer, &skip) in self.decoder.iter().zip(skips.iter().rev().skip(1)) {
            let up = tape.resample(h, tape.value(skip).dims())?;
            let cat = tape.concat_channels(&[up, skip])?;
            let c = Self::conv(tape, store, cat, *layer)?;
            h = tape.leaky_relu(c, slope)?;
        }
        Self::conv(tape, store, h, self.output)
    }
}

/// Parameters and configuration of the full predictor.
///
/// The same parameters serve both registration directions: `Φab` comes
/// from `(ia, ib)` and `Φba` from `(ib, ia)`.
#[derive(Clone, Debug)]
pub struct RegistrationModel {
    config: ModelConfig,
    store: ParamStore,
    nets: Vec<UNet>,
    step2_enabled: bool,
}

/// Constants shared by one recording.
struct Frame {
    identity: Var,
}

impl RegistrationModel {
    /// He-initialized model whose output layers are zero, so it predicts
    /// the identity map until trained.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let nets = Stage::ALL
            .iter()
            .map(|s| UNet::build(&mut store, &mut rng, s.prefix(), &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, store, nets, step2_enabled: false })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn step2_enabled(&self) -> bool {
        self.step2_enabled
    }

    pub fn set_step2_enabled(&mut self, on: bool) {
        self.step2_enabled = on;
    }

    /// Parameter ids of the output layer of `stage`.
    pub fn output_layer(&self, stage: Stage) -> (ParamId, ParamId) {
        let o = self.nets[stage.index()].output;
        (o.w, o.b)
    }

    /// Input grid of each step-one level for the configured canonical side.
    pub fn level_dims(&self, stage: Stage) -> Dims {
        let mut d = self.config.canonical_dims();
        for _ in 0..stage.pool_count() {
            d = crate::kernels::pooled_dims(d);
        }
        d
    }

    fn frame(&self, tape: &mut Tape) -> Result<Frame> {
        let id = identity_map(self.config.canonical_dims())?;
        Ok(Frame { identity: tape.constant(Tensor::from_map(&id)) })
    }

    fn check_canonical(&self, tape: &Tape, vars: &[Var]) -> Result<()> {
        let want = self.config.canonical_dims();
        for &v in vars {
            let t = tape.value(v);
            if t.channels() != 1 || t.dims() != want {
                return Err(Error::shape(format!(
                    "expected a 1x{want:?} canonical image, got {}x{:?}",
                    t.channels(),
                    t.dims()
                )));
            }
        }
        Ok(())
    }

    fn pool_n(tape: &mut Tape, mut x: Var, n: usize) -> Result<Var> {
        for _ in 0..n {
            x = tape.avg_pool2x(x)?;
        }
        Ok(x)
    }

    /// Scaled displacement `u` predicted by one stage, on its input grid.
    pub fn record_displacement(&self, tape: &mut Tape, stage: Stage, moving: Var, target: Var) -> Result<Var> {
        let (m, t) = (tape.value(moving), tape.value(target));
        if m.channels() != 1 || t.channels() != 1 || m.dims() != t.dims() {
            return Err(Error::shape(format!(
                "stage inputs {}x{:?} and {}x{:?} differ",
                m.channels(),
                m.dims(),
                t.channels(),
                t.dims()
            )));
        }
        let x = tape.concat_channels(&[moving, target])?;
        let raw = self.nets[stage.index()].record(tape, &self.store, x, self.config.leaky_slope)?;
        tape.scale(raw, self.config.gain())
    }

    /// `Ψ = id + u` for one stage on the stage's own grid.
    pub fn record_level(&self, tape: &mut Tape, stage: Stage, moving: Var, target: Var) -> Result<Var> {
        let u = self.record_displacement(tape, stage, moving, target)?;
        let id = identity_map(tape.value(u).dims())?;
        let id = tape.constant(Tensor::from_map(&id));
        tape.add(id, u)
    }

    fn record_multires_in(&self, tape: &mut Tape, frame: &Frame, ia: Var, ib: Var) -> Result<Var> {
        let canonical = self.config.canonical_dims();
        let mut phi = frame.identity;
        for stage in Stage::STEP_ONE {
            let warped = tape.sample(ia, phi)?;
            let m = Self::pool_n(tape, warped, stage.pool_count())?;
            let t = Self::pool_n(tape, ib, stage.pool_count())?;
            let mut u = self.record_displacement(tape, stage, m, t)?;
            if tape.value(u).dims() != canonical {
                u = tape.resample(u, canonical)?;
            }
            let psi = tape.add(frame.identity, u)?;
            phi = tape.sample(phi, psi)?;
        }
        Ok(phi)
    }

    /// Step one only: coarse-to-fine composition over the three levels.
    pub fn record_multires(&self, tape: &mut Tape, ia: Var, ib: Var) -> Result<Var> {
        self.check_canonical(tape, &[ia, ib])?;
        let frame = self.frame(tape)?;
        self.record_multires_in(tape, &frame, ia, ib)
    }

    /// `Φab` for canonical images `ia`, `ib`, including step two when
    /// enabled.
    pub fn record_full(&self, tape: &mut Tape, ia: Var, ib: Var) -> Result<Var> {
        self.check_canonical(tape, &[ia, ib])?;
        let frame = self.frame(tape)?;
        let phi1 = self.record_multires_in(tape, &frame, ia, ib)?;
        if !self.step2_enabled {
            return Ok(phi1);
        }
        let warped = tape.sample(ia, phi1)?;
        let u = self.record_displacement(tape, Stage::Refine, warped, ib)?;
        let psi2 = tape.add(frame.identity, u)?;
        tape.sample(phi1, psi2)
    }

    fn eager(&self, f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<TransformMap> {
        let mut tape = Tape::new();
        let out = f(&mut tape)?;
        tape.value(out).to_map()
    }

    pub fn predict_level(&self, stage: Stage, moving_warped: &Volume, target: &Volume) -> Result<TransformMap> {
        self.eager(|t| {
            let m = t.constant(Tensor::from_volume(moving_warped));
            let b = t.constant(Tensor::from_volume(target));
            self.record_level(t, stage, m, b)
        })
    }

    pub fn predict_multires(&self, ia: &Volume, ib: &Volume) -> Result<TransformMap> {
        self.eager(|t| {
            let a = t.constant(Tensor::from_volume(ia));
            let b = t.constant(Tensor::from_volume(ib));
            self.record_multires(t, a, b)
        })
    }

    /// `Φab`; call with swapped arguments for `Φba`.
    pub fn predict_full(&self, ia: &Volume, ib: &Volume) -> Result<TransformMap> {
        self.eager(|t| {
            let a = t.constant(Tensor::from_volume(ia));
            let b = t.constant(Tensor::from_volume(ib));
            self.record_full(t, a, b)
        })
    }

    /// Replaces parameter values and the step-two flag, e.g. from a
    /// checkpoint. Names and shapes must match this model's layout.
    pub fn load_parameters(&mut self, named: &[(String, Vec<usize>, Vec<f32>)], step2_enabled: bool) -> Result<()> {
        if named.len() != self.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.store.len()
            )));
        }
        for (name, shape, values) in named {
            let id = self.store.find(name).ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            let p = self.store.get_mut(id);
            if &p.shape != shape || p.value.len() != values.len() {
                return Err(Error::Format(format!("parameter `{name}` has shape {shape:?}, expected {:?}", p.shape)));
            }
            p.value.copy_from_slice(values);
        }
        self.store.reset_optimizer();
        self.step2_enabled = step2_enabled;
        Ok(())
    }
}
