//! Bidirectional LNCC similarity plus the gradient inverse-consistency
//! regularizer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::transform::{compose, warp, TransformMap};
use crate::volume::Volume;

/// Weights and window parameters of the registration loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub lncc_radius: usize,
    pub variance_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.5, lncc_radius: 2, variance_epsilon: 1e-5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.lncc_radius == 0 || !(self.variance_epsilon > 0.0) {
            return Err(Error::Config(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

/// The three loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim_ab: f64,
    pub sim_ba: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(sim_ab: f64, sim_ba: f64, reg: f64, lambda: f64) -> Self {
        Self { sim_ab, sim_ba, reg, total: sim_ab + sim_ba + lambda * reg }
    }

    pub fn is_finite(&self) -> bool {
        self.sim_ab.is_finite() && self.sim_ba.is_finite() && self.reg.is_finite() && self.total.is_finite()
    }
}

/// `1 - mean windowed NCC`, in `[0, 2]`.
pub fn lncc_similarity(a: &Volume, b: &Volume, cfg: &LossConfig) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("lncc of {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(kernels::lncc_loss(a.data(), b.data(), a.dims(), cfg.lncc_radius, cfg.variance_epsilon))
}

/// Mean over interior nodes of `||∇(Φab ∘ Φba) - I||_F^2`.
pub fn gradicon_regularizer(phi_ab: &TransformMap, phi_ba: &TransformMap) -> Result<f64> {
    if phi_ab.dims() != phi_ba.dims() {
        return Err(Error::shape(format!("maps on {:?} and {:?}", phi_ab.dims(), phi_ba.dims())));
    }
    if phi_ab.dims().iter().any(|&d| d < 3) {
        return Err(Error::shape(format!("regularizer needs >= 3 nodes per axis, got {:?}", phi_ab.dims())));
    }
    let c = compose(phi_ab, phi_ba);
    Ok(kernels::jacobian_penalty(c.data(), c.dims()))
}

fn check_pair(ia: &Volume, ib: &Volume, phi_ab: &TransformMap, phi_ba: &TransformMap) -> Result<()> {
    let d = ia.dims();
    if ib.dims() != d || phi_ab.dims() != d || phi_ba.dims() != d {
        return Err(Error::shape(format!(
            "images {:?}/{:?} and maps {:?}/{:?} must share one grid",
            d,
            ib.dims(),
            phi_ab.dims(),
            phi_ba.dims()
        )));
    }
    Ok(())
}

pub fn total_loss(
    ia: &Volume,
    ib: &Volume,
    phi_ab: &TransformMap,
    phi_ba: &TransformMap,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    check_pair(ia, ib, phi_ab, phi_ba)?;
    let sim_ab = lncc_similarity(&warp(ia, phi_ab, Some(ib.geometry()))?, ib, cfg)?;
    let sim_ba = lncc_similarity(&warp(ib, phi_ba, Some(ia.geometry()))?, ia, cfg)?;
    let reg = gradicon_regularizer(phi_ab, phi_ba)?;
    Ok(LossBreakdown::new(sim_ab, sim_ba, reg, cfg.lambda))
}

/// Tape nodes of one recorded loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub sim_ab: Var,
    pub sim_ba: Var,
    pub reg: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            sim_ab: tape.scalar(self.sim_ab),
            sim_ba: tape.scalar(self.sim_ba),
            reg: tape.scalar(self.reg),
            total: tape.scalar(self.total),
        }
    }
}

/// Records the loss on `tape` for images `ia`, `ib` (1 channel) and maps
/// `phi_ab`, `phi_ba` (3 channels), all on one grid.
pub fn record_loss(tape: &mut Tape, ia: Var, ib: Var, phi_ab: Var, phi_ba: Var, cfg: &LossConfig) -> Result<LossVars> {
    let (r, eps) = (cfg.lncc_radius, cfg.variance_epsilon);
    let wa = tape.sample(ia, phi_ab)?;
    let sim_ab = tape.lncc(wa, ib, r, eps)?;
    let wb = tape.sample(ib, phi_ba)?;
    let sim_ba = tape.lncc(wb, ia, r, eps)?;
    let reg = tape.gradicon_regularizer(phi_ab, phi_ba)?;
    let total = tape.combine(&[(sim_ab, 1.0), (sim_ba, 1.0), (reg, cfg.lambda)])?;
    Ok(LossVars { sim_ab, sim_ba, reg, total })
}

/// Loss value and its gradient with respect to both map value fields.
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub loss: LossBreakdown,
    /// Planar `3 x dims` gradient with respect to `phi_ab`.
    pub d_phi_ab: Vec<f32>,
    pub d_phi_ba: Vec<f32>,
}

pub fn loss_gradients(
    ia: &Volume,
    ib: &Volume,
    phi_ab: &TransformMap,
    phi_ba: &TransformMap,
    cfg: &LossConfig,
) -> Result<LossGradients> {
    check_pair(ia, ib, phi_ab, phi_ba)?;
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_volume(ia));
    let b = tape.constant(Tensor::from_volume(ib));
    let pab = tape.input(Tensor::from_map(phi_ab));
    let pba = tape.input(Tensor::from_map(phi_ba));
    let vars = record_loss(&mut tape, a, b, pab, pba, cfg)?;
    let loss = vars.breakdown(&tape);
    let g = tape.backward(vars.total)?;
    let zeros = || vec![0.0; 3 * phi_ab.node_count()];
    Ok(LossGradients {
        loss,
        d_phi_ab: g.tensor(pab).map(|t| t.data().to_vec()).unwrap_or_else(zeros),
        d_phi_ba: g.tensor(pba).map(|t| t.data().to_vec()).unwrap_or_else(zeros),
    })
}
