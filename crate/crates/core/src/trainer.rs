//! Multi-dataset training, fine-tuning and per-pair instance optimization.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::loss::{record_loss, LossBreakdown, LossConfig};
use crate::network::{RegistrationModel, STEP1_PREFIX};
use crate::preprocess::{prepare, Modality};
use crate::transform::TransformMap;
use crate::volume::Volume;

/// How pairs are drawn from a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingMode {
    /// Only the listed pairs (e.g. two scans of one patient).
    Intra,
    /// Any ordered pair of distinct volumes.
    Inter,
}

/// One training dataset: volumes (raw intensities) plus a pairing rule.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub name: String,
    pub mode: PairingMode,
    pub modality: Modality,
    pub volumes: Vec<Volume>,
    /// Index pairs into `volumes`; required for [`PairingMode::Intra`].
    pub pairs: Vec<(usize, usize)>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            PairingMode::Inter if self.volumes.len() < 2 => Err(Error::EmptyDataset(self.name.clone())),
            PairingMode::Intra if self.pairs.is_empty() => Err(Error::EmptyDataset(self.name.clone())),
            _ => {
                if self.pairs.iter().any(|&(a, b)| a >= self.volumes.len() || b >= self.volumes.len()) {
                    return Err(Error::Config(format!("dataset `{}` has a pair index out of range", self.name)));
                }
                Ok(())
            }
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        match self.mode {
            PairingMode::Intra => self.pairs[rng.random_range(0..self.pairs.len())],
            PairingMode::Inter => {
                let n = self.volumes.len();
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n - 1);
                (a, if b >= a { b + 1 } else { b })
            }
        }
    }
}

/// An ordered pair `(a -> b)` drawn from dataset `dataset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledPair {
    pub dataset: usize,
    pub a: usize,
    pub b: usize,
}

/// Draws exactly `n` pairs per dataset (uniform, with replacement) and
/// shuffles the concatenation.
pub fn sample_epoch<R: Rng>(datasets: &[DatasetSpec], n: usize, rng: &mut R) -> Result<Vec<SampledPair>> {
    if datasets.is_empty() {
        return Err(Error::EmptyDataset("<no datasets>".into()));
    }
    let mut out = Vec::with_capacity(n * datasets.len());
    for (d, spec) in datasets.iter().enumerate() {
        spec.validate()?;
        for _ in 0..n {
            let (a, b) = spec.draw(rng);
            out.push(SampledPair { dataset: d, a, b });
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Training schedule and hyperparameters.
///
/// The published schedule is 1000 pairs per dataset, 800 epochs of step
/// one and 200 of step two; the defaults here are desk-scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pairs_per_dataset: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Keep step-one parameters trainable during phase two.
    pub unfreeze_step1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pairs_per_dataset: 25,
            epochs_phase1: 8,
            epochs_phase2: 2,
            lr: 5e-5,
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            unfreeze_step1: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.pairs_per_dataset == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("pairs_per_dataset and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Training phase recorded in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Step one only.
    One,
    /// Step two enabled.
    Two,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean over the pairs that produced a finite loss.
    pub mean: LossBreakdown,
    pub pairs: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
}

/// Where a run writes its metrics CSV and checkpoints.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("checkpoint-e{epoch:05}.json"))
    }
}

struct Prepared {
    volumes: Vec<Vec<Tensor>>,
}

fn prepare_all(datasets: &[DatasetSpec], side: usize) -> Result<Prepared> {
    let volumes = datasets
        .iter()
        .map(|d| {
            d.validate()?;
            d.volumes
                .iter()
                .map(|v| Ok(Tensor::from_volume(&prepare(v, d.modality, side)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { volumes })
}

/// Records both directions and the loss; returns the tape and loss nodes.
fn record_pair(
    model: &RegistrationModel,
    a: &Tensor,
    b: &Tensor,
    loss: &LossConfig,
) -> Result<(Tape, crate::loss::LossVars, crate::autodiff::Var, crate::autodiff::Var)> {
    let mut tape = Tape::new();
    let ia = tape.constant(a.clone());
    let ib = tape.constant(b.clone());
    let pab = model.record_full(&mut tape, ia, ib)?;
    let pba = model.record_full(&mut tape, ib, ia)?;
    let vars = record_loss(&mut tape, ia, ib, pab, pba, loss)?;
    Ok((tape, vars, pab, pba))
}

/// One optimizer step on one pair. `Ok(None)` means the pair was skipped
/// because its loss or gradient was not finite.
fn train_step(
    model: &mut RegistrationModel,
    a: &Tensor,
    b: &Tensor,
    loss: &LossConfig,
    adam: &AdamConfig,
) -> Result<Option<LossBreakdown>> {
    let (mut tape, vars, _, _) = record_pair(model, a, b, loss)?;
    let breakdown = vars.breakdown(&tape);
    if !breakdown.is_finite() {
        return Ok(None);
    }
    let grads = tape.backward(vars.total)?;
    let store = model.store_mut();
    store.zero_grad();
    grads.accumulate_into(store);
    match store.adam_step(adam) {
        Ok(()) => Ok(Some(breakdown)),
        Err(Error::NonFiniteGrad(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean(items: &[LossBreakdown], lambda: f64) -> LossBreakdown {
    if items.is_empty() {
        return LossBreakdown { sim_ab: f64::NAN, sim_ba: f64::NAN, reg: f64::NAN, total: f64::NAN };
    }
    let n = items.len() as f64;
    let s = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown::new(s(|l| l.sim_ab), s(|l| l.sim_ba), s(|l| l.reg), lambda)
}

const CSV_HEADER: &str = "epoch,sim_ab,sim_ba,reg,total\n";

fn append_metrics(out: &RunOutput, s: &EpochStats) -> Result<()> {
    use std::io::Write;
    let path = out.metrics_path();
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        f.write_all(CSV_HEADER.as_bytes())?;
    }
    let m = &s.mean;
    writeln!(f, "{},{},{},{},{}", s.epoch, m.sim_ab, m.sim_ba, m.reg, m.total)?;
    Ok(())
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    prepared: Prepared,
    datasets: &'a [DatasetSpec],
    rng: ChaCha8Rng,
    out: Option<&'a RunOutput>,
    report: TrainReport,
}

impl Loop<'_> {
    fn epoch(&mut self, model: &mut RegistrationModel, epoch: usize, phase: Phase) -> Result<()> {
        let pairs = sample_epoch(self.datasets, self.cfg.pairs_per_dataset, &mut self.rng)?;
        let adam = AdamConfig::with_lr(self.cfg.lr);
        let mut losses = Vec::with_capacity(pairs.len());
        let mut skipped = 0;
        for p in &pairs {
            let vols = &self.prepared.volumes[p.dataset];
            match train_step(model, &vols[p.a], &vols[p.b], &self.cfg.loss, &adam)? {
                Some(l) => losses.push(l),
                None => skipped += 1,
            }
        }
        let stats = EpochStats { epoch, phase, mean: mean(&losses, self.cfg.loss.lambda), pairs: pairs.len(), skipped };
        if let Some(out) = self.out {
            append_metrics(out, &stats)?;
        }
        self.report.epochs.push(stats);
        if skipped * 10 >= pairs.len() && skipped > 0 {
            return Err(Error::Divergence { epoch, skipped, total: pairs.len() });
        }
        if let Some(out) = self.out {
            if self.cfg.checkpoint_every > 0 && epoch.is_multiple_of(self.cfg.checkpoint_every) {
                self.checkpoint(model, epoch, phase, out)?;
            }
        }
        Ok(())
    }

    fn checkpoint(&mut self, model: &RegistrationModel, epoch: usize, phase: Phase, out: &RunOutput) -> Result<()> {
        let path = out.checkpoint_path(epoch);
        crate::io::write_checkpoint(&path, model, phase, epoch)?;
        if !self.report.checkpoints.contains(&path) {
            self.report.checkpoints.push(path);
        }
        Ok(())
    }

    fn finish(&mut self, model: &RegistrationModel, epoch: usize, phase: Phase) -> Result<()> {
        if let Some(out) = self.out {
            self.checkpoint(model, epoch, phase, out)?;
        }
        Ok(())
    }
}

fn new_loop<'a>(
    model: &RegistrationModel,
    datasets: &'a [DatasetSpec],
    cfg: &'a TrainConfig,
    out: Option<&'a RunOutput>,
) -> Result<Loop<'a>> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::EmptyDataset("<no datasets>".into()));
    }
    let prepared = prepare_all(datasets, model.config().canonical_side)?;
    Ok(Loop { cfg, prepared, datasets, rng: ChaCha8Rng::seed_from_u64(cfg.seed), out, report: TrainReport::default() })
}

/// Phase one trains the three step-one levels with step two disabled;
/// phase two enables step two and, unless `unfreeze_step1`, freezes step
/// one. Every pair contributes one Adam step of the bidirectional loss.
pub fn train(
    model: &mut RegistrationModel,
    datasets: &[DatasetSpec],
    cfg: &TrainConfig,
    out: Option<&RunOutput>,
) -> Result<TrainReport> {
    let mut lp = new_loop(model, datasets, cfg, out)?;
    let mut epoch = 0;
    let mut phase = if model.step2_enabled() { Phase::Two } else { Phase::One };
    if cfg.epochs_phase1 > 0 {
        model.set_step2_enabled(false);
        model.store_mut().set_trainable("", true);
        phase = Phase::One;
        for _ in 0..cfg.epochs_phase1 {
            epoch += 1;
            lp.epoch(model, epoch, phase)?;
        }
    }
    if cfg.epochs_phase2 > 0 {
        model.set_step2_enabled(true);
        model.store_mut().set_trainable("", true);
        model.store_mut().set_trainable(STEP1_PREFIX, cfg.unfreeze_step1);
        phase = Phase::Two;
        for _ in 0..cfg.epochs_phase2 {
            epoch += 1;
            lp.epoch(model, epoch, phase)?;
        }
        model.store_mut().set_trainable("", true);
    }
    lp.finish(model, epoch, phase)?;
    Ok(lp.report)
}

/// Continues training a loaded model with both steps enabled and every
/// parameter trainable.
pub fn finetune(
    model: &mut RegistrationModel,
    datasets: &[DatasetSpec],
    cfg: &TrainConfig,
    epochs: usize,
    out: Option<&RunOutput>,
) -> Result<TrainReport> {
    let mut lp = new_loop(model, datasets, cfg, out)?;
    model.set_step2_enabled(true);
    model.store_mut().set_trainable("", true);
    for epoch in 1..=epochs {
        lp.epoch(model, epoch, Phase::Finetune)?;
    }
    lp.finish(model, epochs, Phase::Finetune)?;
    Ok(lp.report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub iterations: usize,
    pub lr: f64,
    pub loss: LossConfig,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self { iterations: 50, lr: 1e-5, loss: LossConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceStatus {
    Completed,
    /// A non-finite loss stopped the run; the best finite maps are returned.
    StoppedNonFinite,
}

#[derive(Clone, Debug)]
pub struct InstanceResult {
    pub phi_ab: TransformMap,
    pub phi_ba: TransformMap,
    /// Loss before each update; the last entry belongs to the returned maps.
    pub trace: Vec<LossBreakdown>,
    pub status: InstanceStatus,
}

/// Optimizes a private copy of `model` on one canonical pair; `model`
/// itself is never modified.
pub fn instance_optimize(
    model: &RegistrationModel,
    ia: &Volume,
    ib: &Volume,
    cfg: &InstanceConfig,
) -> Result<InstanceResult> {
    cfg.loss.validate()?;
    let mut work = model.clone();
    work.store_mut().set_trainable("", true);
    work.store_mut().reset_optimizer();
    let adam = AdamConfig::with_lr(cfg.lr);
    let (a, b) = (Tensor::from_volume(ia), Tensor::from_volume(ib));
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut best: Option<(f64, TransformMap, TransformMap)> = None;
    for it in 0..=cfg.iterations {
        let (mut tape, vars, pab, pba) = record_pair(&work, &a, &b, &cfg.loss)?;
        let l = vars.breakdown(&tape);
        if !l.is_finite() {
            let (_, phi_ab, phi_ba) = match best {
                Some(b) => b,
                None => return Err(Error::Divergence { epoch: 0, skipped: 1, total: 1 }),
            };
            return Ok(InstanceResult { phi_ab, phi_ba, trace, status: InstanceStatus::StoppedNonFinite });
        }
        trace.push(l);
        let maps =
            || -> Result<(TransformMap, TransformMap)> { Ok((tape.value(pab).to_map()?, tape.value(pba).to_map()?)) };
        if it == cfg.iterations {
            let (phi_ab, phi_ba) = maps()?;
            return Ok(InstanceResult { phi_ab, phi_ba, trace, status: InstanceStatus::Completed });
        }
        if best.as_ref().is_none_or(|(t, _, _)| l.total < *t) {
            let (x, y) = maps()?;
            best = Some((l.total, x, y));
        }
        let grads = tape.backward(vars.total)?;
        let store = work.store_mut();
        store.zero_grad();
        grads.accumulate_into(store);
        if let Err(e) = store.adam_step(&adam) {
            if let Error::NonFiniteGrad(_) = e {
                let (_, phi_ab, phi_ba) = best.expect("recorded above");
                return Ok(InstanceResult { phi_ab, phi_ba, trace, status: InstanceStatus::StoppedNonFinite });
            }
            return Err(e);
        }
    }
    unreachable!("loop returns on the last iteration")
}
