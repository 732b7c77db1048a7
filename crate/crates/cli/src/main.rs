mod snapshot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use iconforge_core::eval::{compute_metrics, register_pair, Annotations, PipelineTrace};
use iconforge_core::io::{self, load_manifest, load_model};
use iconforge_core::preprocess::{prepare, DEFAULT_CANONICAL_SIDE};
use iconforge_core::trainer::{self, InstanceConfig, RunOutput};
use iconforge_core::transform::{warp, warp_labels};
use iconforge_core::{Error, LabelVolume, LandmarkSet, Modality, ModelConfig, RegistrationModel, TrainConfig};

#[derive(Parser)]
#[command(name = "iconforge", version, about = "Deformable 3D image registration with GradICON regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Train a model from a dataset manifest.
    Train(TrainArgs),
    /// Continue training a checkpoint on a dataset manifest.
    Finetune(FinetuneArgs),
    /// Compute metrics for a saved transform.
    Evaluate(EvaluateArgs),
    /// Normalize intensities and resample to the network grid.
    Preprocess(PreprocessArgs),
    /// Apply a saved transform to a volume or label map.
    Warp(WarpArgs),
}

#[derive(Args)]
struct Annotated {
    #[arg(long)]
    landmarks_fixed: Option<PathBuf>,
    #[arg(long)]
    landmarks_moving: Option<PathBuf>,
    #[arg(long)]
    labels_fixed: Option<PathBuf>,
    #[arg(long)]
    labels_moving: Option<PathBuf>,
}

struct LoadedAnnotations {
    landmarks: Option<(LandmarkSet, LandmarkSet)>,
    labels: Option<(LabelVolume, LabelVolume)>,
}

impl Annotated {
    fn load(&self) -> Result<LoadedAnnotations, Error> {
        let both = |a: &Option<PathBuf>, b: &Option<PathBuf>, what: &str| match (a, b) {
            (Some(a), Some(b)) => Ok(Some((a.clone(), b.clone()))),
            (None, None) => Ok(None),
            _ => Err(Error::Config(format!("--{what}-fixed and --{what}-moving go together"))),
        };
        let landmarks = match both(&self.landmarks_fixed, &self.landmarks_moving, "landmarks")? {
            Some((f, m)) => Some((io::read_landmarks(&f)?, io::read_landmarks(&m)?)),
            None => None,
        };
        let labels = match both(&self.labels_fixed, &self.labels_moving, "labels")? {
            Some((f, m)) => Some((io::read_labels(&f)?, io::read_labels(&m)?)),
            None => None,
        };
        Ok(LoadedAnnotations { landmarks, labels })
    }
}

impl LoadedAnnotations {
    fn view(&self) -> Annotations<'_> {
        Annotations {
            fixed_landmarks: self.landmarks.as_ref().map(|l| &l.0),
            moving_landmarks: self.landmarks.as_ref().map(|l| &l.1),
            fixed_labels: self.labels.as_ref().map(|l| &l.0),
            moving_labels: self.labels.as_ref().map(|l| &l.1),
        }
    }
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Transform output (raw f32 records plus `.json` sidecar).
    #[arg(long)]
    out_map: PathBuf,
    #[arg(long)]
    out_warped: Option<PathBuf>,
    /// Model checkpoint; a zero-initialized (identity) model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Instance-optimization iterations.
    #[arg(long, default_value_t = 0)]
    io: usize,
    #[arg(long, default_value_t = 1e-5)]
    io_lr: f64,
    #[arg(long, default_value = "none")]
    modality_fixed: Modality,
    #[arg(long, default_value = "none")]
    modality_moving: Modality,
    /// Network grid side for a fresh model (ignored with --checkpoint).
    #[arg(long)]
    canonical_side: Option<usize>,
    /// Mid-axial fixed | warped | difference slices as a PGM image.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[command(flatten)]
    annotations: Annotated,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    pairs_per_dataset: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write a checkpoint every N epochs (always at the end).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(x) = self.pairs_per_dataset {
            cfg.pairs_per_dataset = x;
        }
        if let Some(x) = self.lr {
            cfg.lr = x;
        }
        if let Some(x) = self.lambda {
            cfg.loss.lambda = x;
        }
        if let Some(x) = self.seed {
            cfg.seed = x;
        }
        if let Some(x) = self.checkpoint_every {
            cfg.checkpoint_every = x;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    epochs_phase1: Option<usize>,
    #[arg(long)]
    epochs_phase2: Option<usize>,
    #[arg(long)]
    canonical_side: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    annotations: Annotated,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    modality: Modality,
    #[arg(long, default_value_t = DEFAULT_CANONICAL_SIDE)]
    canonical_side: usize,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Treat the input as a label map (nearest-neighbour).
    #[arg(long)]
    labels: bool,
    /// Image whose geometry the output takes; must match the map grid.
    #[arg(long)]
    reference: Option<PathBuf>,
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Error> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn register(a: &RegisterArgs) -> Result<(), Error> {
    let fixed = io::read_volume(&a.fixed)?;
    let moving = io::read_volume(&a.moving)?;
    let ann = a.annotations.load()?;
    let model = match &a.checkpoint {
        Some(p) => load_model(p)?.0,
        None => RegistrationModel::new(ModelConfig {
            canonical_side: a.canonical_side.unwrap_or(DEFAULT_CANONICAL_SIDE),
            ..ModelConfig::default()
        })?,
    };
    let io_cfg = InstanceConfig { iterations: a.io, lr: a.io_lr, ..InstanceConfig::default() };
    let mut trace = PipelineTrace::default();
    let start = std::time::Instant::now();
    let phi = register_pair(
        &model,
        &fixed,
        &moving,
        (a.modality_fixed, a.modality_moving),
        (a.io > 0).then_some(&io_cfg),
        &mut trace,
    )?;
    io::write_transform(&phi, &a.out_map)?;
    let mut report = compute_metrics(&phi, fixed.geometry(), moving.geometry(), &ann.view(), &mut trace)?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    if a.out_warped.is_some() || a.snapshot.is_some() {
        let warped = warp(&moving, &phi, Some(fixed.geometry()))?;
        if let Some(p) = &a.out_warped {
            io::write_volume(&warped, p)?;
        }
        if let Some(p) = &a.snapshot {
            snapshot::write_triptych(&fixed, &warped, p)?;
        }
    }
    print_json(&report)
}

fn train_config(manifest: &io::DatasetManifest, model: &mut ModelConfig) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    manifest.config.apply(&mut cfg, model);
    cfg
}

fn train(a: &TrainArgs) -> Result<(), Error> {
    let manifest = load_manifest(&a.manifest)?;
    let mut model_cfg = ModelConfig::default();
    let mut cfg = train_config(&manifest, &mut model_cfg);
    a.overrides.apply(&mut cfg);
    if let Some(x) = a.epochs_phase1 {
        cfg.epochs_phase1 = x;
    }
    if let Some(x) = a.epochs_phase2 {
        cfg.epochs_phase2 = x;
    }
    if let Some(x) = a.canonical_side {
        model_cfg.canonical_side = x;
    }
    if let Some(x) = a.base_channels {
        model_cfg.unet.base_channels = x;
    }
    if let Some(x) = a.overrides.seed {
        model_cfg.seed = x;
    }
    let datasets = manifest.load_datasets()?;
    let mut model = RegistrationModel::new(model_cfg)?;
    let out = RunOutput::new(&a.out_dir)?;
    let report = trainer::train(&mut model, &datasets, &cfg, Some(&out))?;
    print_json(&json!({ "epochs": report.epochs, "checkpoints": report.checkpoints }))
}

fn finetune(a: &FinetuneArgs) -> Result<(), Error> {
    let manifest = load_manifest(&a.manifest)?;
    let (mut model, _) = load_model(&a.checkpoint)?;
    let mut model_cfg = *model.config();
    let mut cfg = train_config(&manifest, &mut model_cfg);
    a.overrides.apply(&mut cfg);
    let datasets = manifest.load_datasets()?;
    let out = RunOutput::new(&a.out_dir)?;
    let report = trainer::finetune(&mut model, &datasets, &cfg, a.epochs, Some(&out))?;
    print_json(&json!({ "epochs": report.epochs, "checkpoints": report.checkpoints }))
}

fn evaluate(a: &EvaluateArgs) -> Result<(), Error> {
    let phi = io::read_transform(&a.map)?;
    let fixed = io::read_volume(&a.fixed)?;
    let moving = io::read_volume(&a.moving)?;
    let ann = a.annotations.load()?;
    let mut trace = PipelineTrace::default();
    let report = compute_metrics(&phi, fixed.geometry(), moving.geometry(), &ann.view(), &mut trace)?;
    let text = serde_json::to_string(&report)?;
    std::fs::write(&a.out, format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn preprocess(a: &PreprocessArgs) -> Result<(), Error> {
    let v = io::read_volume(&a.input)?;
    io::write_volume(&prepare(&v, a.modality, a.canonical_side)?, &a.out)
}

fn warp_cmd(a: &WarpArgs) -> Result<(), Error> {
    let phi = io::read_transform(&a.map)?;
    let reference = match &a.reference {
        Some(p) => Some(*io::read_volume(p)?.geometry()),
        None => None,
    };
    if a.labels {
        let lv = io::read_labels(&a.input)?;
        io::write_labels(&warp_labels(&lv, &phi, reference.as_ref())?, &a.out)
    } else {
        let v = io::read_volume(&a.input)?;
        io::write_volume(&warp(&v, &phi, reference.as_ref())?, &a.out)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFiniteGrad(_) => 3,
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn fail(code: u8, kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("ICONFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().map_err(|_| format!("ICONFORGE_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(1, "usage", e.to_string().trim_end()),
    };
    if let Err(msg) = configure_threads() {
        return fail(1, "usage", &msg);
    }
    let result = match &cli.command {
        Command::Register(a) => register(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Warp(a) => warp_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(exit_code(&e), e.code(), &e.to_string()),
    }
}
