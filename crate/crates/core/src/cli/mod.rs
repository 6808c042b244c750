//! Command-line interface. Every subcommand is deterministic for a fixed
//! `--seed`, whatever `--threads` is.

pub mod experiment;
pub mod gradcheck;

use crate::dataio::{
    generate_dataset, read_mask_pair, write_mask_pair, write_obj, write_results, DataError,
    DatasetOptions, ResultRow, SceneDescriptor, DEFAULT_FOCAL, DEFAULT_IMAGE_SIZE, MESH_RESOLUTION,
};
use crate::eval::{EvalError, IouSampler, DEFAULT_IOU_SAMPLES, MIN_IOU_SAMPLES};
use crate::generator::{Category, GeneratorError};
use crate::geometry::{cartesian_to_spherical, GeometryError};
use crate::occfield::{extract_mesh, MeshError};
use crate::optimizer::{reconstruct, OptimizerConfig, OptimizerError, DEFAULT_CLIP_NORM};
use crate::shadow::{render_shadow, RenderMode, ShadowError, DEFAULT_TAU};
use clap::{Args, Parser, Subcommand};
use experiment::{category_means, evaluate_dataset, EvalOptions, Method};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Step size for known light and pose.
pub const KNOWN_SCENE_LR: f64 = 1.0;
/// Step size when the light or the pose is searched too.
pub const UNKNOWN_SCENE_LR: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    /// 0 success, 1 IO or usage, 2 data generation exhausted, 3 optimization failed.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(DataError::DegenerateScene { .. }) => 2,
            CliError::Optimizer(OptimizerError::AllRestartsFailed(_)) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "umbra", version, about = "Recover 3D shape from a cast shadow by latent search")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "UMBRA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: one per core).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,
    /// Print the resolved configuration as JSON before running.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Render a scene's ground-truth shadow.
    Render(RenderArgs),
    /// Recover a shape from one shadow.
    Reconstruct(ReconstructArgs),
    /// Score a method on a dataset's test split.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value = "mixed")]
    pub category: Category,
    /// Use the hand-built composite shapes instead of generator samples.
    #[arg(long)]
    pub held_out: bool,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE, value_parser = clap::value_parser!(u32).range(8..))]
    pub size: u32,
    #[arg(long, default_value_t = DEFAULT_FOCAL)]
    pub focal: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Render in smooth mode at this temperature instead of hard mode.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[arg(long)]
    pub unknown_light: bool,
    #[arg(long)]
    pub unknown_pose: bool,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub restarts: u64,
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    /// Step size (default 1.0, or 0.01 with an unknown light or pose).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Disable the decaying latent noise.
    #[arg(long)]
    pub no_noise: bool,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
}

impl SearchArgs {
    pub fn optimizer_config(&self, seed: u64) -> Result<OptimizerConfig, CliError> {
        let unknown = self.unknown_light || self.unknown_pose;
        let config = OptimizerConfig {
            steps: self.steps as usize,
            step_size: self
                .lr
                .unwrap_or(if unknown { UNKNOWN_SCENE_LR } else { KNOWN_SCENE_LR }),
            restarts: self.restarts as usize,
            noise: !self.no_noise,
            unknown_light: self.unknown_light,
            unknown_pose: self.unknown_pose,
            tau: self.tau,
            seed,
            clip_norm: DEFAULT_CLIP_NORM,
            latent_radius: 1.0,
        };
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    /// Observed shadow; a `.valid.pgm` sibling, when present, masks pixels.
    #[arg(long)]
    pub shadow: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_SAMPLES as u64, value_parser = clap::value_parser!(u64).range(MIN_IOU_SAMPLES as u64..))]
    pub iou_samples: u64,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub cases: u64,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stderr, results to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?
            .install(|| dispatch(cli)),
        None => dispatch(cli),
    }
}

fn echo_config(cli: &Cli, resolved: serde_json::Value) {
    if cli.verbose {
        println!("{}", json!({ "cli": cli, "resolved": resolved }));
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Render(a) => render(cli, a),
        Command::Reconstruct(a) => reconstruct_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Gradcheck(a) => gradcheck_cmd(cli, a),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<(), CliError> {
    if !(a.focal.is_finite() && a.focal > 0.0) {
        return Err(CliError::Usage(format!("focal length must be positive, got {}", a.focal)));
    }
    let opts = DatasetOptions {
        scenes: a.n as usize,
        category: a.category,
        seed: cli.seed,
        width: a.size,
        height: a.size,
        focal: a.focal,
        held_out: a.held_out,
    };
    echo_config(cli, json!({ "dataset": format!("{opts:?}") }));
    let manifest = generate_dataset(&a.out, &opts)?;
    let test = manifest.split(crate::dataio::Split::Test).count();
    println!(
        "{}",
        json!({ "out": a.out, "scenes": manifest.scenes.len(), "test": test, "train": manifest.scenes.len() - test })
    );
    Ok(())
}

fn render(cli: &Cli, a: &RenderArgs) -> Result<(), CliError> {
    echo_config(cli, json!({}));
    let desc = SceneDescriptor::load(&a.scene)?;
    let scene = desc.scene()?;
    let mode = match a.tau {
        Some(tau) => RenderMode::Smooth { tau },
        None => RenderMode::Hard,
    };
    let mut image = render_shadow(&scene, &desc.shape, mode)?;
    if a.tau.is_none() {
        image = image.binarized();
    }
    write_mask_pair(&a.out, &image)?;
    println!("{}", json!({ "out": a.out, "shadow_fraction": image.shadow_fraction() }));
    Ok(())
}

#[derive(Serialize)]
struct RestartReport {
    restart: usize,
    final_loss: f64,
    z: Vec<f64>,
    light: [f64; 3],
    light_azimuth: f64,
    light_elevation: f64,
    pose: crate::geometry::PoseSE3,
    /// IoU against the shape recorded in the scene descriptor, in the object
    /// frame when the pose was searched.
    iou: f64,
}

#[derive(Serialize)]
struct FailureReport {
    restart: usize,
    reason: String,
}

#[derive(Serialize)]
struct ReconstructReport {
    config: OptimizerConfig,
    best_restart: usize,
    restarts: Vec<RestartReport>,
    failures: Vec<FailureReport>,
}

#[derive(Serialize)]
struct LossRow {
    restart: usize,
    step: usize,
    loss: f64,
}

fn reconstruct_cmd(cli: &Cli, a: &ReconstructArgs) -> Result<(), CliError> {
    let config = a.search.optimizer_config(cli.seed)?;
    echo_config(cli, json!({ "optimizer": config }));
    let desc = SceneDescriptor::load(&a.scene)?;
    let observed = read_mask_pair(&a.shadow)?;
    let scene = desc.scene()?;
    let (w, h) = (scene.camera.width(), scene.camera.height());
    if (observed.width(), observed.height()) != (w, h) {
        return Err(DataError::SizeMismatch(observed.width(), observed.height(), w, h).into());
    }
    let gen = desc.generator()?;
    let result = reconstruct(&observed, &scene, &gen, &config)?;

    create_dir(&a.out)?;
    let sampler = IouSampler::new(&mut ChaCha8Rng::seed_from_u64(cli.seed), DEFAULT_IOU_SAMPLES)?;
    let ious = experiment::restart_ious(&result, &gen, &desc, config.unknown_pose, &sampler)?;
    let restarts = result
        .by_index()
        .into_iter()
        .zip(ious)
        .map(|(r, iou)| {
            let light = r.light.position();
            let (az, el, _) = cartesian_to_spherical(&light);
            RestartReport {
                restart: r.restart,
                final_loss: r.final_loss,
                z: r.z.as_slice().to_vec(),
                light: light.into(),
                light_azimuth: az,
                light_elevation: el,
                pose: r.pose,
                iou,
            }
        })
        .collect();
    let best = result.best();
    let report = ReconstructReport {
        config,
        best_restart: best.restart,
        restarts,
        failures: result
            .failures
            .iter()
            .map(|f| FailureReport {
                restart: f.restart,
                reason: f.reason.clone(),
            })
            .collect(),
    };
    let path = a.out.join("result.json");
    fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|source| CliError::Io { path, source })?;

    let path = a.out.join("losses.csv");
    let io = |source: std::io::Error| CliError::Io {
        path: path.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&path).map_err(|e| io(e.into()))?;
    for r in result.by_index() {
        for (k, &loss) in r.losses.iter().enumerate() {
            w.serialize(LossRow {
                restart: r.restart,
                step: k + 1,
                loss,
            })
            .map_err(|e| io(e.into()))?;
        }
    }
    w.flush().map_err(io)?;

    write_obj(&a.out.join("best.obj"), &extract_mesh(&best.shape, MESH_RESOLUTION, 0.5)?)?;
    let mut best_scene = scene.clone();
    best_scene.light = best.light;
    best_scene.pose = best.pose;
    let shadow = render_shadow(&best_scene, &gen.decode(&best.z)?, RenderMode::Hard)?.binarized();
    write_mask_pair(&a.out.join("best_shadow.pgm"), &shadow)?;
    println!(
        "{}",
        json!({ "best_restart": best.restart, "final_loss": best.final_loss, "failed_restarts": result.failures.len() })
    );
    Ok(())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<(), CliError> {
    let opts = EvalOptions {
        method: a.method,
        restarts: a.search.restarts as usize,
        optimizer: a.search.optimizer_config(cli.seed)?,
        iou_samples: a.iou_samples as usize,
        seed: cli.seed,
    };
    echo_config(cli, json!({ "eval": opts }));
    if !a.dataset.is_dir() {
        return Err(CliError::Io {
            path: a.dataset.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        });
    }
    let outcomes = evaluate_dataset(&a.dataset, &opts)?;
    let rows: Vec<ResultRow> = outcomes
        .iter()
        .map(|o| ResultRow {
            method: a.method.as_str().into(),
            category: o.category.clone(),
            scene: o.scene.clone(),
            iou: o.iou,
        })
        .collect();
    write_results(&a.out, &rows)?;
    for (category, mean, n) in category_means(&outcomes) {
        println!(
            "{}",
            json!({ "method": a.method.as_str(), "category": category, "scenes": n, "mean_iou": mean })
        );
    }
    Ok(())
}

fn gradcheck_cmd(cli: &Cli, a: &GradcheckArgs) -> Result<(), CliError> {
    echo_config(cli, json!({ "tolerance": gradcheck::TOLERANCE }));
    let reports = gradcheck::run_gradcheck(a.cases as usize, cli.seed)?;
    for r in &reports {
        println!("{}", serde_json::to_string(r).expect("report serializes"));
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.stage).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}
