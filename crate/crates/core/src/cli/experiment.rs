//! Dataset-level evaluation of the latent search and the two baselines.

use super::CliError;
use crate::dataio::{load_scene, LoadedScene, Manifest, SceneDescriptor, Split, MANIFEST_FILE};
use crate::eval::{prefix_max, rank_by_shadow, random_baseline, IouSampler};
use crate::geometry::{PoseSE3, Vec3};
use crate::occfield::ShapeSpec;
use crate::generator::GeneratorSpec;
use crate::optimizer::{reconstruct, OptimizerConfig, ReconstructionResult};
use crate::shadow::{render_shadow, RenderMode, ShadowImage};
use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Latent,
    Nn,
    Random,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Latent => "latent",
            Method::Nn => "nn",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalOptions {
    pub method: Method,
    /// Candidates per scene; the best by IoU is scored.
    pub restarts: usize,
    pub optimizer: OptimizerConfig,
    pub iou_samples: usize,
    pub seed: u64,
}

/// Per-scene outcome. `curve[n − 1]` is the best IoU among the first `n`
/// candidates, so `iou` is its last entry.
#[derive(Debug, Clone, Serialize)]
pub struct SceneOutcome {
    pub scene: String,
    pub category: String,
    pub iou: f64,
    pub curve: Vec<f64>,
    /// Loss of the lowest-loss restart (latent search only).
    pub best_loss: Option<f64>,
    /// Light of the lowest-loss restart and the true light.
    pub light: Option<[f64; 3]>,
    pub true_light: [f64; 3],
}

/// Per-scene stream seed.
fn scene_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// `shape` placed with the scene's yaw and xy translation, resting on the ground.
fn place_like(shape: &ShapeSpec, pose: &PoseSE3) -> PoseSE3 {
    let t = pose.translation;
    PoseSE3::from_yaw(pose.yaw(), Vec3::new(t[0], t[1], shape.resting_height()))
}

fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<(usize, LoadedScene)>, CliError> {
    manifest
        .split(split)
        .map(|e| Ok((e.index, load_scene(&dir.join(&e.dir))?)))
        .collect()
}

/// Runs `opts.method` on every test scene of the dataset in `dir`, scenes
/// in order. Restarts or candidate renders run in parallel within a scene.
pub fn evaluate_dataset(dir: &Path, opts: &EvalOptions) -> Result<Vec<SceneOutcome>, CliError> {
    let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
    let test = load_split(dir, &manifest, Split::Test)?;
    let train: Vec<ShapeSpec> = if opts.method == Method::Latent {
        Vec::new()
    } else {
        let train = load_split(dir, &manifest, Split::Train)?;
        if train.is_empty() {
            return Err(crate::eval::EvalError::EmptyTrainingSet.into());
        }
        train.into_iter().map(|(_, s)| s.descriptor.shape).collect()
    };
    let sampler = IouSampler::new(&mut ChaCha8Rng::seed_from_u64(opts.seed), opts.iou_samples)?;
    test.iter()
        .map(|(index, scene)| evaluate_scene(*index, scene, &train, &sampler, opts))
        .collect()
}

fn evaluate_scene(
    index: usize,
    loaded: &LoadedScene,
    train: &[ShapeSpec],
    sampler: &IouSampler,
    opts: &EvalOptions,
) -> Result<SceneOutcome, CliError> {
    let desc = &loaded.descriptor;
    let scene = desc.scene()?;
    let truth = desc.placed_shape();
    let seed = scene_seed(opts.seed, index);
    let name = loaded
        .dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut outcome = SceneOutcome {
        scene: name,
        category: desc.generator.category.to_string(),
        iou: 0.0,
        curve: Vec::new(),
        best_loss: None,
        light: None,
        true_light: desc.light,
    };
    match opts.method {
        Method::Latent => {
            let gen = desc.generator()?;
            let config = OptimizerConfig {
                restarts: opts.restarts,
                seed,
                ..opts.optimizer
            };
            let result = reconstruct(&loaded.observed, &scene, &gen, &config)?;
            outcome.curve = prefix_max(&restart_ious(&result, &gen, desc, config.unknown_pose, sampler)?);
            outcome.best_loss = Some(result.best().final_loss);
            outcome.light = Some(result.best().light.position().into());
        }
        Method::Nn => {
            let shadows: Vec<ShadowImage> = train
                .par_iter()
                .map(|shape| {
                    let mut s = scene.clone();
                    s.pose = place_like(shape, &desc.pose);
                    render_shadow(&s, shape, RenderMode::Hard).map(|img| img.binarized())
                })
                .collect::<Result<_, _>>()?;
            let order = rank_by_shadow(&loaded.observed, &shadows)?;
            let ious: Vec<f64> = order
                .iter()
                .take(opts.restarts)
                .map(|&i| sampler.iou(&placed(&train[i], &desc.pose), &truth).value)
                .collect();
            outcome.curve = prefix_max(&ious);
        }
        Method::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ious = (0..opts.restarts)
                .map(|_| {
                    let shape = random_baseline(train, &mut rng)?;
                    Ok(sampler.iou(&placed(shape, &desc.pose), &truth).value)
                })
                .collect::<Result<Vec<f64>, CliError>>()?;
            outcome.curve = prefix_max(&ious);
        }
    }
    outcome.iou = *outcome.curve.last().ok_or(crate::eval::EvalError::NoRestarts)?;
    Ok(outcome)
}

/// IoU of every restart against the scene's shape, in restart-index order.
/// With a known pose shapes are compared where they stand; when the pose
/// was searched too, decoded shapes are compared with the true shape in
/// the object frame, so pose error does not count against shape quality.
pub fn restart_ious(
    result: &ReconstructionResult,
    gen: &GeneratorSpec,
    desc: &SceneDescriptor,
    unknown_pose: bool,
    sampler: &IouSampler,
) -> Result<Vec<f64>, CliError> {
    let truth = desc.placed_shape();
    result
        .by_index()
        .into_iter()
        .map(|r| {
            Ok(if unknown_pose {
                sampler.iou(&gen.decode(&r.z)?, &desc.shape).value
            } else {
                sampler.iou(&r.shape, &truth).value
            })
        })
        .collect()
}

fn placed(shape: &ShapeSpec, pose: &PoseSE3) -> ShapeSpec {
    shape.clone().with_pose(place_like(shape, pose).compose(&shape.pose))
}

/// Mean IoU per category, in first-seen order.
pub fn category_means(outcomes: &[SceneOutcome]) -> Vec<(String, f64, usize)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for o in outcomes {
        match out.iter_mut().find(|(c, _, _)| *c == o.category) {
            Some(entry) => {
                entry.1 += o.iou;
                entry.2 += 1;
            }
            None => out.push((o.category.clone(), o.iou, 1)),
        }
    }
    for entry in &mut out {
        entry.1 /= entry.2 as f64;
    }
    out
}

/// Azimuth of a light position, in `[0, 2π)`.
pub fn light_azimuth(position: [f64; 3]) -> f64 {
    let (az, _, _) = crate::geometry::cartesian_to_spherical(&position.into());
    az.rem_euclid(std::f64::consts::TAU)
}
