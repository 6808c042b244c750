//! Latent search: projected gradient descent on the latent (and optionally
//! light angles and yaw/translation) with linearly decaying noise, run from
//! several random restarts.

use crate::generator::{sample_latent, GeneratorSpec, LatentVector};
use crate::geometry::{cartesian_to_spherical, hemisphere_sample, PoseSE3, Vec3};
use crate::occfield::ShapeSpec;
use crate::shadow::{loss_and_gradient, LightSource, Scene, ShadowError, ShadowImage, DEFAULT_TAU, LIGHT_RADIUS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, TAU};
use thiserror::Error;

pub const MIN_ELEVATION: f64 = 0.05;
pub const MAX_ELEVATION: f64 = FRAC_PI_2 - 0.05;
/// Half side of the ground box translations are clamped to.
pub const TRANSLATION_BOUND: f64 = 0.5;
pub const DEFAULT_CLIP_NORM: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(usize),
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("all {0} restarts failed")]
    AllRestartsFailed(usize),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error(transparent)]
    Generator(#[from] crate::generator::GeneratorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub noise: bool,
    pub unknown_light: bool,
    pub unknown_pose: bool,
    pub tau: f64,
    pub seed: u64,
    pub clip_norm: f64,
    /// Radius of the latent sphere.
    pub latent_radius: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            step_size: 1.0,
            restarts: 8,
            noise: true,
            unknown_light: false,
            unknown_pose: false,
            tau: DEFAULT_TAU,
            seed: 0,
            clip_norm: DEFAULT_CLIP_NORM,
            latent_radius: 1.0,
        }
    }
}

impl OptimizerConfig {
    /// Defaults for a search where light and pose are also unknown.
    pub fn unknown_scene() -> Self {
        Self {
            step_size: 0.01,
            unknown_light: true,
            unknown_pose: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: &str| Err(OptimizerError::Config(m.into()));
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step size must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        if !(self.latent_radius > 0.0 && self.latent_radius.is_finite()) {
            return bad("latent radius must be positive");
        }
        Ok(())
    }
}

/// Noise variance at step `k` of `K`: `max(0, (K − 1 − k) / K)`.
pub fn noise_sigma(k: usize, steps: usize) -> f64 {
    ((steps as f64 - 1.0 - k as f64) / steps as f64).max(0.0)
}

/// Variables of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub z: LatentVector,
    pub light: LightSource,
    pub pose: PoseSE3,
}

/// Gradients of the loss with respect to the searched variables.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGradients {
    pub z: Vec<f64>,
    /// `(azimuth, elevation)`.
    pub light_angles: [f64; 2],
    /// With respect to a rotation about `+z`.
    pub yaw: f64,
    pub translation: Vec3,
}

impl StateGradients {
    pub fn zeros(d: usize) -> Self {
        Self {
            z: vec![0.0; d],
            light_angles: [0.0; 2],
            yaw: 0.0,
            translation: Vec3::zeros(),
        }
    }

    fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
            && self.light_angles.iter().all(|v| v.is_finite())
            && self.yaw.is_finite()
            && self.translation.iter().all(|v| v.is_finite())
    }
}

fn clip(v: &mut [f64], max_norm: f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > max_norm {
        v.iter_mut().for_each(|x| *x *= max_norm / n);
    }
}

/// One update at step `k` (1-based). Gradients are clipped per group.
pub fn step<R: Rng + ?Sized>(
    state: &OptimState,
    grads: &StateGradients,
    config: &OptimizerConfig,
    k: usize,
    rng: &mut R,
) -> Result<OptimState, OptimizerError> {
    if !grads.is_finite() || grads.z.len() != state.z.dim() {
        return Err(OptimizerError::NonFiniteGradient(k));
    }
    let eta = config.step_size;
    let mut next = state.clone();

    let mut gz = grads.z.clone();
    clip(&mut gz, config.clip_norm);
    let std = if config.noise {
        noise_sigma(k, config.steps).sqrt()
    } else {
        0.0
    };
    for (v, g) in next.z.as_mut_slice().iter_mut().zip(&gz) {
        let noise: f64 = if std > 0.0 {
            std * Distribution::<f64>::sample(&StandardNormal, rng)
        } else {
            0.0
        };
        *v -= eta * (g + noise);
    }
    next.z.project(config.latent_radius);

    if config.unknown_light {
        if let LightSource::Spherical {
            azimuth,
            elevation,
            radius,
        } = state.light
        {
            let mut ga = grads.light_angles;
            clip(&mut ga, config.clip_norm);
            next.light = LightSource::Spherical {
                azimuth: (azimuth - eta * ga[0]).rem_euclid(TAU),
                elevation: (elevation - eta * ga[1]).clamp(MIN_ELEVATION, MAX_ELEVATION),
                radius,
            };
        }
    }

    if config.unknown_pose {
        let [_, _, qz, qw] = state.pose.quaternion;
        // θ = 2 atan2(qz, qw)
        let n2 = qz * qz + qw * qw;
        let mut gq = [grads.yaw * 2.0 * qw / n2, -grads.yaw * 2.0 * qz / n2];
        clip(&mut gq, config.clip_norm);
        let (nz, nw) = (qz - eta * gq[0], qw - eta * gq[1]);
        let norm = nz.hypot(nw);
        let q = if norm > 0.0 {
            [0.0, 0.0, nz / norm, nw / norm]
        } else {
            state.pose.quaternion
        };
        let mut gt = [grads.translation.x, grads.translation.y];
        clip(&mut gt, config.clip_norm);
        let t = state.pose.translation;
        next.pose = PoseSE3 {
            translation: [
                (t[0] - eta * gt[0]).clamp(-TRANSLATION_BOUND, TRANSLATION_BOUND),
                (t[1] - eta * gt[1]).clamp(-TRANSLATION_BOUND, TRANSLATION_BOUND),
                t[2],
            ],
            quaternion: q,
        };
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartResult {
    pub restart: usize,
    pub z: LatentVector,
    pub light: LightSource,
    pub pose: PoseSE3,
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// Loss of the final state.
    pub final_loss: f64,
    /// Final shape placed in the world.
    pub shape: ShapeSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestartFailure {
    pub restart: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    /// Finished restarts, best (lowest final loss) first.
    pub restarts: Vec<RestartResult>,
    pub failures: Vec<RestartFailure>,
}

impl ReconstructionResult {
    pub fn best(&self) -> &RestartResult {
        &self.restarts[0]
    }

    /// Finished restarts in restart-index order.
    pub fn by_index(&self) -> Vec<&RestartResult> {
        let mut v: Vec<&RestartResult> = self.restarts.iter().collect();
        v.sort_by_key(|r| r.restart);
        v
    }
}

fn scene_for(base: &Scene, state: &OptimState) -> Scene {
    Scene {
        light: state.light,
        pose: state.pose,
        ..base.clone()
    }
}

/// Loss and searched-variable gradients at `state`.
pub fn evaluate(
    observed: &ShadowImage,
    scene: &Scene,
    gen: &GeneratorSpec,
    state: &OptimState,
    tau: f64,
) -> Result<(f64, StateGradients), OptimizerError> {
    let shape = gen.decode(&state.z)?;
    let s = scene_for(scene, state);
    let lg = loss_and_gradient(&s, &shape, observed, tau)?;
    let g = &lg.gradients;
    Ok((
        lg.loss,
        StateGradients {
            z: gen.pullback(&state.z, &g.params)?,
            light_angles: g.light_angles(&state.light).unwrap_or([0.0; 2]),
            yaw: g.yaw,
            translation: g.translation,
        },
    ))
}

fn initial_state(scene: &Scene, gen: &GeneratorSpec, config: &OptimizerConfig, rng: &mut ChaCha8Rng) -> Result<OptimState, OptimizerError> {
    let mut z = sample_latent(rng, gen.latent_dim());
    z.project(config.latent_radius);
    let light = if config.unknown_light {
        let c = hemisphere_sample(rng, LIGHT_RADIUS);
        let (azimuth, elevation, _) = cartesian_to_spherical(&c);
        LightSource::spherical(azimuth, elevation.clamp(MIN_ELEVATION, MAX_ELEVATION))
    } else {
        scene.light
    };
    let pose = if config.unknown_pose {
        let yaw = rng.random_range(0.0..TAU);
        let x = rng.random_range(-TRANSLATION_BOUND..TRANSLATION_BOUND);
        let y = rng.random_range(-TRANSLATION_BOUND..TRANSLATION_BOUND);
        let rest = gen.decode(&z)?.resting_height();
        PoseSE3::from_yaw(yaw, Vec3::new(x, y, rest))
    } else {
        scene.pose
    };
    Ok(OptimState { z, light, pose })
}

/// Runs a single restart. Its random stream depends only on the seed and
/// the restart index.
pub fn run_restart(
    observed: &ShadowImage,
    scene: &Scene,
    gen: &GeneratorSpec,
    config: &OptimizerConfig,
    restart: usize,
) -> Result<RestartResult, OptimizerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(restart as u64);
    let mut state = initial_state(scene, gen, config, &mut rng)?;
    let mut losses = Vec::with_capacity(config.steps);
    for k in 1..=config.steps {
        let (loss, grads) = evaluate(observed, scene, gen, &state, config.tau)?;
        losses.push(loss);
        state = step(&state, &grads, config, k, &mut rng)?;
    }
    let shape = gen.decode(&state.z)?;
    let placed = scene_for(scene, &state).place(&shape);
    let (final_loss, _) = evaluate(observed, scene, gen, &state, config.tau)?;
    Ok(RestartResult {
        restart,
        z: state.z,
        light: state.light,
        pose: state.pose,
        losses,
        final_loss,
        shape: placed,
    })
}

/// Searches for latents (and optionally light and pose) whose shadow
/// explains `observed`. Restarts run in parallel; a restart that diverges
/// is recorded as failed, and an error is returned only if all fail.
pub fn reconstruct(
    observed: &ShadowImage,
    scene: &Scene,
    gen: &GeneratorSpec,
    config: &OptimizerConfig,
) -> Result<ReconstructionResult, OptimizerError> {
    config.validate()?;
    if observed.valid_count() == 0 {
        return Err(ShadowError::NoValidPixels.into());
    }
    let outcomes: Vec<Result<RestartResult, OptimizerError>> = (0..config.restarts)
        .into_par_iter()
        .map(|i| run_restart(observed, scene, gen, config, i))
        .collect();
    let mut restarts = Vec::new();
    let mut failures = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => restarts.push(r),
            Err(OptimizerError::Shadow(ShadowError::NoValidPixels)) => {
                return Err(ShadowError::NoValidPixels.into())
            }
            Err(e) => failures.push(RestartFailure {
                restart: i,
                reason: e.to_string(),
            }),
        }
    }
    if restarts.is_empty() {
        return Err(OptimizerError::AllRestartsFailed(config.restarts));
    }
    restarts.sort_by(|a, b| a.final_loss.total_cmp(&b.final_loss).then(a.restart.cmp(&b.restart)));
    Ok(ReconstructionResult { restarts, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Category, GeneratorConfig};
    use crate::geometry::CameraModel;
    use crate::shadow::{render_shadow, RenderMode};

    #[test]
    fn sigma_schedule() {
        assert!((noise_sigma(1, 300) - 298.0 / 300.0).abs() < 1e-15);
        assert_eq!(noise_sigma(299, 300), 0.0);
        assert_eq!(noise_sigma(300, 300), 0.0);
        for k in 1..300 {
            assert!(noise_sigma(k + 1, 300) <= noise_sigma(k, 300));
        }
    }

    fn unit_state(d: usize) -> OptimState {
        let mut z = LatentVector::new((0..d).map(|i| (i as f64 + 1.0).sin()).collect());
        z.project(1.0);
        OptimState {
            z,
            light: LightSource::spherical(1.0, 0.7),
            pose: PoseSE3::from_yaw(0.4, Vec3::new(0.1, 0.2, 0.3)),
        }
    }

    #[test]
    fn zero_gradient_without_noise_is_a_fixed_point() {
        let state = unit_state(16);
        let config = OptimizerConfig {
            noise: false,
            unknown_light: true,
            unknown_pose: true,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = step(&state, &StateGradients::zeros(16), &config, 5, &mut rng).unwrap();
        for (a, b) in next.z.as_slice().iter().zip(state.z.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(next.light, state.light);
        assert_eq!(next.pose.translation, state.pose.translation);
        for (a, b) in next.pose.quaternion.iter().zip(&state.pose.quaternion) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn steps_preserve_norms_and_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = OptimizerConfig {
            unknown_light: true,
            unknown_pose: true,
            ..Default::default()
        };
        let mut state = unit_state(16);
        for k in 1..=300 {
            let grads = StateGradients {
                z: (0..16).map(|_| rng.random_range(-50.0..50.0)).collect(),
                light_angles: [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)],
                yaw: rng.random_range(-30.0..30.0),
                translation: Vec3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), 5.0),
            };
            state = step(&state, &grads, &config, k, &mut rng).unwrap();
            assert!((state.z.norm() - 1.0).abs() < 1e-9);
            assert!((state.pose.quaternion_norm() - 1.0).abs() < 1e-9);
            assert!(state.pose.is_yaw_only());
            assert_eq!(state.pose.translation[2], 0.3);
            assert!(state.pose.translation[..2].iter().all(|t| t.abs() <= TRANSLATION_BOUND));
            if let LightSource::Spherical { elevation, .. } = state.light {
                assert!((MIN_ELEVATION..=MAX_ELEVATION).contains(&elevation));
            }
        }
        let bad = StateGradients {
            z: vec![f64::NAN; 16],
            ..StateGradients::zeros(16)
        };
        assert_eq!(step(&state, &bad, &config, 1, &mut rng), Err(OptimizerError::NonFiniteGradient(1)));
    }

    #[test]
    fn sphere_constrained_quadratic_descends_to_the_projection() {
        // J(z) = ‖z − z*‖² on the unit sphere is minimised at z*/‖z*‖.
        let d = 8;
        let target: Vec<f64> = (0..d).map(|i| 0.3 * (i as f64 - 3.0)).collect();
        let t_norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
        let optimum: Vec<f64> = target.iter().map(|v| v / t_norm).collect();
        let loss = |z: &[f64]| z.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let best = loss(&optimum);
        let config = OptimizerConfig {
            noise: false,
            step_size: 0.1,
            ..Default::default()
        };
        let mut state = unit_state(d);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut prev = loss(state.z.as_slice());
        for k in 1..=1000 {
            if prev - best < 1e-4 {
                return;
            }
            let grads = StateGradients {
                z: state.z.as_slice().iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect(),
                ..StateGradients::zeros(d)
            };
            state = step(&state, &grads, &config, k, &mut rng).unwrap();
            let now = loss(state.z.as_slice());
            assert!(now < prev, "step {k}: {now} !< {prev}");
            prev = now;
        }
        panic!("did not converge: gap {}", prev - best);
    }

    fn small_problem(seed: u64) -> (Scene, GeneratorSpec, ShadowImage) {
        let camera = CameraModel::look_at(
            Vec3::new(1.2, -0.9, 1.3),
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, 1.0),
            16.0,
            32,
            32,
        )
        .unwrap();
        let gen = GeneratorSpec::new(GeneratorConfig::new(Category::Blobs, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = gen.decode(&sample_latent(&mut rng, gen.latent_dim())).unwrap();
        let scene = Scene::new(
            camera,
            LightSource::spherical(2.2, 0.9),
            PoseSE3::from_yaw(0.0, Vec3::new(0.0, 0.0, truth.resting_height())),
        );
        let observed = render_shadow(&scene, &truth, RenderMode::Hard).unwrap().binarized();
        (scene, gen, observed)
    }

    #[test]
    fn noiseless_small_steps_do_not_increase_the_loss() {
        for seed in 0..10 {
            let (scene, gen, observed) = small_problem(seed);
            let config = OptimizerConfig {
                steps: 25,
                restarts: 1,
                noise: false,
                step_size: 0.002,
                seed,
                ..Default::default()
            };
            let result = reconstruct(&observed, &scene, &gen, &config).unwrap();
            let losses = &result.best().losses;
            for k in 5..losses.len() - 1 {
                assert!(losses[k + 1] <= losses[k] + 1e-12, "seed {seed} step {k}: {losses:?}");
            }
        }
    }

    #[test]
    fn reconstruction_is_deterministic_and_restart_independent() {
        let (scene, gen, observed) = small_problem(4);
        let config = OptimizerConfig {
            steps: 6,
            restarts: 3,
            seed: 11,
            unknown_light: true,
            unknown_pose: true,
            ..Default::default()
        };
        let a = reconstruct(&observed, &scene, &gen, &config).unwrap();
        let b = reconstruct(&observed, &scene, &gen, &config).unwrap();
        assert_eq!(a, b);
        let solo = run_restart(&observed, &scene, &gen, &config, 2).unwrap();
        let same = a.restarts.iter().find(|r| r.restart == 2).unwrap();
        assert_eq!(&solo, same);
        for r in &a.restarts {
            assert!((r.z.norm() - 1.0).abs() < 1e-6);
            assert!((r.pose.quaternion_norm() - 1.0).abs() < 1e-6);
            assert_eq!(r.losses.len(), 6);
        }
        assert!(a.restarts.windows(2).all(|w| w[0].final_loss <= w[1].final_loss));
    }

    #[test]
    fn all_invalid_observation_is_rejected() {
        let (scene, gen, mut observed) = small_problem(1);
        observed.valid_mut().iter_mut().for_each(|v| *v = false);
        let config = OptimizerConfig {
            steps: 2,
            restarts: 1,
            ..Default::default()
        };
        assert_eq!(
            reconstruct(&observed, &scene, &gen, &config).unwrap_err(),
            OptimizerError::Shadow(ShadowError::NoValidPixels)
        );
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { restarts: 0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { step_size: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!(OptimizerConfig::unknown_scene().step_size, 0.01);
    }
}
