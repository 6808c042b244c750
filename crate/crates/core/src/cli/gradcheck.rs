//! Central-difference checks of every analytic gradient in the pipeline.

use super::CliError;
use crate::generator::{sample_latent, Category, GeneratorConfig, GeneratorSpec, LatentVector};
use crate::geometry::{spherical_to_cartesian, CameraModel, PoseSE3, Vec3};
use crate::optimizer::{evaluate, OptimState};
use crate::shadow::{render_shadow, render_shadow_with_grads, LightSource, RenderMode, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const TOLERANCE: f64 = 1e-3;
const TAU: f64 = 0.1;
const IMAGE_SIZE: u32 = 64;
const H_DECODE: f64 = 1e-6;
const H: f64 = 1e-5;
/// Components are compared relative to themselves, but never to less than
/// this fraction of the largest component of the same gradient.
const FLOOR_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: &'static str,
    pub cases: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Largest relative error between `analytic` and `numeric`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (FLOOR_FRACTION * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn central(f: &mut impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

struct Case {
    gen: GeneratorSpec,
    z: LatentVector,
    scene: Scene,
    azimuth: f64,
    elevation: f64,
    yaw: f64,
    translation: Vec3,
}

impl Case {
    fn new(rng: &mut ChaCha8Rng, index: usize) -> Result<Self, CliError> {
        let category = Category::ALL[index % Category::ALL.len()];
        let gen = GeneratorSpec::new(GeneratorConfig::new(category, rng.random()))?;
        let z = sample_latent(rng, gen.latent_dim());
        let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
        let elevation = rng.random_range(0.6..1.2);
        let yaw = rng.random_range(0.0..std::f64::consts::TAU);
        let rest = gen.decode(&z)?.resting_height();
        let translation = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rest);
        let eye = spherical_to_cartesian(rng.random_range(0.0..std::f64::consts::TAU), 1.2, 2.0);
        let camera = CameraModel::look_at(eye, Vec3::zeros(), Vec3::z(), 36.0, IMAGE_SIZE, IMAGE_SIZE)?;
        let scene = Scene::new(
            camera,
            LightSource::spherical(azimuth, elevation),
            PoseSE3::from_yaw(yaw, translation),
        );
        Ok(Self {
            gen,
            z,
            scene,
            azimuth,
            elevation,
            yaw,
            translation,
        })
    }

    /// Scene with light angles, yaw and translation offset by `d`.
    fn perturbed(&self, d: &[f64; 6]) -> Scene {
        let mut s = self.scene.clone();
        s.light = LightSource::spherical(self.azimuth + d[0], self.elevation + d[1]);
        s.pose = PoseSE3::from_yaw(self.yaw + d[2], self.translation + Vec3::new(d[3], d[4], d[5]));
        s
    }

    fn shifted_z(&self, j: usize, d: f64) -> LatentVector {
        let mut z = self.z.clone();
        z.as_mut_slice()[j] += d;
        z
    }
}

fn check_decode(case: &Case) -> Result<(f64, usize), CliError> {
    let jac = case.gen.decode_jacobian(&case.z)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for j in 0..case.gen.latent_dim() {
        let up = case.gen.decode_params(&case.shifted_z(j, H_DECODE))?;
        let dn = case.gen.decode_params(&case.shifted_z(j, -H_DECODE))?;
        for i in 0..up.len() {
            analytic.push(jac[(i, j)]);
            numeric.push((up[i] - dn[i]) / (2.0 * H_DECODE));
        }
    }
    Ok((max_relative_error(&analytic, &numeric), analytic.len()))
}

fn check_occupancy(case: &Case, rng: &mut ChaCha8Rng) -> Result<(f64, usize), CliError> {
    let shape = case.scene.place(&case.gen.decode(&case.z)?);
    // A point in the surface band, where the field is not saturated.
    let mut x = shape.pose.apply(&Vec3::zeros());
    for _ in 0..1000 {
        let p = shape.pose.apply(&Vec3::new(
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.8..0.8),
        ));
        let f = shape.occupancy(&p);
        if f > 0.05 && f < 0.95 {
            x = p;
            break;
        }
    }
    let g = shape.occupancy_gradient(&x);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = 1.0;
        analytic.push(g.d_point[i]);
        numeric.push(central(&mut |d| shape.occupancy(&(x + e * d)), H));
        analytic.push(g.d_translation[i]);
        numeric.push(central(
            &mut |d| {
                let mut s = shape.clone();
                s.pose.translation[i] += d;
                s.occupancy(&x)
            },
            H,
        ));
    }
    let params = shape.params();
    for j in 0..params.len() {
        analytic.push(g.d_params[j]);
        numeric.push(central(
            &mut |d| {
                let mut p = params.clone();
                p[j] += d;
                shape.with_params(&p).map(|s| s.occupancy(&x)).unwrap_or(f64::NAN)
            },
            H,
        ));
    }
    analytic.push(g.d_yaw);
    numeric.push(central(
        &mut |d| {
            let mut s = shape.clone();
            let rotated = PoseSE3::from_yaw(d, Vec3::zeros()).compose(&shape.pose);
            s.pose = PoseSE3 {
                translation: shape.pose.translation,
                quaternion: rotated.quaternion,
            };
            s.occupancy(&x)
        },
        H,
    ));
    Ok((max_relative_error(&analytic, &numeric), analytic.len()))
}

fn check_renderer(case: &Case, rng: &mut ChaCha8Rng) -> Result<(f64, usize), CliError> {
    let (image, pullback) = render_shadow_with_grads(&case.scene, &case.gen, &case.z, TAU)?;
    let upstream: Vec<f64> = (0..image.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let valid = image.valid().to_vec();
    let g = pullback.pullback(&upstream)?;
    let functional = |scene: &Scene, z: &LatentVector| -> f64 {
        let shape = case.gen.decode(z).expect("latent has the generator's dimension");
        let img = render_shadow(scene, &shape, RenderMode::Smooth { tau: TAU }).expect("scene renders");
        img.values()
            .iter()
            .zip(&upstream)
            .zip(&valid)
            .filter(|(_, &ok)| ok)
            .map(|((v, u), _)| v * u)
            .sum()
    };
    let mut analytic = g.z.clone();
    let mut numeric: Vec<f64> = (0..case.z.dim())
        .map(|j| central(&mut |d| functional(&case.scene, &case.shifted_z(j, d)), H))
        .collect();
    let angles = g.light_angles.unwrap_or([f64::NAN; 2]);
    let scene_grads = [angles[0], angles[1], g.yaw, g.translation.x, g.translation.y, g.translation.z];
    for (k, a) in scene_grads.into_iter().enumerate() {
        analytic.push(a);
        numeric.push(central(
            &mut |d| {
                let mut off = [0.0; 6];
                off[k] = d;
                functional(&case.perturbed(&off), &case.z)
            },
            H,
        ));
    }
    Ok((max_relative_error(&analytic, &numeric), analytic.len()))
}

fn check_loss(case: &Case, rng: &mut ChaCha8Rng) -> Result<(f64, usize), CliError> {
    let target = case.gen.decode(&sample_latent(rng, case.gen.latent_dim()))?;
    let observed = render_shadow(&case.scene, &target, RenderMode::Hard)?.binarized();
    let state = OptimState {
        z: case.z.clone(),
        light: case.scene.light,
        pose: case.scene.pose,
    };
    let (_, g) = evaluate(&observed, &case.scene, &case.gen, &state, TAU)?;
    let loss = |z: LatentVector, off: [f64; 6]| -> f64 {
        let s = case.perturbed(&off);
        let st = OptimState {
            z,
            light: s.light,
            pose: s.pose,
        };
        evaluate(&observed, &case.scene, &case.gen, &st, TAU).map(|r| r.0).unwrap_or(f64::NAN)
    };
    let mut analytic = g.z.clone();
    let mut numeric: Vec<f64> = (0..case.z.dim())
        .map(|j| central(&mut |d| loss(case.shifted_z(j, d), [0.0; 6]), H))
        .collect();
    let scene_grads = [
        g.light_angles[0],
        g.light_angles[1],
        g.yaw,
        g.translation.x,
        g.translation.y,
        g.translation.z,
    ];
    for (k, a) in scene_grads.into_iter().enumerate() {
        analytic.push(a);
        numeric.push(central(
            &mut |d| {
                let mut off = [0.0; 6];
                off[k] = d;
                loss(case.z.clone(), off)
            },
            H,
        ));
    }
    Ok((max_relative_error(&analytic, &numeric), analytic.len()))
}

/// Checks decode, occupancy, the smooth renderer and the full loss on
/// `cases` random configurations.
pub fn run_gradcheck(cases: usize, seed: u64) -> Result<Vec<StageReport>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stages = ["decode", "occupancy", "renderer", "loss"];
    let mut worst = [0.0f64; 4];
    let mut checked = [0usize; 4];
    for index in 0..cases {
        let case = Case::new(&mut rng, index)?;
        let results = [
            check_decode(&case)?,
            check_occupancy(&case, &mut rng)?,
            check_renderer(&case, &mut rng)?,
            check_loss(&case, &mut rng)?,
        ];
        for (s, (err, n)) in results.into_iter().enumerate() {
            // A NaN sticks and fails the comparison below.
            worst[s] = if err.is_nan() || worst[s].is_nan() { f64::NAN } else { worst[s].max(err) };
            checked[s] += n;
        }
    }
    Ok(stages
        .iter()
        .enumerate()
        .map(|(s, &stage)| StageReport {
            stage,
            cases,
            checked: checked[s],
            max_rel_error: worst[s],
            pass: worst[s] < TOLERANCE,
        })
        .collect())
}
