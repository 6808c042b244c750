//! Differentiable shadow rendering.
//!
//! Every camera pixel is back-projected to the ground, and occupancy is
//! pooled over evenly spaced samples on the segment from the light to that
//! ground point. Pooling is a hard max, or a temperature-weighted soft max
//! whose derivatives are recorded on an [`autodiff::Tape`](crate::autodiff::Tape).

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::generator::{GeneratorError, GeneratorSpec, LatentVector};
use crate::geometry::{
    pixel_to_ground, spherical_to_cartesian, CameraModel, Plane, PoseSE3, Vec3,
};
use crate::occfield::{PreparedShape, ShapeSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_RAY_SAMPLES: usize = 128;
pub const LIGHT_RADIUS: f64 = 3.0;
pub const DEFAULT_TAU: f64 = 0.1;
/// Occupancy above which a camera ray counts as hitting the object.
pub const OCCLUSION_THRESHOLD: f64 = 0.5;
/// Camera rays that miss the ground are marched this far.
pub const SEGMENTATION_FAR: f64 = 10.0;
/// Predicted probabilities are clamped to `[ε, 1 − ε]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShadowError {
    #[error("light at height {0} is not above the ground plane")]
    LightBelowGround(f64),
    #[error("at least 2 ray samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("smooth-max temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(u32, u32, u32, u32),
    #[error("no pixel is valid in both images")]
    NoValidPixels,
    #[error("image buffers do not match {0}x{1}")]
    BadBuffer(u32, u32),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

type Result<T> = std::result::Result<T, ShadowError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LightSource {
    Cartesian { position: [f64; 3] },
    /// `ρ (cos e cos a, cos e sin a, sin e)`.
    Spherical {
        azimuth: f64,
        elevation: f64,
        radius: f64,
    },
}

impl LightSource {
    pub fn at(position: Vec3) -> Self {
        LightSource::Cartesian {
            position: position.into(),
        }
    }

    pub fn spherical(azimuth: f64, elevation: f64) -> Self {
        LightSource::Spherical {
            azimuth,
            elevation,
            radius: LIGHT_RADIUS,
        }
    }

    pub fn position(&self) -> Vec3 {
        match *self {
            LightSource::Cartesian { position } => position.into(),
            LightSource::Spherical {
                azimuth,
                elevation,
                radius,
            } => spherical_to_cartesian(azimuth, elevation, radius),
        }
    }

    /// `∂c/∂azimuth` and `∂c/∂elevation` for spherical lights.
    pub fn angle_jacobian(&self) -> Option<[Vec3; 2]> {
        match *self {
            LightSource::Cartesian { .. } => None,
            LightSource::Spherical {
                azimuth,
                elevation,
                radius,
            } => {
                let (sa, ca) = azimuth.sin_cos();
                let (se, ce) = elevation.sin_cos();
                Some([
                    radius * Vec3::new(-ce * sa, ce * ca, 0.0),
                    radius * Vec3::new(-se * ca, -se * sa, ce),
                ])
            }
        }
    }
}

/// Row-major image of shadow probabilities with a per-pixel validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowImage {
    width: u32,
    height: u32,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl ShadowImage {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            values: vec![0.0; n],
            valid: vec![true; n],
        }
    }

    pub fn from_parts(width: u32, height: u32, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = width as usize * height as usize;
        if values.len() != n || valid.len() != n {
            return Err(ShadowError::BadBuffer(width, height));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn value(&self, col: u32, row: u32) -> f64 {
        self.values[self.index(col, row)]
    }

    pub fn is_valid(&self, col: u32, row: u32) -> bool {
        self.valid[self.index(col, row)]
    }

    pub fn index(&self, col: u32, row: u32) -> usize {
        row as usize * self.width as usize + col as usize
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn valid_mut(&mut self) -> &mut [bool] {
        &mut self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Values thresholded at 0.5, validity kept.
    pub fn binarized(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect(),
            ..self.clone()
        }
    }

    /// Fraction of valid pixels with value above 0.5.
    pub fn shadow_fraction(&self) -> f64 {
        let valid = self.valid_count();
        if valid == 0 {
            return 0.0;
        }
        let dark = self
            .values
            .iter()
            .zip(&self.valid)
            .filter(|&(&v, &ok)| ok && v > 0.5)
            .count();
        dark as f64 / valid as f64
    }

    fn check_same_size(&self, other: &Self) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(ShadowError::SizeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Mean absolute value difference over pixels valid in both.
    pub fn mean_abs_difference(&self, other: &Self) -> Result<f64> {
        self.check_same_size(other)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.len() {
            if self.valid[i] && other.valid[i] {
                sum += (self.values[i] - other.values[i]).abs();
                n += 1;
            }
        }
        if n == 0 {
            return Err(ShadowError::NoValidPixels);
        }
        Ok(sum / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub camera: CameraModel,
    pub plane: Plane,
    pub light: LightSource,
    /// Object pose, composed on top of the shape's own pose.
    pub pose: PoseSE3,
    pub ray_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RenderMode {
    Hard,
    Smooth { tau: f64 },
}

impl Scene {
    pub fn new(camera: CameraModel, light: LightSource, pose: PoseSE3) -> Self {
        Self {
            camera,
            plane: Plane::ground(),
            light,
            pose,
            ray_samples: DEFAULT_RAY_SAMPLES,
        }
    }

    /// `shape` moved into the world by the scene pose.
    pub fn place(&self, shape: &ShapeSpec) -> ShapeSpec {
        shape.clone().with_pose(self.pose.compose(&shape.pose))
    }

    fn check(&self) -> Result<()> {
        if self.ray_samples < 2 {
            return Err(ShadowError::TooFewSamples(self.ray_samples));
        }
        let h = self.plane.signed_distance(&self.light.position());
        if !(h > 0.0) {
            return Err(ShadowError::LightBelowGround(h));
        }
        Ok(())
    }

    /// Ground point seen by every pixel, row-major; `None` when the camera
    /// ray misses the plane.
    pub fn ground_points(&self) -> Vec<Option<Vec3>> {
        let (w, h) = (self.camera.width(), self.camera.height());
        (0..h)
            .flat_map(|row| (0..w).map(move |col| (col, row)))
            .map(|(col, row)| {
                pixel_to_ground(&self.camera, CameraModel::pixel_center(col, row), &self.plane).ok()
            })
            .collect()
    }
}

/// Pools occupancy along segments with per-primitive culling.
struct Marcher<'a> {
    prep: &'a PreparedShape<'a>,
    samples: usize,
    intervals: Vec<Option<(f64, f64)>>,
    active: Vec<bool>,
}

impl<'a> Marcher<'a> {
    fn new(prep: &'a PreparedShape<'a>, samples: usize) -> Self {
        Self {
            prep,
            samples,
            intervals: Vec::with_capacity(prep.primitive_count()),
            active: vec![false; prep.primitive_count()],
        }
    }

    /// Calls `visit(t, x_obj, active)` for every sample `t = (i + ½)/N` on
    /// `a → b` that at least one primitive can reach, and returns the
    /// number of samples skipped (whose occupancy is treated as 0).
    fn march(&mut self, a: &Vec3, b: &Vec3, mut visit: impl FnMut(f64, &Vec3, &[bool])) -> usize {
        self.prep.segment_intervals(a, b, &mut self.intervals);
        let n = self.samples as f64;
        let (mut first, mut last) = (usize::MAX, 0usize);
        for &(lo, hi) in self.intervals.iter().flatten() {
            let i0 = (lo * n - 0.5).ceil().max(0.0) as usize;
            let i1 = ((hi * n - 0.5).floor().min(n - 1.0)).max(-1.0);
            if i1 < 0.0 || (i1 as usize) < i0 {
                continue;
            }
            first = first.min(i0);
            last = last.max(i1 as usize);
        }
        if first == usize::MAX {
            return self.samples;
        }
        let o = self.prep.to_object(a);
        let v = self.prep.direction_to_object(&(b - a));
        let mut visited = 0;
        for i in first..=last {
            let t = (i as f64 + 0.5) / n;
            let mut any = false;
            for (flag, iv) in self.active.iter_mut().zip(&self.intervals) {
                *flag = iv.is_some_and(|(lo, hi)| t >= lo && t <= hi);
                any |= *flag;
            }
            if any {
                visit(t, &(o + v * t), &self.active);
                visited += 1;
            }
        }
        self.samples - visited
    }

    fn hard_max(&mut self, a: &Vec3, b: &Vec3) -> f64 {
        let prep = self.prep;
        let mut best: f64 = 0.0;
        self.march(a, b, |_, x, active| best = best.max(prep.eval(x, Some(active))));
        best
    }

    fn pooled(&mut self, a: &Vec3, b: &Vec3, mode: RenderMode, fs: &mut Vec<f64>) -> f64 {
        match mode {
            RenderMode::Hard => self.hard_max(a, b),
            RenderMode::Smooth { tau } => {
                let prep = self.prep;
                fs.clear();
                let culled = self.march(a, b, |_, x, active| fs.push(prep.eval(x, Some(active))));
                soft_max(fs, culled, tau).0
            }
        }
    }
}

/// Temperature-weighted mean `Σ f e^{f/τ} / Σ e^{f/τ}` over `fs` plus
/// `zeros` samples of value 0. Returns the value and, per entry of `fs`,
/// its partial derivative `w_i (1 + (f_i − s)/τ)`.
fn soft_max(fs: &[f64], zeros: usize, tau: f64) -> (f64, impl Iterator<Item = f64> + '_) {
    let mut m = if zeros > 0 { 0.0 } else { f64::NEG_INFINITY };
    for &f in fs {
        m = m.max(f);
    }
    if !m.is_finite() {
        return (0.0, Partials::new(fs, 0.0, 0.0, 1.0, tau));
    }
    let mut z = zeros as f64 * (-m / tau).exp();
    let mut num = 0.0;
    for &f in fs {
        let e = ((f - m) / tau).exp();
        z += e;
        num += f * e;
    }
    let s = num / z;
    (s, Partials::new(fs, m, s, z, tau))
}

struct Partials<'a> {
    fs: std::slice::Iter<'a, f64>,
    m: f64,
    s: f64,
    z: f64,
    tau: f64,
}

impl<'a> Partials<'a> {
    fn new(fs: &'a [f64], m: f64, s: f64, z: f64, tau: f64) -> Self {
        Self {
            fs: fs.iter(),
            m,
            s,
            z,
            tau,
        }
    }
}

impl Iterator for Partials<'_> {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        self.fs.next().map(|&f| {
            let w = ((f - self.m) / self.tau).exp() / self.z;
            w * (1.0 + (f - self.s) / self.tau)
        })
    }
}

fn check_mode(mode: RenderMode) -> Result<()> {
    match mode {
        RenderMode::Smooth { tau } if !(tau > 0.0 && tau.is_finite()) => Err(ShadowError::BadTemperature(tau)),
        _ => Ok(()),
    }
}

/// Renders the shadow of `shape` (placed by the scene pose) as seen by the
/// scene camera. Pixels whose camera ray misses the ground, or meets the
/// object first, are flagged invalid; their values are still computed.
pub fn render_shadow(scene: &Scene, shape: &ShapeSpec, mode: RenderMode) -> Result<ShadowImage> {
    scene.check()?;
    check_mode(mode)?;
    let placed = scene.place(shape);
    let prep = placed.prepare();
    let light = scene.light.position();
    let eye = scene.camera.center();
    let grounds = scene.ground_points();
    let (w, h) = (scene.camera.width(), scene.camera.height());
    let rows: Vec<Vec<(f64, bool)>> = (0..h)
        .into_par_iter()
        .map_init(
            || (Marcher::new(&prep, scene.ray_samples), Vec::new()),
            |(marcher, fs), row| {
                (0..w)
                    .map(|col| match grounds[(row * w + col) as usize] {
                        None => (0.0, false),
                        Some(p) => {
                            let value = marcher.pooled(&light, &p, mode, fs);
                            let occluded = marcher.hard_max(&eye, &p) > OCCLUSION_THRESHOLD;
                            (value, !occluded)
                        }
                    })
                    .collect()
            },
        )
        .collect();
    let (values, valid) = rows.into_iter().flatten().unzip();
    ShadowImage::from_parts(w, h, values, valid)
}

/// Pixels whose camera ray meets the object (hard max occupancy above 0.5),
/// as a binary image with every pixel valid.
pub fn render_segmentation(scene: &Scene, shape: &ShapeSpec) -> Result<ShadowImage> {
    if scene.ray_samples < 2 {
        return Err(ShadowError::TooFewSamples(scene.ray_samples));
    }
    let placed = scene.place(shape);
    let prep = placed.prepare();
    let eye = scene.camera.center();
    let (w, h) = (scene.camera.width(), scene.camera.height());
    let cam = &scene.camera;
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map_init(
            || Marcher::new(&prep, scene.ray_samples),
            |marcher, row| {
                (0..w)
                    .map(|col| {
                        let pix = CameraModel::pixel_center(col, row);
                        let end = pixel_to_ground(cam, pix, &scene.plane)
                            .unwrap_or_else(|_| cam.pixel_ray(pix.0, pix.1).at(SEGMENTATION_FAR));
                        let hit = marcher.hard_max(&eye, &end) > OCCLUSION_THRESHOLD;
                        if hit {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            },
        )
        .collect();
    let values: Vec<f64> = rows.into_iter().flatten().collect();
    let n = values.len();
    ShadowImage::from_parts(w, h, values, vec![true; n])
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn pixel_bce(target: f64, predicted: f64) -> f64 {
    let p = clamp_prob(predicted);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Mean binary cross-entropy over pixels valid in both images.
pub fn bce_loss(observed: &ShadowImage, predicted: &ShadowImage) -> Result<f64> {
    observed.check_same_size(predicted)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..observed.len() {
        if observed.valid[i] && predicted.valid[i] {
            sum += pixel_bce(observed.values[i], predicted.values[i]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(ShadowError::NoValidPixels);
    }
    Ok(sum / n as f64)
}

/// Gradient of a scalar image loss with respect to the light position,
/// the scene pose and the shape parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    pub light: Vec3,
    pub translation: Vec3,
    /// With respect to an extra rotation about world `+z` through the scene translation.
    pub yaw: f64,
    pub sharpness: f64,
    /// Laid out like [`ShapeSpec::params`].
    pub params: Vec<f64>,
}

const FIXED_LEAVES: usize = 8;

impl SceneGradients {
    fn from_flat(flat: &[f64]) -> Self {
        Self {
            light: Vec3::new(flat[0], flat[1], flat[2]),
            translation: Vec3::new(flat[3], flat[4], flat[5]),
            yaw: flat[6],
            sharpness: flat[7],
            params: flat[FIXED_LEAVES..].to_vec(),
        }
    }

    /// Chain rule onto `(azimuth, elevation)` for spherical lights.
    pub fn light_angles(&self, light: &LightSource) -> Option<[f64; 2]> {
        light
            .angle_jacobian()
            .map(|[da, de]| [self.light.dot(&da), self.light.dot(&de)])
    }
}

/// How each pixel's pooled value enters the scalar being differentiated.
#[derive(Clone, Copy)]
enum PixelObjective<'a> {
    /// Mean BCE against `observed` over its valid pixels.
    Bce { observed: &'a ShadowImage, scale: f64 },
    /// `Σ u_p ŝ_p` over valid pixels.
    Linear { upstream: &'a [f64], valid: &'a [bool] },
}

struct PixelOutcome {
    value: f64,
    loss: f64,
}

/// Per-worker scratch for the gradient sweep.
struct GradWorker<'a> {
    marcher: Marcher<'a>,
    tape: Tape,
    sample_ts: Vec<f64>,
    sample_fs: Vec<f64>,
    sample_vars: Vec<Var>,
    edges: Vec<(Var, f64)>,
    param_edges: Vec<(usize, f64)>,
    grads: Vec<f64>,
}

struct Sweep<'a> {
    prep: &'a PreparedShape<'a>,
    light: Vec3,
    pose_translation: Vec3,
    tau: f64,
    param_count: usize,
}

impl Sweep<'_> {
    fn pixel(&self, wk: &mut GradWorker<'_>, ground: &Vec3, pixel: usize, objective: PixelObjective<'_>) -> Result<Option<PixelOutcome>> {
        let (target, weight) = match objective {
            PixelObjective::Bce { observed, scale } => {
                if !observed.valid[pixel] {
                    return Ok(None);
                }
                (observed.values[pixel], scale)
            }
            PixelObjective::Linear { upstream, valid } => {
                if !valid[pixel] {
                    return Ok(None);
                }
                (0.0, upstream[pixel])
            }
        };
        let prep = self.prep;
        wk.sample_ts.clear();
        let ts = &mut wk.sample_ts;
        let culled = wk.marcher.march(&self.light, ground, |t, _, _| ts.push(t));
        if wk.sample_ts.is_empty() {
            // Every sample is culled: ŝ = 0 with zero gradient.
            let loss = match objective {
                PixelObjective::Bce { .. } => weight * pixel_bce(target, 0.0),
                PixelObjective::Linear { .. } => 0.0,
            };
            return Ok(Some(PixelOutcome { value: 0.0, loss }));
        }

        let tape = &mut wk.tape;
        tape.clear();
        let fixed = [
            self.light.x,
            self.light.y,
            self.light.z,
            self.pose_translation.x,
            self.pose_translation.y,
            self.pose_translation.z,
            0.0,
            prep.shape().sharpness,
        ];
        let mut leaves = Vec::with_capacity(FIXED_LEAVES + self.param_count);
        for v in fixed.into_iter().chain(prep.shape().params()) {
            leaves.push(tape.input(v)?);
        }
        let (fixed_leaves, param_leaves) = leaves.split_at(FIXED_LEAVES);

        let rot = prep.rotation();
        wk.sample_vars.clear();
        wk.sample_fs.clear();
        let marcher = &mut wk.marcher;
        for &t in &wk.sample_ts {
            let x_world = self.light + (ground - self.light) * t;
            let x_obj = prep.to_object(&x_world);
            for (flag, iv) in marcher.active.iter_mut().zip(&marcher.intervals) {
                *flag = iv.is_some_and(|(lo, hi)| t >= lo && t <= hi);
            }
            wk.param_edges.clear();
            let pe = &mut wk.param_edges;
            let eval = prep.eval_grad(&x_obj, Some(&marcher.active), |i, g| pe.push((i, g)));
            let g_w = rot * eval.d_point;
            let r = x_world - self.pose_translation;
            let lc = 1.0 - t;
            wk.edges.clear();
            wk.edges.extend(fixed_leaves.iter().copied().zip([
                lc * g_w.x,
                lc * g_w.y,
                lc * g_w.z,
                -g_w.x,
                -g_w.y,
                -g_w.z,
                g_w.x * r.y - g_w.y * r.x,
                eval.d_sharpness,
            ]));
            wk.edges.extend(wk.param_edges.iter().map(|&(i, g)| (param_leaves[i], g)));
            wk.sample_vars.push(tape.custom(eval.value, &wk.edges)?);
            wk.sample_fs.push(eval.value);
        }

        let (s, partials) = soft_max(&wk.sample_fs, culled, self.tau);
        wk.edges.clear();
        wk.edges.extend(wk.sample_vars.iter().copied().zip(partials));
        let pooled = tape.custom(s, &wk.edges)?;

        let out = match objective {
            PixelObjective::Bce { .. } => {
                let lo = tape.constant(PROB_CLAMP)?;
                let hi = tape.constant(1.0 - PROB_CLAMP)?;
                let capped = tape.min(pooled, hi);
                let p = tape.max(capped, lo);
                let one = tape.constant(1.0)?;
                let q = tape.sub(one, p);
                let lp = tape.log(p)?;
                let lq = tape.log(q)?;
                let a = tape.constant(-weight * target)?;
                let b = tape.constant(-weight * (1.0 - target))?;
                let ta = tape.mul(a, lp);
                let tb = tape.mul(b, lq);
                tape.add(ta, tb)
            }
            PixelObjective::Linear { .. } => {
                let u = tape.constant(weight)?;
                tape.mul(u, pooled)
            }
        };
        let g = tape.backward(out)?;
        if g.has_non_finite() {
            return Err(AutodiffError::NonFinite(f64::NAN).into());
        }
        for (acc, v) in wk.grads.iter_mut().zip(g.inputs()) {
            *acc += v;
        }
        Ok(Some(PixelOutcome {
            value: s,
            loss: out.value(),
        }))
    }

    /// Runs the sweep over all pixels. Rows are processed in parallel and
    /// reduced in row order, so results do not depend on the thread count.
    fn run(&self, scene: &Scene, objective: PixelObjective<'_>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let grounds = scene.ground_points();
        let (w, h) = (scene.camera.width() as usize, scene.camera.height() as usize);
        let n_flat = FIXED_LEAVES + self.param_count;
        let rows: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = (0..h)
            .into_par_iter()
            .map_init(
                || GradWorker {
                    marcher: Marcher::new(self.prep, scene.ray_samples),
                    tape: Tape::with_capacity(512),
                    sample_ts: Vec::new(),
                    sample_fs: Vec::new(),
                    sample_vars: Vec::new(),
                    edges: Vec::new(),
                    param_edges: Vec::new(),
                    grads: vec![0.0; n_flat],
                },
                |wk, row| {
                    wk.grads.iter_mut().for_each(|g| *g = 0.0);
                    let mut loss = 0.0;
                    let mut values = vec![0.0; w];
                    for col in 0..w {
                        let idx = row * w + col;
                        let Some(p) = grounds[idx] else { continue };
                        if let Some(o) = self.pixel(wk, &p, idx, objective)? {
                            loss += o.loss;
                            values[col] = o.value;
                        }
                    }
                    Ok((loss, wk.grads.clone(), values))
                },
            )
            .collect();
        let mut loss = 0.0;
        let mut grads = vec![0.0; n_flat];
        let mut values = Vec::with_capacity(w * h);
        for r in rows {
            let (l, g, v) = r?;
            loss += l;
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            values.extend(v);
        }
        Ok((loss, grads, values))
    }
}

/// Loss, gradients and the predicted image for one optimization step.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub valid_pixels: usize,
    pub gradients: SceneGradients,
    pub predicted: ShadowImage,
}

fn sweep_setup<'a>(scene: &Scene, prep: &'a PreparedShape<'a>, tau: f64) -> Result<Sweep<'a>> {
    scene.check()?;
    check_mode(RenderMode::Smooth { tau })?;
    Ok(Sweep {
        prep,
        light: scene.light.position(),
        pose_translation: scene.pose.translation(),
        tau,
        param_count: prep.shape().param_len(),
    })
}

/// Smooth-mode BCE against `observed` and its gradient. Only pixels the
/// observation marks valid (and whose camera ray meets the ground)
/// contribute to either.
pub fn loss_and_gradient(scene: &Scene, shape: &ShapeSpec, observed: &ShadowImage, tau: f64) -> Result<LossGradient> {
    let (w, h) = (scene.camera.width(), scene.camera.height());
    if (observed.width, observed.height) != (w, h) {
        return Err(ShadowError::SizeMismatch(observed.width, observed.height, w, h));
    }
    let grounds = scene.ground_points();
    let valid: Vec<bool> = grounds
        .iter()
        .zip(&observed.valid)
        .map(|(g, &ok)| ok && g.is_some())
        .collect();
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(ShadowError::NoValidPixels);
    }
    let gated = ShadowImage {
        valid: valid.clone(),
        ..observed.clone()
    };
    let placed = scene.place(shape);
    let prep = placed.prepare();
    let sweep = sweep_setup(scene, &prep, tau)?;
    let (loss, flat, values) = sweep.run(
        scene,
        PixelObjective::Bce {
            observed: &gated,
            scale: 1.0 / count as f64,
        },
    )?;
    Ok(LossGradient {
        loss,
        valid_pixels: count,
        gradients: SceneGradients::from_flat(&flat),
        predicted: ShadowImage::from_parts(w, h, values, valid)?,
    })
}

/// Gradients of a rendered image pulled back to the latent, light angles
/// and pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowGradients {
    pub z: Vec<f64>,
    /// `(azimuth, elevation)`; present for spherical lights.
    pub light_angles: Option<[f64; 2]>,
    pub light: Vec3,
    pub yaw: f64,
    pub translation: Vec3,
}

/// Vector-Jacobian products for a smooth render of `G(z)`.
pub struct ShadowPullback<'a> {
    scene: &'a Scene,
    gen: &'a GeneratorSpec,
    z: &'a LatentVector,
    shape: ShapeSpec,
    valid: Vec<bool>,
    tau: f64,
}

impl ShadowPullback<'_> {
    /// Gradient of `Σ_p upstream[p] · ŝ_p`. Invalid pixels contribute nothing.
    pub fn pullback(&self, upstream: &[f64]) -> Result<ShadowGradients> {
        if upstream.len() != self.valid.len() {
            return Err(ShadowError::BadBuffer(self.scene.camera.width(), self.scene.camera.height()));
        }
        let placed = self.scene.place(&self.shape);
        let prep = placed.prepare();
        let sweep = sweep_setup(self.scene, &prep, self.tau)?;
        let (_, flat, _) = sweep.run(
            self.scene,
            PixelObjective::Linear {
                upstream,
                valid: &self.valid,
            },
        )?;
        let grads = SceneGradients::from_flat(&flat);
        Ok(ShadowGradients {
            z: self.gen.pullback(self.z, &grads.params)?,
            light_angles: grads.light_angles(&self.scene.light),
            light: grads.light,
            yaw: grads.yaw,
            translation: grads.translation,
        })
    }
}

/// Smooth render of `G(z)` together with its pullback.
pub fn render_shadow_with_grads<'a>(
    scene: &'a Scene,
    gen: &'a GeneratorSpec,
    z: &'a LatentVector,
    tau: f64,
) -> Result<(ShadowImage, ShadowPullback<'a>)> {
    let shape = gen.decode(z)?;
    let image = render_shadow(scene, &shape, RenderMode::Smooth { tau })?;
    let valid = image.valid.clone();
    Ok((
        image,
        ShadowPullback {
            scene,
            gen,
            z,
            shape,
            valid,
            tau,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occfield::Primitive;

    fn nadir_scene(light: Vec3) -> Scene {
        // Camera 5 units up; the 128-pixel image spans [−1.5, 1.5]² on the ground.
        let camera = CameraModel::look_at(
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::zeros(),
            Vec3::new(0.0, 1.0, 0.0),
            64.0 * 5.0 / 1.5,
            128,
            128,
        )
        .unwrap();
        Scene::new(camera, LightSource::at(light), PoseSE3::identity())
    }

    fn ball(center: [f64; 3], r: f64) -> ShapeSpec {
        ShapeSpec::new(vec![Primitive::ellipsoid(center, [r; 3])], 20.0, PoseSE3::identity()).unwrap()
    }

    #[test]
    fn soft_max_matches_definition() {
        let fs = [0.2, 0.9, 0.5];
        let tau = 0.1;
        let (s, partials) = soft_max(&fs, 2, tau);
        let partials: Vec<f64> = partials.collect();
        let all = [0.2, 0.9, 0.5, 0.0, 0.0];
        let z: f64 = all.iter().map(|f| (f / tau).exp()).sum();
        let expect: f64 = all.iter().map(|f| f * (f / tau).exp()).sum::<f64>() / z;
        assert!((s - expect).abs() < 1e-14);
        let h = 1e-6;
        for i in 0..3 {
            let mut up = fs;
            up[i] += h;
            let mut dn = fs;
            dn[i] -= h;
            let n = (soft_max(&up, 2, tau).0 - soft_max(&dn, 2, tau).0) / (2.0 * h);
            assert!((partials[i] - n).abs() < 1e-8);
        }
        assert_eq!(soft_max(&[], 7, tau).0, 0.0);
    }

    #[test]
    fn soft_max_gap_is_bounded_at_low_temperature() {
        // Worst case for the weighted mean: one peak, every other sample a fixed gap below.
        let mut worst: f64 = 0.0;
        for k in 1..200 {
            let gap = k as f64 * 0.0005;
            let mut fs = vec![1.0 - gap; 127];
            fs.push(1.0);
            worst = worst.max(1.0 - soft_max(&fs, 0, 0.01).0);
        }
        assert!(worst < 0.03, "{worst}");
    }

    #[test]
    fn empty_scene_casts_no_shadow() {
        let scene = nadir_scene(Vec3::new(0.0, 0.0, 3.0));
        let far = ball([40.0, 40.0, 0.5], 0.05);
        for mode in [RenderMode::Hard, RenderMode::Smooth { tau: 0.1 }] {
            let img = render_shadow(&scene, &far, mode).unwrap();
            assert!(img.values().iter().all(|&v| v < 0.01));
            assert_eq!(img.valid_count(), 128 * 128);
        }
        let seg = render_segmentation(&scene, &far).unwrap();
        assert!(seg.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sphere_shadow_radius_matches_tangent_cone() {
        let scene = nadir_scene(Vec3::new(0.0, 0.0, 3.0));
        let img = render_shadow(&scene, &ball([0.0, 0.0, 1.0], 0.5), RenderMode::Hard).unwrap();
        // Tangent cone from the light: sin θ = r / |c − center|.
        let sin: f64 = 0.5 / 2.0;
        let expected = 3.0 * sin / (1.0 - sin * sin).sqrt();
        let px_per_unit = 128.0 / 3.0;
        let mut worst: f64 = 0.0;
        for row in 0..128 {
            for col in 0..128 {
                let x = (col as f64 + 0.5 - 64.0) / px_per_unit;
                let y = -(row as f64 + 0.5 - 64.0) / px_per_unit;
                let r = (x * x + y * y).sqrt();
                let inside = img.value(col, row) > 0.5;
                if inside != (r < expected) {
                    worst = worst.max((r - expected).abs() * px_per_unit);
                }
            }
        }
        assert!(worst <= 1.5, "boundary off by {worst} px");
    }

    #[test]
    fn occluded_pixels_are_inside_the_segmentation() {
        let mut scene = nadir_scene(Vec3::new(1.0, 0.5, 3.0));
        scene.camera = CameraModel::look_at(
            Vec3::new(1.2, -1.0, 1.3),
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, 1.0),
            64.0,
            64,
            64,
        )
        .unwrap();
        let shape = ball([0.0, 0.0, 0.3], 0.3);
        let img = render_shadow(&scene, &shape, RenderMode::Hard).unwrap();
        let seg = render_segmentation(&scene, &shape).unwrap();
        let mut occluded = 0;
        for i in 0..img.len() {
            if !img.valid()[i] {
                assert_eq!(seg.values()[i], 1.0);
                occluded += 1;
            }
        }
        assert!(occluded > 0);
    }

    #[test]
    fn bce_examples() {
        let mut obs = ShadowImage::new(4, 4);
        obs.values_mut().iter_mut().step_by(2).for_each(|v| *v = 1.0);
        assert!(bce_loss(&obs, &obs).unwrap() <= 1.1e-7);
        let mut ones = ShadowImage::new(4, 4);
        ones.values_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut half = ShadowImage::new(4, 4);
        half.values_mut().iter_mut().for_each(|v| *v = 0.5);
        assert!((bce_loss(&ones, &half).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let mut a = ShadowImage::new(4, 4);
        let mut b = ShadowImage::new(4, 4);
        a.valid_mut()[..8].iter_mut().for_each(|v| *v = false);
        b.valid_mut()[8..].iter_mut().for_each(|v| *v = false);
        assert_eq!(bce_loss(&a, &b), Err(ShadowError::NoValidPixels));
        assert!(bce_loss(&a, &ShadowImage::new(3, 4)).is_err());
    }

    #[test]
    fn adding_a_primitive_never_darkens_less() {
        let scene = nadir_scene(Vec3::new(0.5, -0.4, 3.0));
        let one = ball([0.0, 0.0, 0.5], 0.3);
        let mut two = one.clone();
        two.primitives.push(Primitive::cuboid([0.3, 0.2, 0.6], [0.2, 0.1, 0.3], 4.0));
        let a = render_shadow(&scene, &one, RenderMode::Hard).unwrap();
        let b = render_shadow(&scene, &two, RenderMode::Hard).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!(y >= x);
        }
    }

    #[test]
    fn light_overhead_darkens_the_support() {
        let scene = nadir_scene(Vec3::new(0.0, 0.0, 3.0));
        let shape = ball([0.0, 0.0, 0.4], 0.4);
        let img = render_shadow(&scene, &shape, RenderMode::Hard).unwrap();
        // Ground points within 0.3 of the origin lie under the sphere.
        for row in 0..128 {
            for col in 0..128 {
                let x = (col as f64 + 0.5 - 64.0) * 3.0 / 128.0;
                let y = (row as f64 + 0.5 - 64.0) * 3.0 / 128.0;
                if x.hypot(y) < 0.3 {
                    assert!(img.value(col, row) > 0.5);
                }
            }
        }
    }

    #[test]
    fn smooth_approaches_hard() {
        let scene = nadir_scene(Vec3::new(0.8, 0.3, 2.8));
        let shape = ShapeSpec::new(
            vec![
                Primitive::ellipsoid([0.0, 0.0, 0.5], [0.3, 0.2, 0.4]),
                Primitive::cuboid([0.2, -0.2, 0.3], [0.1, 0.3, 0.05], 6.0),
            ],
            20.0,
            PoseSE3::identity(),
        )
        .unwrap();
        let hard = render_shadow(&scene, &shape, RenderMode::Hard).unwrap();
        let soft = render_shadow(&scene, &shape, RenderMode::Smooth { tau: 0.01 }).unwrap();
        let worst = hard
            .values()
            .iter()
            .zip(soft.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.03, "{worst}");
    }

    #[test]
    fn bad_configurations_are_rejected() {
        let shape = ball([0.0, 0.0, 0.5], 0.3);
        let below = nadir_scene(Vec3::new(0.0, 0.0, -1.0));
        assert!(matches!(
            render_shadow(&below, &shape, RenderMode::Hard),
            Err(ShadowError::LightBelowGround(_))
        ));
        let mut few = nadir_scene(Vec3::new(0.0, 0.0, 3.0));
        few.ray_samples = 1;
        assert!(render_shadow(&few, &shape, RenderMode::Hard).is_err());
        let ok = nadir_scene(Vec3::new(0.0, 0.0, 3.0));
        assert!(render_shadow(&ok, &shape, RenderMode::Smooth { tau: 0.0 }).is_err());
    }

    #[test]
    fn translation_gradient_points_towards_the_target_shadow() {
        // Observed: the shadow of a ball shifted +x. The loss must decrease
        // when the ball moves +x, so ∂L/∂T_x < 0.
        let scene = nadir_scene(Vec3::new(0.0, 0.0, 3.0));
        let shape = ball([0.0, 0.0, 0.5], 0.3);
        let mut target_scene = scene.clone();
        target_scene.pose = PoseSE3::from_yaw(0.0, Vec3::new(0.1, 0.0, 0.0));
        let observed = render_shadow(&target_scene, &shape, RenderMode::Hard).unwrap().binarized();
        let lg = loss_and_gradient(&scene, &shape, &observed, 0.1).unwrap();
        assert!(lg.gradients.translation.x < 0.0);
        assert!(lg.gradients.translation.y.abs() < 1e-3 * lg.gradients.translation.x.abs().max(1e-12) + 1e-9);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut scene = nadir_scene(Vec3::new(0.6, -0.4, 2.7));
        scene.camera = CameraModel::look_at(
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::zeros(),
            Vec3::new(0.0, 1.0, 0.0),
            32.0 * 5.0 / 1.5,
            64,
            64,
        )
        .unwrap();
        scene.pose = PoseSE3::from_yaw(0.3, Vec3::new(0.05, -0.05, 0.1));
        let shape = ShapeSpec::new(
            vec![
                Primitive::ellipsoid([0.0, 0.1, 0.4], [0.3, 0.2, 0.3]),
                Primitive::cuboid([0.2, -0.2, 0.3], [0.15, 0.3, 0.08], 4.0),
            ],
            20.0,
            PoseSE3::identity(),
        )
        .unwrap();
        let target = ball([0.1, 0.0, 0.5], 0.35);
        let observed = render_shadow(&scene, &target, RenderMode::Hard).unwrap().binarized();
        let tau = 0.1;
        let loss = |scene: &Scene, shape: &ShapeSpec| loss_and_gradient(scene, shape, &observed, tau).unwrap().loss;
        let lg = loss_and_gradient(&scene, &shape, &observed, tau).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);

        for i in 0..3 {
            let mut up = scene.clone();
            let mut dn = scene.clone();
            let mut c = scene.light.position();
            c[i] += h;
            up.light = LightSource::at(c);
            c[i] -= 2.0 * h;
            dn.light = LightSource::at(c);
            let n = (loss(&up, &shape) - loss(&dn, &shape)) / (2.0 * h);
            assert!(rel(lg.gradients.light[i], n) < 1e-3, "light {i}: {} vs {n}", lg.gradients.light[i]);

            let mut up = scene.clone();
            up.pose.translation[i] += h;
            let mut dn = scene.clone();
            dn.pose.translation[i] -= h;
            let n = (loss(&up, &shape) - loss(&dn, &shape)) / (2.0 * h);
            assert!(rel(lg.gradients.translation[i], n) < 1e-3, "T {i}: {} vs {n}", lg.gradients.translation[i]);
        }
        let yawed = |d: f64| {
            let mut s = scene.clone();
            s.pose = PoseSE3::from_yaw(0.3 + d, scene.pose.translation());
            loss(&s, &shape)
        };
        let n = (yawed(h) - yawed(-h)) / (2.0 * h);
        assert!(rel(lg.gradients.yaw, n) < 1e-3, "yaw: {} vs {n}", lg.gradients.yaw);

        let params = shape.params();
        for j in 0..params.len() {
            let mut p = params.clone();
            p[j] += h;
            let up = loss(&scene, &shape.with_params(&p).unwrap());
            p[j] -= 2.0 * h;
            let dn = loss(&scene, &shape.with_params(&p).unwrap());
            let n = (up - dn) / (2.0 * h);
            assert!(rel(lg.gradients.params[j], n) < 1e-3, "param {j}: {} vs {n}", lg.gradients.params[j]);
        }
    }

    #[test]
    fn invalid_pixels_contribute_no_gradient() {
        let scene = nadir_scene(Vec3::new(0.4, 0.2, 3.0));
        let shape = ball([0.0, 0.0, 0.5], 0.35);
        let observed = render_shadow(&scene, &ball([0.1, 0.0, 0.5], 0.3), RenderMode::Hard).unwrap().binarized();
        let base = loss_and_gradient(&scene, &shape, &observed, 0.1).unwrap();
        // Invalidate every shadow-relevant pixel: nothing can flow.
        let mut blind = observed.clone();
        blind.valid_mut().iter_mut().zip(base.predicted.values()).for_each(|(v, &p)| {
            if p > 0.0 {
                *v = false;
            }
        });
        let g = loss_and_gradient(&scene, &shape, &blind, 0.1).unwrap().gradients;
        assert_eq!(g.light, Vec3::zeros());
        assert_eq!(g.translation, Vec3::zeros());
        assert_eq!(g.yaw, 0.0);
        assert!(g.params.iter().all(|&v| v == 0.0));
    }
}
