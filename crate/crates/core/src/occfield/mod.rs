//! Soft occupancy fields built from blended analytic primitives.
//!
//! Each primitive contributes `f_m = σ(k (1 − F_m(x)))` where `F_m` is a
//! superquadric inside-outside function (`F < 1` inside). Primitives are
//! blended by probabilistic union `f = 1 − Π (1 − f_m)`.

pub mod mesh;
mod tables;

pub use mesh::{extract_mesh, MeshError, TriMesh, MESH_BOUND};

use crate::geometry::{PoseSE3, Vec3};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_HALF_EXTENT: f64 = 0.05;
pub const MAX_HALF_EXTENT: f64 = 0.5;
pub const DEFAULT_SHARPNESS: f64 = 20.0;
/// Logit below which a primitive's occupancy is treated as exactly zero
/// (`σ(−36) ≈ 2.3e−16`).
pub const CULL_LOGIT: f64 = 36.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("a shape needs at least one primitive")]
    NoPrimitives,
    #[error("sharpness must be positive and finite, got {0}")]
    BadSharpness(f64),
    #[error("primitive {index}: {reason}")]
    BadPrimitive { index: usize, reason: String },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Ellipsoid,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    /// Superquadric exponent; ignored (always 2) for ellipsoids.
    pub exponent: f64,
}

/// Inside-outside value with partials w.r.t. the query point, the half
/// extents and the exponent. The center partial is `−d_point`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InsideOutsideGrad {
    pub value: f64,
    pub d_point: [f64; 3],
    pub d_half: [f64; 3],
    pub d_exponent: f64,
}

impl Primitive {
    pub fn ellipsoid(center: [f64; 3], half_extents: [f64; 3]) -> Self {
        Self {
            kind: PrimitiveKind::Ellipsoid,
            center,
            half_extents,
            exponent: 2.0,
        }
    }

    pub fn cuboid(center: [f64; 3], half_extents: [f64; 3], exponent: f64) -> Self {
        Self {
            kind: PrimitiveKind::Box,
            center,
            half_extents,
            exponent,
        }
    }

    pub fn exponent(&self) -> f64 {
        match self.kind {
            PrimitiveKind::Ellipsoid => 2.0,
            PrimitiveKind::Box => self.exponent,
        }
    }

    /// Number of scalars this primitive contributes to a parameter vector.
    pub fn param_len(&self) -> usize {
        match self.kind {
            PrimitiveKind::Ellipsoid => 6,
            PrimitiveKind::Box => 7,
        }
    }

    fn validate(&self, index: usize) -> Result<(), ShapeError> {
        let bad = |reason: String| ShapeError::BadPrimitive { index, reason };
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(bad("non-finite center".into()));
        }
        for &h in &self.half_extents {
            if !(MIN_HALF_EXTENT..=MAX_HALF_EXTENT).contains(&h) {
                return Err(bad(format!("half extent {h} outside [0.05, 0.5]")));
            }
        }
        if self.kind == PrimitiveKind::Box && !(self.exponent.is_finite() && self.exponent >= 2.0) {
            return Err(bad(format!("box exponent {} < 2", self.exponent)));
        }
        Ok(())
    }

    /// `F(x) = Σ |x_i − c_i|^e / a_i^e`: `< 1` inside, `1` on the surface.
    pub fn inside_outside(&self, x: &Vec3) -> f64 {
        let e = self.exponent();
        let mut f = 0.0;
        for i in 0..3 {
            let r = (x[i] - self.center[i]).abs() / self.half_extents[i];
            f += if e == 2.0 { r * r } else { r.powf(e) };
        }
        f
    }

    pub fn inside_outside_grad(&self, x: &Vec3) -> InsideOutsideGrad {
        let mut out = InsideOutsideGrad::default();
        match self.kind {
            PrimitiveKind::Ellipsoid => {
                for i in 0..3 {
                    let a = self.half_extents[i];
                    let u = (x[i] - self.center[i]) / a;
                    out.value += u * u;
                    out.d_point[i] = 2.0 * u / a;
                    out.d_half[i] = -2.0 * u * u / a;
                }
            }
            PrimitiveKind::Box => {
                let e = self.exponent;
                for i in 0..3 {
                    let a = self.half_extents[i];
                    let d = x[i] - self.center[i];
                    let r = d.abs() / a;
                    if r == 0.0 {
                        // Subgradient zero on the coordinate hyperplane.
                        continue;
                    }
                    let ln_r = r.ln();
                    let p = (e * ln_r).exp();
                    out.value += p;
                    out.d_point[i] = e * p / d;
                    out.d_half[i] = -e * p / a;
                    out.d_exponent += p * ln_r;
                }
            }
        }
        out
    }

    /// Parameter interval `[t0, t1] ⊆ [0, 1]` where the object-frame
    /// segment `o + t v` can satisfy `F < f_cut`; `None` when it misses.
    fn segment_interval(&self, o: &Vec3, v: &Vec3, f_cut: f64) -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        match self.kind {
            PrimitiveKind::Ellipsoid => {
                // Σ ((o_i − c_i + t v_i)/a_i)² < f_cut
                let (mut qa, mut qb, mut qc) = (0.0, 0.0, -f_cut);
                for i in 0..3 {
                    let inv = 1.0 / self.half_extents[i];
                    let p = (o[i] - self.center[i]) * inv;
                    let w = v[i] * inv;
                    qa += w * w;
                    qb += 2.0 * p * w;
                    qc += p * p;
                }
                if qa <= 0.0 {
                    return (qc < 0.0).then_some((lo, hi));
                }
                let disc = qb * qb - 4.0 * qa * qc;
                if disc <= 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                lo = lo.max((-qb - sq) / (2.0 * qa));
                hi = hi.min((-qb + sq) / (2.0 * qa));
            }
            PrimitiveKind::Box => {
                // Each |d_i| / a_i < f_cut^(1/e) is necessary for F < f_cut.
                let reach = f_cut.powf(1.0 / self.exponent);
                for i in 0..3 {
                    let half = self.half_extents[i] * reach;
                    let p = o[i] - self.center[i];
                    if v[i].abs() < 1e-300 {
                        if p.abs() >= half {
                            return None;
                        }
                        continue;
                    }
                    let t_a = (-half - p) / v[i];
                    let t_b = (half - p) / v[i];
                    lo = lo.max(t_a.min(t_b));
                    hi = hi.min(t_a.max(t_b));
                }
            }
        }
        (lo < hi).then_some((lo, hi))
    }
}

/// A posed soft occupancy field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub primitives: Vec<Primitive>,
    pub sharpness: f64,
    pub pose: PoseSE3,
}

/// Gradient of occupancy at one world point.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGradient {
    pub value: f64,
    pub d_point: Vec3,
    /// Laid out like [`ShapeSpec::params`].
    pub d_params: Vec<f64>,
    pub d_sharpness: f64,
    pub d_translation: Vec3,
    /// Derivative w.r.t. an extra rotation about world `+z` applied to the pose.
    pub d_yaw: f64,
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ShapeSpec {
    pub fn new(primitives: Vec<Primitive>, sharpness: f64, pose: PoseSE3) -> Result<Self, ShapeError> {
        let shape = Self {
            primitives,
            sharpness,
            pose,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.primitives.is_empty() {
            return Err(ShapeError::NoPrimitives);
        }
        if !(self.sharpness.is_finite() && self.sharpness > 0.0) {
            return Err(ShapeError::BadSharpness(self.sharpness));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate(i)?;
        }
        Ok(())
    }

    pub fn with_pose(mut self, pose: PoseSE3) -> Self {
        self.pose = pose;
        self
    }

    pub fn param_len(&self) -> usize {
        self.primitives.iter().map(Primitive::param_len).sum()
    }

    /// Flat parameter vector: per primitive `center(3), half_extents(3)`
    /// and, for boxes, the exponent.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for p in &self.primitives {
            out.extend_from_slice(&p.center);
            out.extend_from_slice(&p.half_extents);
            if p.kind == PrimitiveKind::Box {
                out.push(p.exponent);
            }
        }
        out
    }

    /// Same primitive kinds, new parameter values. No range validation.
    pub fn with_params(&self, params: &[f64]) -> Result<Self, ShapeError> {
        if params.len() != self.param_len() {
            return Err(ShapeError::ParamLength {
                expected: self.param_len(),
                got: params.len(),
            });
        }
        let mut out = self.clone();
        let mut at = 0;
        for p in &mut out.primitives {
            p.center.copy_from_slice(&params[at..at + 3]);
            p.half_extents.copy_from_slice(&params[at + 3..at + 6]);
            if p.kind == PrimitiveKind::Box {
                p.exponent = params[at + 6];
            }
            at += p.param_len();
        }
        Ok(out)
    }

    /// Lowest object-frame `z` of any primitive surface.
    pub fn min_z(&self) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.center[2] - p.half_extents[2])
            .fold(f64::INFINITY, f64::min)
    }

    /// Highest object-frame `z` of any primitive surface.
    pub fn max_z(&self) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.center[2] + p.half_extents[2])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Vertical translation that rests the shape on `z = 0`.
    pub fn resting_height(&self) -> f64 {
        -self.min_z()
    }

    pub fn occupancy(&self, x_world: &Vec3) -> f64 {
        self.occupancy_object(&self.pose.apply_inverse(x_world))
    }

    pub fn occupancy_object(&self, x_obj: &Vec3) -> f64 {
        let mut empty = 1.0;
        for p in &self.primitives {
            empty *= logistic(-self.sharpness * (1.0 - p.inside_outside(x_obj)));
        }
        1.0 - empty
    }

    pub fn occupancy_gradient(&self, x_world: &Vec3) -> OccupancyGradient {
        let rot = self.pose.rotation();
        let rel = x_world - self.pose.translation();
        let x_obj = rot.transpose() * rel;
        let mut d_params = vec![0.0; self.param_len()];
        let eval = self.prepare().eval_grad(&x_obj, None, |idx, g| d_params[idx] += g);
        let d_world = rot * eval.d_point;
        OccupancyGradient {
            value: eval.value,
            d_point: d_world,
            d_params,
            d_sharpness: eval.d_sharpness,
            d_translation: -d_world,
            d_yaw: d_world.x * rel.y - d_world.y * rel.x,
        }
    }

    pub fn prepare(&self) -> PreparedShape<'_> {
        PreparedShape::new(self)
    }
}

/// Value and object-frame partials of a blended occupancy evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct FieldEval {
    pub value: f64,
    pub d_point: Vec3,
    pub d_sharpness: f64,
}

/// A shape with its pose matrix and culling bounds precomputed, for
/// evaluating many points along segments.
#[derive(Debug, Clone)]
pub struct PreparedShape<'a> {
    shape: &'a ShapeSpec,
    rotation: Matrix3<f64>,
    rotation_t: Matrix3<f64>,
    translation: Vec3,
    offsets: Vec<usize>,
    f_cut: f64,
}

impl<'a> PreparedShape<'a> {
    pub fn new(shape: &'a ShapeSpec) -> Self {
        let rotation = shape.pose.rotation();
        let mut offsets = Vec::with_capacity(shape.primitives.len());
        let mut at = 0;
        for p in &shape.primitives {
            offsets.push(at);
            at += p.param_len();
        }
        Self {
            shape,
            rotation,
            rotation_t: rotation.transpose(),
            translation: shape.pose.translation(),
            offsets,
            f_cut: 1.0 + CULL_LOGIT / shape.sharpness,
        }
    }

    pub fn shape(&self) -> &ShapeSpec {
        self.shape
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn primitive_count(&self) -> usize {
        self.shape.primitives.len()
    }

    /// Offset of primitive `m` in the flat parameter vector.
    pub fn param_offset(&self, m: usize) -> usize {
        self.offsets[m]
    }

    pub fn to_object(&self, x_world: &Vec3) -> Vec3 {
        self.rotation_t * (x_world - self.translation)
    }

    pub fn direction_to_object(&self, v_world: &Vec3) -> Vec3 {
        self.rotation_t * v_world
    }

    /// Per-primitive parameter intervals along the world segment
    /// `a + t (b − a)`, `t ∈ [0, 1]`, outside of which the primitive's
    /// occupancy is below `σ(−CULL_LOGIT)`.
    pub fn segment_intervals(&self, a: &Vec3, b: &Vec3, out: &mut Vec<Option<(f64, f64)>>) {
        let o = self.to_object(a);
        let v = self.direction_to_object(&(b - a));
        out.clear();
        out.extend(
            self.shape
                .primitives
                .iter()
                .map(|p| p.segment_interval(&o, &v, self.f_cut)),
        );
    }

    /// Occupancy at an object-frame point. When `active` is given, only
    /// primitives flagged there contribute.
    pub fn eval(&self, x_obj: &Vec3, active: Option<&[bool]>) -> f64 {
        let k = self.shape.sharpness;
        let mut empty = 1.0;
        for (m, p) in self.shape.primitives.iter().enumerate() {
            if active.is_some_and(|a| !a[m]) {
                continue;
            }
            empty *= logistic(-k * (1.0 - p.inside_outside(x_obj)));
        }
        1.0 - empty
    }

    /// Occupancy with object-frame partials. Parameter partials are
    /// reported through `param_grad(flat_index, value)`.
    pub fn eval_grad(
        &self,
        x_obj: &Vec3,
        active: Option<&[bool]>,
        mut param_grad: impl FnMut(usize, f64),
    ) -> FieldEval {
        let k = self.shape.sharpness;
        let n = self.shape.primitives.len();
        // Small fixed buffers cover realistic primitive counts.
        let mut io_buf = [InsideOutsideGrad::default(); 16];
        let mut f_buf = [0.0f64; 16];
        let mut io_vec;
        let mut f_vec;
        let (ios, fs): (&mut [InsideOutsideGrad], &mut [f64]) = if n <= 16 {
            (&mut io_buf[..n], &mut f_buf[..n])
        } else {
            io_vec = vec![InsideOutsideGrad::default(); n];
            f_vec = vec![0.0; n];
            (&mut io_vec[..], &mut f_vec[..])
        };
        let mut empty = 1.0;
        for (m, p) in self.shape.primitives.iter().enumerate() {
            if active.is_some_and(|a| !a[m]) {
                fs[m] = 0.0;
                continue;
            }
            ios[m] = p.inside_outside_grad(x_obj);
            let f = logistic(k * (1.0 - ios[m].value));
            fs[m] = f;
            empty *= 1.0 - f;
        }
        // ∂f/∂F_m = −k f_m Π_j (1 − f_j);  ∂f/∂k = Π_j(1 − f_j) Σ_m f_m (1 − F_m)
        let mut out = FieldEval {
            value: 1.0 - empty,
            ..Default::default()
        };
        for (m, p) in self.shape.primitives.iter().enumerate() {
            if active.is_some_and(|a| !a[m]) {
                continue;
            }
            let io = &ios[m];
            let df_dio = -k * fs[m] * empty;
            out.d_sharpness += empty * fs[m] * (1.0 - io.value);
            let base = self.offsets[m];
            for i in 0..3 {
                let g = df_dio * io.d_point[i];
                out.d_point[i] += g;
                param_grad(base + i, -g);
                param_grad(base + 3 + i, df_dio * io.d_half[i]);
            }
            if p.kind == PrimitiveKind::Box {
                param_grad(base + 6, df_dio * io.d_exponent);
            }
        }
        out
    }
}
