//! Seeded latent decoder `G(z)`: an affine map into primitive parameters
//! followed by range-preserving squashing.

use crate::geometry::PoseSE3;
use crate::occfield::{Primitive, PrimitiveKind, ShapeError, ShapeSpec, DEFAULT_SHARPNESS};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const DEFAULT_LATENT_DIM: usize = 4;
/// Standard deviation of decoder weights.
pub const WEIGHT_SCALE: f64 = 0.5;
/// Standard deviation of decoder biases not fixed by a category template.
pub const BIAS_SCALE: f64 = 0.5;

const CENTER_SCALE: f64 = 0.4;
const HALF_MIN: f64 = 0.05;
const HALF_SPAN: f64 = 0.45;
const EXPONENT_MIN: f64 = 2.0;
const EXPONENT_SPAN: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("latent has dimension {got}, generator expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales onto the sphere of the given radius. The zero vector is
    /// mapped to the first axis.
    pub fn project(&mut self, radius: f64) {
        let n = self.norm();
        if n > 0.0 && n.is_finite() {
            self.0.iter_mut().for_each(|v| *v *= radius / n);
        } else {
            self.0.iter_mut().for_each(|v| *v = 0.0);
            if let Some(first) = self.0.first_mut() {
                *first = radius;
            }
        }
    }
}

/// Draws `d` standard normals and projects them to the unit sphere.
pub fn sample_latent<R: Rng + ?Sized>(rng: &mut R, d: usize) -> LatentVector {
    let mut z = LatentVector((0..d).map(|_| StandardNormal.sample(rng)).collect());
    z.project(1.0);
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    /// Ellipsoid-only blobs, two primitives by default.
    Blobs,
    /// Boxes arranged around a table template, five primitives by default.
    Tables,
    /// Alternating ellipsoids and boxes, four primitives by default.
    #[default]
    Mixed,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Blobs, Category::Tables, Category::Mixed];

    pub fn default_primitive_count(self) -> usize {
        match self {
            Category::Blobs => 2,
            Category::Tables => 5,
            Category::Mixed => 4,
        }
    }

    pub fn kinds(self, m: usize) -> Vec<PrimitiveKind> {
        (0..m)
            .map(|i| match self {
                Category::Blobs => PrimitiveKind::Ellipsoid,
                Category::Tables => PrimitiveKind::Box,
                Category::Mixed if i % 2 == 0 => PrimitiveKind::Ellipsoid,
                Category::Mixed => PrimitiveKind::Box,
            })
            .collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Blobs => "blobs",
            Category::Tables => "tables",
            Category::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = GeneratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blobs" => Ok(Category::Blobs),
            "tables" => Ok(Category::Tables),
            "mixed" => Ok(Category::Mixed),
            other => Err(GeneratorError::Config(format!("unknown category {other:?}"))),
        }
    }
}

/// The serialized identity of a generator; weights are rebuilt from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub primitive_count: usize,
    pub category: Category,
}

impl GeneratorConfig {
    pub fn new(category: Category, seed: u64) -> Self {
        Self {
            seed,
            latent_dim: DEFAULT_LATENT_DIM,
            primitive_count: category.default_primitive_count(),
            category,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    config: GeneratorConfig,
    kinds: Vec<PrimitiveKind>,
    /// Row-major `param_count × latent_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Squash {
    Center,
    Half,
    Exponent,
}

impl Squash {
    fn apply(self, raw: f64) -> (f64, f64) {
        match self {
            Squash::Center => {
                let t = raw.tanh();
                (CENTER_SCALE * t, CENTER_SCALE * (1.0 - t * t))
            }
            Squash::Half => {
                let s = logistic(raw);
                (HALF_MIN + HALF_SPAN * s, HALF_SPAN * s * (1.0 - s))
            }
            Squash::Exponent => {
                let s = logistic(raw);
                (EXPONENT_MIN + EXPONENT_SPAN * s, EXPONENT_SPAN * s * (1.0 - s))
            }
        }
    }

    fn max_slope(self) -> f64 {
        match self {
            Squash::Center => CENTER_SCALE,
            Squash::Half => HALF_SPAN / 4.0,
            Squash::Exponent => EXPONENT_SPAN / 4.0,
        }
    }

    fn inverse(self, value: f64) -> f64 {
        match self {
            Squash::Center => (value / CENTER_SCALE).atanh(),
            Squash::Half => logit((value - HALF_MIN) / HALF_SPAN),
            Squash::Exponent => logit((value - EXPONENT_MIN) / EXPONENT_SPAN),
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A four-legged table: top slab plus legs (center, half extents).
const TABLE_TEMPLATE: [([f64; 3], [f64; 3]); 5] = [
    ([0.0, 0.0, 0.3], [0.42, 0.32, 0.07]),
    ([0.3, 0.22, -0.12], [0.07, 0.07, 0.3]),
    ([-0.3, 0.22, -0.12], [0.07, 0.07, 0.3]),
    ([0.3, -0.22, -0.12], [0.07, 0.07, 0.3]),
    ([-0.3, -0.22, -0.12], [0.07, 0.07, 0.3]),
];
const TABLE_EXPONENT: f64 = 6.0;

impl GeneratorSpec {
    pub fn new(config: GeneratorConfig) -> Result<Self, GeneratorError> {
        if config.latent_dim == 0 {
            return Err(GeneratorError::Config("latent_dim must be at least 1".into()));
        }
        if config.primitive_count == 0 {
            return Err(GeneratorError::Config("primitive_count must be at least 1".into()));
        }
        let kinds = config.category.kinds(config.primitive_count);
        let mut spec = Self {
            config,
            kinds,
            weights: Vec::new(),
            bias: Vec::new(),
        };
        let p = spec.param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        spec.weights = (0..p * config.latent_dim)
            .map(|_| WEIGHT_SCALE * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        spec.bias = (0..p)
            .map(|_| BIAS_SCALE * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        if config.category == Category::Tables {
            spec.apply_table_template();
        }
        Ok(spec)
    }

    /// Builds a generator with explicit weights. `weights` is row-major.
    pub fn from_parts(
        config: GeneratorConfig,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, GeneratorError> {
        let kinds = config.category.kinds(config.primitive_count);
        let spec = Self {
            config,
            kinds,
            weights,
            bias,
        };
        let p = spec.param_count();
        if spec.bias.len() != p || spec.weights.len() != p * config.latent_dim {
            return Err(GeneratorError::Config(format!(
                "expected {p} biases and {} weights",
                p * config.latent_dim
            )));
        }
        Ok(spec)
    }

    fn apply_table_template(&mut self) {
        let mut at = 0;
        for (m, kind) in self.kinds.clone().into_iter().enumerate() {
            if let Some((c, h)) = TABLE_TEMPLATE.get(m) {
                for i in 0..3 {
                    self.bias[at + i] = Squash::Center.inverse(c[i]);
                    self.bias[at + 3 + i] = Squash::Half.inverse(h[i]);
                }
                if kind == PrimitiveKind::Box {
                    self.bias[at + 6] = Squash::Exponent.inverse(TABLE_EXPONENT);
                }
            }
            at += param_len(kind);
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn kinds(&self) -> &[PrimitiveKind] {
        &self.kinds
    }

    pub fn param_count(&self) -> usize {
        self.kinds.iter().map(|&k| param_len(k)).sum()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn squashes(&self) -> impl Iterator<Item = Squash> + '_ {
        self.kinds.iter().flat_map(|&k| {
            [Squash::Center; 3]
                .into_iter()
                .chain([Squash::Half; 3])
                .chain((k == PrimitiveKind::Box).then_some(Squash::Exponent))
        })
    }

    fn check_dim(&self, z: &LatentVector) -> Result<(), GeneratorError> {
        if z.dim() != self.latent_dim() {
            return Err(GeneratorError::DimensionMismatch {
                expected: self.latent_dim(),
                got: z.dim(),
            });
        }
        Ok(())
    }

    fn raw(&self, z: &LatentVector) -> Vec<f64> {
        let d = self.latent_dim();
        self.weights
            .chunks_exact(d)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(z.as_slice()).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Squashed parameters and their slopes with respect to the raw values.
    fn params_and_slopes(&self, z: &LatentVector) -> (Vec<f64>, Vec<f64>) {
        self.raw(z)
            .into_iter()
            .zip(self.squashes())
            .map(|(r, s)| s.apply(r))
            .unzip()
    }

    /// Flat primitive parameters laid out like [`ShapeSpec::params`].
    pub fn decode_params(&self, z: &LatentVector) -> Result<Vec<f64>, GeneratorError> {
        self.check_dim(z)?;
        Ok(self.params_and_slopes(z).0)
    }

    /// Shape for latent `z`, with identity pose and default sharpness.
    pub fn decode(&self, z: &LatentVector) -> Result<ShapeSpec, GeneratorError> {
        let params = self.decode_params(z)?;
        let mut prims = Vec::with_capacity(self.kinds.len());
        let mut at = 0;
        for &kind in &self.kinds {
            let c = [params[at], params[at + 1], params[at + 2]];
            let h = [params[at + 3], params[at + 4], params[at + 5]];
            prims.push(match kind {
                PrimitiveKind::Ellipsoid => Primitive::ellipsoid(c, h),
                PrimitiveKind::Box => Primitive::cuboid(c, h, params[at + 6]),
            });
            at += param_len(kind);
        }
        Ok(ShapeSpec::new(prims, DEFAULT_SHARPNESS, PoseSE3::identity())?)
    }

    /// `∂params/∂z = diag(squash′) · W`.
    pub fn decode_jacobian(&self, z: &LatentVector) -> Result<DMatrix<f64>, GeneratorError> {
        self.check_dim(z)?;
        let d = self.latent_dim();
        let (_, slopes) = self.params_and_slopes(z);
        Ok(DMatrix::from_fn(slopes.len(), d, |i, j| slopes[i] * self.weights[i * d + j]))
    }

    /// `Jᵀ g` for a parameter-space gradient `g`, without forming `J`.
    pub fn pullback(&self, z: &LatentVector, grad_params: &[f64]) -> Result<Vec<f64>, GeneratorError> {
        self.check_dim(z)?;
        let p = self.param_count();
        if grad_params.len() != p {
            return Err(GeneratorError::Config(format!(
                "parameter gradient has length {}, expected {p}",
                grad_params.len()
            )));
        }
        let d = self.latent_dim();
        let (_, slopes) = self.params_and_slopes(z);
        let mut out = vec![0.0; d];
        for (i, row) in self.weights.chunks_exact(d).enumerate() {
            let g = grad_params[i] * slopes[i];
            if g != 0.0 {
                out.iter_mut().zip(row).for_each(|(o, w)| *o += g * w);
            }
        }
        Ok(out)
    }

    /// Bound on `‖decode(z1) − decode(z2)‖∞ / ‖z1 − z2‖₂`.
    pub fn lipschitz_bound(&self) -> f64 {
        let d = self.latent_dim();
        self.weights
            .chunks_exact(d)
            .zip(self.squashes())
            .map(|(row, s)| s.max_slope() * row.iter().map(|w| w * w).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

fn param_len(kind: PrimitiveKind) -> usize {
    match kind {
        PrimitiveKind::Ellipsoid => 6,
        PrimitiveKind::Box => 7,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn gen(category: Category, seed: u64) -> GeneratorSpec {
        GeneratorSpec::new(GeneratorConfig::new(category, seed)).unwrap()
    }

    #[test]
    fn zero_latent_decodes_to_bias_squash() {
        let g = gen(Category::Mixed, 3);
        let shape = g.decode(&LatentVector::zeros(DEFAULT_LATENT_DIM)).unwrap();
        let b = g.bias();
        let mut at = 0;
        for p in &shape.primitives {
            for i in 0..3 {
                assert_eq!(p.center[i], 0.4 * b[at + i].tanh());
                let expect = 0.05 + 0.45 / (1.0 + (-b[at + 3 + i]).exp());
                assert!((p.half_extents[i] - expect).abs() < 1e-15);
            }
            at += p.param_len();
        }
    }

    #[test]
    fn dimension_mismatch() {
        let g = gen(Category::Blobs, 1);
        assert_eq!(
            g.decode(&LatentVector::zeros(3)).unwrap_err(),
            GeneratorError::DimensionMismatch { expected: DEFAULT_LATENT_DIM, got: 3 }
        );
        assert!(g.decode_jacobian(&LatentVector::zeros(17)).is_err());
    }

    #[test]
    fn decoding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = sample_latent(&mut rng, DEFAULT_LATENT_DIM);
        let a = gen(Category::Tables, 11).decode(&z).unwrap();
        let b = gen(Category::Tables, 11).decode(&z).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen(Category::Tables, 12).decode(&z).unwrap());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for category in Category::ALL {
            let g = gen(category, 99);
            for _ in 0..20 {
                let z = sample_latent(&mut rng, DEFAULT_LATENT_DIM);
                let jac = g.decode_jacobian(&z).unwrap();
                for j in 0..DEFAULT_LATENT_DIM {
                    let mut zp = z.clone();
                    zp.as_mut_slice()[j] += h;
                    let mut zm = z.clone();
                    zm.as_mut_slice()[j] -= h;
                    let (fp, fm) = (g.decode_params(&zp).unwrap(), g.decode_params(&zm).unwrap());
                    for i in 0..g.param_count() {
                        let numeric = (fp[i] - fm[i]) / (2.0 * h);
                        let a = jac[(i, j)];
                        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                        assert!(rel < 1e-5 || (a - numeric).abs() < 1e-9, "{a} vs {numeric}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_weight_column_gives_zero_jacobian_column() {
        let cfg = GeneratorConfig::new(Category::Blobs, 0);
        let base = GeneratorSpec::new(cfg).unwrap();
        let mut w = base.weights().to_vec();
        for row in w.chunks_exact_mut(DEFAULT_LATENT_DIM) {
            row[1] = 0.0;
        }
        let g = GeneratorSpec::from_parts(cfg, w, base.bias().to_vec()).unwrap();
        let z = sample_latent(&mut ChaCha8Rng::seed_from_u64(2), DEFAULT_LATENT_DIM);
        let jac = g.decode_jacobian(&z).unwrap();
        for j in 0..DEFAULT_LATENT_DIM {
            let zero = jac.column(j).iter().all(|&v| v == 0.0);
            assert_eq!(zero, j == 1);
        }
    }

    #[test]
    fn center_rows_are_bounded_by_tanh_slope() {
        let g = gen(Category::Mixed, 8);
        let z = sample_latent(&mut ChaCha8Rng::seed_from_u64(4), DEFAULT_LATENT_DIM);
        let jac = g.decode_jacobian(&z).unwrap();
        let mut at = 0;
        for &kind in g.kinds() {
            for i in at..at + 3 {
                let w_norm = g.weights()[i * DEFAULT_LATENT_DIM..(i + 1) * DEFAULT_LATENT_DIM].iter().map(|w| w * w).sum::<f64>().sqrt();
                assert!(jac.row(i).norm() <= 0.4 * w_norm + 1e-12);
            }
            at += param_len(kind);
        }
    }

    #[test]
    fn pullback_equals_jacobian_transpose() {
        let g = gen(Category::Tables, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = sample_latent(&mut rng, DEFAULT_LATENT_DIM);
        let grad: Vec<f64> = (0..g.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pulled = g.pullback(&z, &grad).unwrap();
        let expect = g.decode_jacobian(&z).unwrap().transpose() * nalgebra::DVector::from_vec(grad);
        for j in 0..DEFAULT_LATENT_DIM {
            assert!((pulled[j] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_latents_are_unit_and_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 16;
        let n = 10_000;
        let mut mean = vec![0.0; d];
        for _ in 0..n {
            let z = sample_latent(&mut rng, d);
            assert!((z.norm() - 1.0).abs() < 1e-9);
            mean.iter_mut().zip(z.as_slice()).for_each(|(m, v)| *m += v / n as f64);
        }
        // Each coordinate of a uniform point on S^{d−1} has variance 1/d.
        let se = (1.0 / d as f64 / n as f64).sqrt();
        for m in mean {
            assert!(m.abs() < 3.0 * se, "mean {m}");
        }
        let a = sample_latent(&mut rng, d);
        let b = sample_latent(&mut rng, d);
        assert_ne!(a, b);
    }

    #[test]
    fn table_template_is_the_mean_shape() {
        let g = gen(Category::Tables, 0);
        let shape = g.decode(&LatentVector::zeros(DEFAULT_LATENT_DIM)).unwrap();
        for (p, (c, h)) in shape.primitives.iter().zip(TABLE_TEMPLATE) {
            for i in 0..3 {
                assert!((p.center[i] - c[i]).abs() < 1e-12);
                assert!((p.half_extents[i] - h[i]).abs() < 1e-12);
            }
            assert!((p.exponent - TABLE_EXPONENT).abs() < 1e-12);
        }
    }

    #[test]
    fn category_names_round_trip() {
        for c in Category::ALL {
            assert_eq!(c.as_str().parse::<Category>().unwrap(), c);
        }
        assert!("chairs".parse::<Category>().is_err());
    }

    proptest! {
        #[test]
        fn unit_latents_decode_in_range(seed in 0u64..1000, zs in prop::collection::vec(-1.0f64..1.0, DEFAULT_LATENT_DIM)) {
            let mut z = LatentVector::new(zs);
            z.project(1.0);
            for category in Category::ALL {
                let shape = gen(category, seed).decode(&z).unwrap();
                for p in &shape.primitives {
                    prop_assert!(p.center.iter().all(|c| c.abs() <= 0.4));
                    prop_assert!(p.half_extents.iter().all(|h| (0.05..=0.5).contains(h)));
                    prop_assert!(p.exponent() >= 2.0 && p.exponent() <= 8.0);
                }
            }
        }

        #[test]
        fn decoder_is_lipschitz(seed in 0u64..200, a in prop::collection::vec(-1.0f64..1.0, DEFAULT_LATENT_DIM), b in prop::collection::vec(-1.0f64..1.0, DEFAULT_LATENT_DIM)) {
            let g = gen(Category::Mixed, seed);
            let (mut za, mut zb) = (LatentVector::new(a), LatentVector::new(b));
            za.project(1.0);
            zb.project(1.0);
            let pa = g.decode_params(&za).unwrap();
            let pb = g.decode_params(&zb).unwrap();
            let sup = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let dist = za.as_slice().iter().zip(zb.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(sup <= g.lipschitz_bound() * dist + 1e-12);
        }
    }
}
