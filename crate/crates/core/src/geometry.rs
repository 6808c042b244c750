//! Rays, planes, the pinhole camera, yaw-friendly SE(3) poses and
//! hemisphere sampling.
//!
//! Conventions: right-handed world, ground plane `z = 0` with normal
//! `+z`. Cameras follow the computer-vision frame (x right, y down,
//! z forward) and map world points with `X_cam = R X + t`. Quaternions
//! are stored as `(x, y, z, w)` and composed with the Hamilton product.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Default threshold below which a ray counts as parallel to a plane.
pub const PARALLEL_EPS: f64 = 1e-9;
/// Default minimum camera-frame depth for projection.
pub const DEPTH_EPS: f64 = 1e-6;
/// Near-unit quaternions within this distance of norm 1 are silently
/// renormalized; anything further off is still renormalized but must be
/// non-degenerate.
pub const QUATERNION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("ray is parallel to the plane (|d·n| = {0:e})")]
    RayParallelToPlane(f64),
    #[error("plane intersection lies behind the ray origin (depth {0})")]
    RayPointsAway(f64),
    #[error("point is behind the camera (camera depth {0})")]
    PointBehindCamera(f64),
    #[error("degenerate {0}")]
    Degenerate(&'static str),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    origin: Vec3,
    direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self, GeometryError> {
        let norm = direction.norm();
        if !(norm.is_finite() && norm > 1e-12) || !origin.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::Degenerate("ray direction"));
        }
        Ok(Self {
            origin,
            direction: direction / norm,
        })
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn direction(&self) -> Vec3 {
        self.direction
    }

    pub fn at(&self, depth: f64) -> Vec3 {
        self.origin + self.direction * depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    normal: Vec3,
    point: Vec3,
}

impl Plane {
    pub fn new(normal: Vec3, point: Vec3) -> Result<Self, GeometryError> {
        let norm = normal.norm();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(GeometryError::Degenerate("plane normal"));
        }
        Ok(Self {
            normal: normal / norm,
            point,
        })
    }

    /// The `z = 0` ground plane.
    pub fn ground() -> Self {
        Self {
            normal: Vec3::z(),
            point: Vec3::zeros(),
        }
    }

    pub fn normal(&self) -> Vec3 {
        self.normal
    }

    pub fn point(&self) -> Vec3 {
        self.point
    }

    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        (x - self.point).dot(&self.normal)
    }
}

/// Intersects a ray with a plane, returning the depth along the ray and
/// the hit point.
pub fn intersect_ray_plane(ray: &Ray, plane: &Plane) -> Result<(f64, Vec3), GeometryError> {
    intersect_ray_plane_eps(ray, plane, PARALLEL_EPS)
}

pub fn intersect_ray_plane_eps(
    ray: &Ray,
    plane: &Plane,
    eps_parallel: f64,
) -> Result<(f64, Vec3), GeometryError> {
    let denom = ray.direction.dot(&plane.normal);
    if denom.abs() <= eps_parallel {
        return Err(GeometryError::RayParallelToPlane(denom.abs()));
    }
    let depth = (plane.point - ray.origin).dot(&plane.normal) / denom;
    if depth < 0.0 {
        return Err(GeometryError::RayPointsAway(depth));
    }
    Ok((depth, ray.at(depth)))
}

/// Pinhole camera. `rotation`/`translation` map world to camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    focal: f64,
    principal: (f64, f64),
    rotation: Matrix3<f64>,
    translation: Vec3,
    width: u32,
    height: u32,
}

impl CameraModel {
    pub fn new(
        focal: f64,
        principal: (f64, f64),
        rotation: Matrix3<f64>,
        translation: Vec3,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(focal.is_finite() && focal > 0.0) {
            return Err(GeometryError::InvalidCamera(format!("focal length {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        let (cu, cv) = principal;
        if !(0.0..width as f64).contains(&cu) || !(0.0..height as f64).contains(&cv) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({cu}, {cv}) outside {width}x{height}"
            )));
        }
        let gram = rotation * rotation.transpose();
        let off = (gram - Matrix3::identity()).abs().max();
        if off > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidCamera("rotation is not in SO(3)".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite translation".into()));
        }
        Ok(Self {
            focal,
            principal,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`. The principal point is the
    /// image center. When `up` is nearly parallel to the viewing
    /// direction, world `+y` is used instead.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let forward = target - eye;
        let dist = forward.norm();
        if !(dist.is_finite() && dist > 1e-12) {
            return Err(GeometryError::Degenerate("look-at direction"));
        }
        let forward = forward / dist;
        let mut right = forward.cross(&up);
        if right.norm() < 1e-6 {
            right = forward.cross(&Vec3::y());
            if right.norm() < 1e-6 {
                right = forward.cross(&Vec3::x());
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            (width as f64 / 2.0, height as f64 / 2.0),
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn principal(&self) -> (f64, f64) {
        self.principal
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Continuous image coordinates of the center of pixel `(col, row)`.
    pub fn pixel_center(col: u32, row: u32) -> (f64, f64) {
        (col as f64 + 0.5, row as f64 + 0.5)
    }

    /// World-space ray from the optical center through image point `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Ray {
        let (cu, cv) = self.principal;
        let d_cam = Vec3::new((u - cu) / self.focal, (v - cv) / self.focal, 1.0);
        Ray {
            origin: self.center(),
            direction: (self.rotation.transpose() * d_cam).normalize(),
        }
    }
}

/// Pinhole projection `p = K T P` with `K = [[f,0,cu],[0,f,cv],[0,0,1]]`.
pub fn project_point(camera: &CameraModel, p: &Vec3) -> Result<(f64, f64), GeometryError> {
    let pc = camera.to_camera(p);
    if pc.z <= DEPTH_EPS {
        return Err(GeometryError::PointBehindCamera(pc.z));
    }
    let (cu, cv) = camera.principal;
    Ok((
        camera.focal * pc.x / pc.z + cu,
        camera.focal * pc.y / pc.z + cv,
    ))
}

/// Ground-plane point imaged at `(u, v)`.
pub fn pixel_to_ground(
    camera: &CameraModel,
    pixel: (f64, f64),
    plane: &Plane,
) -> Result<Vec3, GeometryError> {
    let ray = camera.pixel_ray(pixel.0, pixel.1);
    intersect_ray_plane(&ray, plane).map(|(_, p)| p)
}

/// Rigid transform `x ↦ R(Q) x + T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub translation: [f64; 3],
    /// `(x, y, z, w)`
    pub quaternion: [f64; 4],
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            translation: [0.0; 3],
            quaternion: [0.0, 0.0, 0.0, 1.0],
        }
    }

    /// Builds a pose, renormalizing the quaternion.
    pub fn new(translation: Vec3, quaternion: [f64; 4]) -> Result<Self, GeometryError> {
        let norm = quaternion.iter().map(|q| q * q).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 1e-12) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::Degenerate("pose quaternion"));
        }
        Ok(Self {
            translation: translation.into(),
            quaternion: quaternion.map(|q| q / norm),
        })
    }

    /// Rotation by `yaw` radians about world `+z`, then translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let half = 0.5 * yaw;
        Self {
            translation: translation.into(),
            quaternion: [0.0, 0.0, half.sin(), half.cos()],
        }
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.quaternion.iter().map(|q| q * q).sum::<f64>().sqrt()
    }

    pub fn is_yaw_only(&self) -> bool {
        self.quaternion[0] == 0.0 && self.quaternion[1] == 0.0
    }

    /// Rotation angle about `+z`; exact for yaw-only poses.
    pub fn yaw(&self) -> f64 {
        2.0 * self.quaternion[2].atan2(self.quaternion[3])
    }

    pub fn renormalized(mut self) -> Self {
        let n = self.quaternion_norm();
        self.quaternion = self.quaternion.map(|q| q / n);
        self
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let [x, y, z, w] = self.quaternion;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation() * x + self.translation()
    }

    pub fn apply_inverse(&self, x: &Vec3) -> Vec3 {
        self.rotation().transpose() * (x - self.translation())
    }

    /// `self ∘ inner`: applying the result equals applying `inner` first.
    pub fn compose(&self, inner: &PoseSE3) -> PoseSE3 {
        let q = hamilton(self.quaternion, inner.quaternion);
        let t = self.rotation() * inner.translation() + self.translation();
        PoseSE3 {
            translation: t.into(),
            quaternion: q,
        }
        .renormalized()
    }
}

/// Hamilton product of `(x, y, z, w)` quaternions.
pub fn hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [ax, ay, az, aw] = a;
    let [bx, by, bz, bw] = b;
    [
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ]
}

/// Uniform sample on the upper (`z > 0`) hemisphere of the given radius.
pub fn hemisphere_sample<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Vec3 {
    // 1 - U[0,1) lies in (0, 1], so z is strictly positive.
    let z = 1.0 - rng.random::<f64>();
    let azimuth = rng.random::<f64>() * std::f64::consts::TAU;
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * azimuth.cos(), r * azimuth.sin(), z) * radius
}

/// Point on a sphere of radius `radius` at the given azimuth/elevation.
pub fn spherical_to_cartesian(azimuth: f64, elevation: f64, radius: f64) -> Vec3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vec3::new(radius * ce * ca, radius * ce * sa, radius * se)
}

/// Inverse of [`spherical_to_cartesian`]: `(azimuth, elevation, radius)`,
/// azimuth in `[0, 2π)`.
pub fn cartesian_to_spherical(p: &Vec3) -> (f64, f64, f64) {
    let radius = p.norm();
    let azimuth = p.y.atan2(p.x).rem_euclid(std::f64::consts::TAU);
    let elevation = (p.z / radius).clamp(-1.0, 1.0).asin();
    (azimuth, elevation, radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    fn nadir_camera() -> CameraModel {
        CameraModel::look_at(Vec3::new(0.0, 0.0, 2.0), Vec3::zeros(), Vec3::z(), 1.0, 128, 128)
            .unwrap()
    }

    #[test]
    fn ray_hits_ground_straight_down() {
        let ray = Ray::new(Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, -1.0)).unwrap();
        let (d, p) = intersect_ray_plane(&ray, &Plane::ground()).unwrap();
        assert_eq!(d, 3.0);
        assert_relative_eq!(p, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn ray_hits_ground_at_45_degrees() {
        let ray = Ray::new(Vec3::new(0.0, 0.0, 3.0), Vec3::new(1.0, 0.0, -1.0)).unwrap();
        let (d, p) = intersect_ray_plane(&ray, &Plane::ground()).unwrap();
        assert_relative_eq!(d, 3.0 * 2f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(p, Vec3::new(3.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn parallel_and_receding_rays_fail() {
        let flat = Ray::new(Vec3::new(0.0, 0.0, 3.0), Vec3::x()).unwrap();
        assert!(matches!(
            intersect_ray_plane(&flat, &Plane::ground()),
            Err(GeometryError::RayParallelToPlane(_))
        ));
        let up = Ray::new(Vec3::new(0.0, 0.0, 3.0), Vec3::z()).unwrap();
        assert!(matches!(
            intersect_ray_plane(&up, &Plane::ground()),
            Err(GeometryError::RayPointsAway(_))
        ));
    }

    #[test]
    fn ray_direction_is_unit() {
        let ray = Ray::new(Vec3::zeros(), Vec3::new(3.0, -4.0, 12.0)).unwrap();
        assert!((ray.direction().norm() - 1.0).abs() < 1e-9);
        assert!(Ray::new(Vec3::zeros(), Vec3::zeros()).is_err());
    }

    #[test]
    fn projection_examples() {
        let cam = CameraModel::new(1.0, (0.0, 0.0), Matrix3::identity(), Vec3::zeros(), 8, 8).unwrap();
        assert_eq!(project_point(&cam, &Vec3::new(0.0, 0.0, 1.0)).unwrap(), (0.0, 0.0));

        let cam =
            CameraModel::new(2.0, (64.0, 64.0), Matrix3::identity(), Vec3::zeros(), 128, 128).unwrap();
        let (u, v) = project_point(&cam, &Vec3::new(1.0, 1.0, 2.0)).unwrap();
        assert_relative_eq!(u, 65.0);
        assert_relative_eq!(v, 65.0);
        assert!(matches!(
            project_point(&cam, &Vec3::new(1.0, 1.0, 0.0)),
            Err(GeometryError::PointBehindCamera(_))
        ));
    }

    #[test]
    fn camera_validation() {
        let bad_rot = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(CameraModel::new(1.0, (4.0, 4.0), bad_rot, Vec3::zeros(), 8, 8).is_err());
        assert!(CameraModel::new(0.0, (4.0, 4.0), Matrix3::identity(), Vec3::zeros(), 8, 8).is_err());
        assert!(CameraModel::new(1.0, (8.0, 4.0), Matrix3::identity(), Vec3::zeros(), 8, 8).is_err());
    }

    #[test]
    fn nadir_center_pixel_maps_to_origin() {
        let cam = nadir_camera();
        let p = pixel_to_ground(&cam, (64.0, 64.0), &Plane::ground()).unwrap();
        assert_relative_eq!(p, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn horizon_pixel_fails() {
        // Camera looking horizontally: the center pixel's ray never meets the ground.
        let cam = CameraModel::look_at(
            Vec3::new(0.0, -2.0, 1.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::z(),
            64.0,
            128,
            128,
        )
        .unwrap();
        assert!(matches!(
            pixel_to_ground(&cam, (64.0, 64.0), &Plane::ground()),
            Err(GeometryError::RayParallelToPlane(_))
        ));
        // Above the horizon the plane is behind the ray.
        assert!(matches!(
            pixel_to_ground(&cam, (64.0, 10.0), &Plane::ground()),
            Err(GeometryError::RayPointsAway(_))
        ));
    }

    #[test]
    fn pixel_ground_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cam = CameraModel::look_at(
            Vec3::new(1.2, -0.7, 1.5),
            Vec3::zeros(),
            Vec3::z(),
            64.0,
            128,
            128,
        )
        .unwrap();
        let plane = Plane::ground();
        let mut checked = 0;
        while checked < 100 {
            let px = (rng.random::<f64>() * 128.0, rng.random::<f64>() * 128.0);
            let Ok(g) = pixel_to_ground(&cam, px, &plane) else {
                continue;
            };
            assert!(plane.signed_distance(&g).abs() < 1e-7);
            let (u, v) = project_point(&cam, &g).unwrap();
            assert!((u - px.0).abs() < 1e-5 && (v - px.1).abs() < 1e-5);
            let back = pixel_to_ground(&cam, (u, v), &plane).unwrap();
            assert!((back - g).norm() < 1e-7);
            checked += 1;
        }
    }

    #[test]
    fn pose_examples() {
        let x = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(PoseSE3::identity().apply(&x), x);

        let yaw = PoseSE3::new(Vec3::zeros(), [0.0, 0.0, FRAC_PI_4.sin(), FRAC_PI_4.cos()]).unwrap();
        assert_relative_eq!(yaw.apply(&Vec3::x()), Vec3::y(), epsilon = 1e-12);

        let shift = PoseSE3::new(Vec3::new(0.1, 0.0, 0.0), [0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_relative_eq!(shift.apply(&Vec3::zeros()), Vec3::new(0.1, 0.0, 0.0));
    }

    #[test]
    fn pose_renormalizes_and_rejects_zero() {
        let p = PoseSE3::new(Vec3::zeros(), [0.0, 0.0, 0.0, 1.0 + 5e-7]).unwrap();
        assert!((p.quaternion_norm() - 1.0).abs() < 1e-12);
        assert!(PoseSE3::new(Vec3::zeros(), [0.0; 4]).is_err());
        assert!(PoseSE3::from_yaw(1.3, Vec3::zeros()).is_yaw_only());
        assert_relative_eq!(PoseSE3::from_yaw(1.3, Vec3::zeros()).yaw(), 1.3, epsilon = 1e-12);
    }

    #[test]
    fn hemisphere_samples_lie_on_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for radius in [3.0, 2.0] {
            for _ in 0..1000 {
                let p = hemisphere_sample(&mut rng, radius);
                assert!((p.norm() - radius).abs() < 1e-9);
                assert!(p.z > 0.0);
            }
        }
    }

    #[test]
    fn hemisphere_mean_height_is_half_radius() {
        // Uniform on the hemisphere ⇒ z/r ~ U(0,1): mean r/2, sd r/√12.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let radius = 3.0;
        let mean = (0..n).map(|_| hemisphere_sample(&mut rng, radius).z).sum::<f64>() / n as f64;
        let se = radius / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - radius / 2.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn spherical_round_trip() {
        let p = spherical_to_cartesian(4.0, 0.7, 3.0);
        let (a, e, r) = cartesian_to_spherical(&p);
        assert_relative_eq!(a, 4.0, epsilon = 1e-12);
        assert_relative_eq!(e, 0.7, epsilon = 1e-12);
        assert_relative_eq!(r, 3.0, epsilon = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn quat() -> impl Strategy<Value = [f64; 4]> {
            prop::array::uniform4(-1.0f64..1.0).prop_filter("non-degenerate", |q| {
                q.iter().map(|v| v * v).sum::<f64>() > 1e-3
            })
        }

        fn vec3() -> impl Strategy<Value = Vec3> {
            prop::array::uniform3(-5.0f64..5.0).prop_map(Vec3::from)
        }

        proptest! {
            #[test]
            fn rotation_preserves_norm(q in quat(), x in vec3()) {
                let pose = PoseSE3::new(Vec3::zeros(), q).unwrap();
                prop_assert!(((pose.rotation() * x).norm() - x.norm()).abs() < 1e-9);
            }

            #[test]
            fn inverse_undoes_apply(q in quat(), t in vec3(), x in vec3()) {
                let pose = PoseSE3::new(t, q).unwrap();
                prop_assert!((pose.apply_inverse(&pose.apply(&x)) - x).norm() < 1e-9);
            }

            #[test]
            fn composition_matches_sequential_application(
                q1 in quat(), t1 in vec3(), q2 in quat(), t2 in vec3(), x in vec3()
            ) {
                let p1 = PoseSE3::new(t1, q1).unwrap();
                let p2 = PoseSE3::new(t2, q2).unwrap();
                let seq = p2.apply(&p1.apply(&x));
                let composed = p2.compose(&p1).apply(&x);
                prop_assert!((seq - composed).norm() < 1e-9);
            }
        }
    }
}
