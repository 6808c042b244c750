//! Marching-cubes surface extraction.

use super::tables::{CORNERS, EDGES, TRIANGLES};
use super::ShapeSpec;
use crate::geometry::Vec3;
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Half side of the object-frame extraction box `[−B, B]³`.
pub const MESH_BOUND: f64 = 1.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("no grid cell straddles iso value {0}")]
    EmptyLevelSet(f64),
    #[error("resolution must be at least 8, got {0}")]
    Resolution(usize),
    #[error("iso value must lie in (0, 1), got {0}")]
    Iso(f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    /// Counter-clockwise seen from outside.
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Volume enclosed by a closed, outward-oriented mesh.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Every undirected edge is used by exactly two faces, in opposite directions.
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(usize, usize), i32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *directed.entry((a, b)).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }
}

/// Marching cubes at `iso` on a `resolution³`-cell grid spanning the
/// object-frame box `[−1.2, 1.2]³`, so posed shapes are never clipped.
/// Vertices are returned in the world frame.
pub fn extract_mesh(shape: &ShapeSpec, resolution: usize, iso: f64) -> Result<TriMesh, MeshError> {
    if resolution < 8 {
        return Err(MeshError::Resolution(resolution));
    }
    if !(iso > 0.0 && iso < 1.0) {
        return Err(MeshError::Iso(iso));
    }
    let n = resolution + 1;
    let cell = 2.0 * MESH_BOUND / resolution as f64;
    let coord = |i: usize| -MESH_BOUND + i as f64 * cell;
    let grid_point = |i: usize, j: usize, k: usize| Vec3::new(coord(i), coord(j), coord(k));

    let prep = shape.prepare();
    let values: Vec<f64> = (0..n * n * n)
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx % n, (idx / n) % n, idx / (n * n));
            prep.eval(&grid_point(i, j, k), None)
        })
        .collect();
    let value = |i: usize, j: usize, k: usize| values[(k * n + j) * n + i];

    // Edge id -> vertex index; BTreeMap keeps vertex numbering deterministic.
    let mut edge_vertex: BTreeMap<usize, usize> = BTreeMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                let corner_vals = CORNERS.map(|c| value(i + c[0], j + c[1], k + c[2]));
                let mut cube = 0usize;
                for (bit, &v) in corner_vals.iter().enumerate() {
                    if v < iso {
                        cube |= 1 << bit;
                    }
                }
                if cube == 0 || cube == 255 {
                    continue;
                }
                let mut local = [usize::MAX; 12];
                for (e, &[c0, c1]) in EDGES.iter().enumerate() {
                    let (v0, v1) = (corner_vals[c0], corner_vals[c1]);
                    if (v0 < iso) == (v1 < iso) {
                        continue;
                    }
                    let (a, b) = (CORNERS[c0], CORNERS[c1]);
                    let axis = (0..3).find(|&d| a[d] != b[d]).expect("edge spans one axis");
                    let lo = if a[axis] < b[axis] { a } else { b };
                    let key = (((k + lo[2]) * n + (j + lo[1])) * n + (i + lo[0])) * 3 + axis;
                    local[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let t = (iso - v0) / (v1 - v0);
                        let p0 = grid_point(i + a[0], j + a[1], k + a[2]);
                        let p1 = grid_point(i + b[0], j + b[1], k + b[2]);
                        vertices.push(p0 + (p1 - p0) * t);
                        vertices.len() - 1
                    });
                }
                for tri in TRIANGLES[cube].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    faces.push([
                        local[tri[0] as usize],
                        local[tri[1] as usize],
                        local[tri[2] as usize],
                    ]);
                }
            }
        }
    }
    if faces.is_empty() {
        return Err(MeshError::EmptyLevelSet(iso));
    }
    for v in &mut vertices {
        *v = shape.pose.apply(v);
    }
    Ok(TriMesh { vertices, faces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseSE3;
    use crate::occfield::Primitive;

    fn sphere(r: f64, pose: PoseSE3) -> ShapeSpec {
        ShapeSpec::new(vec![Primitive::ellipsoid([0.0; 3], [r; 3])], 20.0, pose).unwrap()
    }

    #[test]
    fn sphere_vertices_lie_near_analytic_radius() {
        let mesh = extract_mesh(&sphere(0.4, PoseSE3::identity()), 64, 0.5).unwrap();
        let cell = 2.4 / 64.0;
        assert!(!mesh.vertices.is_empty());
        for v in &mesh.vertices {
            assert!((v.norm() - 0.4).abs() < 2.0 * cell, "radius {}", v.norm());
        }
        for f in &mesh.faces {
            assert!(f.iter().all(|&i| i < mesh.vertices.len()));
        }
    }

    #[test]
    fn sphere_mesh_is_closed_and_outward() {
        let mesh = extract_mesh(&sphere(0.4, PoseSE3::identity()), 32, 0.5).unwrap();
        assert!(mesh.is_watertight());
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.4f64.powi(3);
        let vol = mesh.signed_volume();
        assert!(vol > 0.0);
        assert!((vol - exact).abs() / exact < 0.05, "volume {vol} vs {exact}");
    }

    #[test]
    fn vertices_follow_the_pose() {
        let pose = PoseSE3::from_yaw(0.7, Vec3::new(0.3, -0.2, 1.5));
        let mesh = extract_mesh(&sphere(0.3, pose), 32, 0.5).unwrap();
        let center = pose.translation();
        for v in &mesh.vertices {
            assert!(((v - center).norm() - 0.3).abs() < 2.0 * 2.4 / 32.0);
        }
    }

    #[test]
    fn multi_primitive_mesh_is_watertight() {
        let shape = ShapeSpec::new(
            vec![
                Primitive::cuboid([0.0, 0.0, 0.3], [0.45, 0.35, 0.06], 6.0),
                Primitive::cuboid([0.3, 0.2, -0.1], [0.05, 0.05, 0.35], 6.0),
                Primitive::ellipsoid([-0.2, -0.1, 0.0], [0.2, 0.3, 0.25]),
            ],
            20.0,
            PoseSE3::identity(),
        )
        .unwrap();
        let mesh = extract_mesh(&shape, 40, 0.5).unwrap();
        assert!(mesh.is_watertight());
        assert!(mesh.signed_volume() > 0.0);
    }

    #[test]
    fn empty_level_set_and_bad_arguments() {
        let s = sphere(0.05, PoseSE3::identity());
        // The peak value σ(20) stays below this iso.
        assert_eq!(extract_mesh(&s, 16, 0.999_999_999_9), Err(MeshError::EmptyLevelSet(0.999_999_999_9)));
        assert_eq!(extract_mesh(&s, 4, 0.5), Err(MeshError::Resolution(4)));
        assert_eq!(extract_mesh(&s, 16, 1.0), Err(MeshError::Iso(1.0)));
    }
}
