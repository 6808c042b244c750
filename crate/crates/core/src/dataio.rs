//! Synthetic dataset generation and file formats: scene descriptors (JSON),
//! masks (binary PGM), meshes (OBJ) and result tables (CSV).

use crate::generator::{sample_latent, Category, GeneratorConfig, GeneratorError, GeneratorSpec, LatentVector};
use crate::geometry::{hemisphere_sample, CameraModel, GeometryError, Plane, PoseSE3, Vec3};
use crate::occfield::mesh::{extract_mesh, MeshError, TriMesh};
use crate::occfield::{Primitive, ShapeSpec, DEFAULT_SHARPNESS};
use crate::shadow::{render_segmentation, render_shadow, LightSource, RenderMode, Scene, ShadowError, ShadowImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const LIGHT_DISTANCE: f64 = 3.0;
pub const CAMERA_DISTANCE: f64 = 2.0;
pub const DEFAULT_IMAGE_SIZE: u32 = 128;
pub const DEFAULT_FOCAL: f64 = 64.0;
pub const MIN_SHADOW_FRACTION: f64 = 0.005;
pub const MAX_SHADOW_FRACTION: f64 = 0.6;
pub const MAX_SCENE_ATTEMPTS: usize = 10;
pub const MESH_RESOLUTION: usize = 64;

pub const SCENE_FILE: &str = "scene.json";
pub const SHADOW_FILE: &str = "shadow.pgm";
pub const VALIDITY_FILE: &str = "shadow.valid.pgm";
pub const SEGMENTATION_FILE: &str = "seg.pgm";
pub const MESH_FILE: &str = "gt.obj";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Where a parse failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Byte(usize),
    Line(usize),
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Byte(b) => write!(f, "byte {b}"),
            Position::Line(l) => write!(f, "line {l}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: parse error at {position}: {message}", path.display())]
    Parse {
        path: PathBuf,
        position: Position,
        message: String,
    },
    #[error("{}: schema version {found}, expected {SCHEMA_VERSION}", path.display())]
    SchemaVersionMismatch { path: PathBuf, found: u64 },
    #[error("{}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
    #[error("scene {index}: no usable shadow after {attempts} attempts")]
    DegenerateScene { index: usize, attempts: usize },
    #[error("image is {0}x{1}, expected {2}x{3}")]
    SizeMismatch(u32, u32, u32, u32),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(bytes).map_err(io_err(path))
}

// ---------------------------------------------------------------- PGM

/// Encodes `values` (clamped to `[0, 1]`) as binary P5 with maxval 255.
pub fn encode_pgm(width: u32, height: u32, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Decodes a P5 image into `(width, height, values in [0, 1])`.
/// Errors carry the byte offset of the problem; `path` only labels them.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(u32, u32, Vec<f64>)> {
    let fail = |at: usize, message: String| DataError::Parse {
        path: path.to_path_buf(),
        position: Position::Byte(at),
        message,
    };
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<(usize, String)> {
        loop {
            match bytes.get(*pos) {
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                        *pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(_) => break,
                None => return Err(fail(*pos, "unexpected end of header".into())),
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            *pos += 1;
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };
    let (at, magic) = token(&mut pos)?;
    if magic != "P5" {
        return Err(fail(at, format!("expected magic P5, found {magic:?}")));
    }
    let number = |pos: &mut usize, what: &str| -> Result<u32> {
        let (at, t) = token(pos)?;
        t.parse::<u32>()
            .map_err(|_| fail(at, format!("invalid {what} {t:?}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval_at = pos;
    let maxval = number(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(fail(maxval_at, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(fail(pos, "missing whitespace after maxval".into()));
    }
    pos += 1;
    let n = width as usize * height as usize;
    let data = &bytes[pos..];
    if data.len() < n {
        return Err(fail(
            pos + data.len(),
            format!("truncated pixel data: expected {n} bytes, found {}", data.len()),
        ));
    }
    if data.len() > n {
        return Err(fail(pos + n, format!("{} trailing bytes", data.len() - n)));
    }
    let scale = maxval as f64;
    Ok((width, height, data.iter().map(|&b| (b as f64 / scale).min(1.0)).collect()))
}

pub fn write_pgm(path: &Path, image: &ShadowImage) -> Result<()> {
    write_bytes(path, &encode_pgm(image.width(), image.height(), image.values()))
}

/// Reads one PGM as an image with every pixel valid.
pub fn read_pgm(path: &Path) -> Result<ShadowImage> {
    let (w, h, values) = decode_pgm(&read_bytes(path)?, path)?;
    let n = values.len();
    Ok(ShadowImage::from_parts(w, h, values, vec![true; n])?)
}

/// `shadow.pgm` → `shadow.valid.pgm`.
pub fn validity_path(mask: &Path) -> PathBuf {
    mask.with_extension("valid.pgm")
}

/// Writes the values to `path` and the validity flags to its `.valid.pgm` sibling.
pub fn write_mask_pair(path: &Path, image: &ShadowImage) -> Result<()> {
    write_pgm(path, image)?;
    let valid: Vec<f64> = image.valid().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    write_bytes(&validity_path(path), &encode_pgm(image.width(), image.height(), &valid))
}

/// Reads a mask and, when present, its `.valid.pgm` sibling; without one
/// every pixel is valid.
pub fn read_mask_pair(path: &Path) -> Result<ShadowImage> {
    let image = read_pgm(path)?;
    let vpath = validity_path(path);
    if !vpath.exists() {
        return Ok(image);
    }
    let valid = read_pgm(&vpath)?;
    if (valid.width(), valid.height()) != (image.width(), image.height()) {
        return Err(DataError::SizeMismatch(valid.width(), valid.height(), image.width(), image.height()));
    }
    let flags = valid.values().iter().map(|&v| v > 0.5).collect();
    Ok(ShadowImage::from_parts(image.width(), image.height(), image.values().to_vec(), flags)?)
}

// ---------------------------------------------------------------- OBJ

pub fn encode_obj(mesh: &TriMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}

/// Parses `v`/`f` records. Faces must be triangles; `f a/b/c` forms keep the
/// vertex index. Other record types are ignored.
pub fn decode_obj(text: &str, path: &Path) -> Result<TriMesh> {
    let mut mesh = TriMesh::default();
    let mut faces_at = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fail = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            position: Position::Line(i + 1),
            message,
        };
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .map(|t| t.parse::<f64>().map_err(|_| fail(format!("invalid coordinate {t:?}"))))
                    .collect::<Result<_>>()?;
                if xyz.len() != 3 {
                    return Err(fail(format!("vertex has {} coordinates", xyz.len())));
                }
                mesh.vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or(t);
                        match head.parse::<usize>() {
                            Ok(k) if k >= 1 => Ok(k - 1),
                            _ => Err(fail(format!("invalid face index {t:?}"))),
                        }
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(fail(format!("face has {} vertices", idx.len())));
                }
                mesh.faces.push([idx[0], idx[1], idx[2]]);
                faces_at.push(i + 1);
            }
            _ => {}
        }
    }
    let n = mesh.vertices.len();
    for (f, line) in mesh.faces.iter().zip(faces_at) {
        if f.iter().any(|&k| k >= n) {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                position: Position::Line(line),
                message: format!("face references a vertex beyond {n}"),
            });
        }
    }
    Ok(mesh)
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    write_bytes(path, encode_obj(mesh).as_bytes())
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    decode_obj(&text, path)
}

// ---------------------------------------------------------------- CSV

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub category: String,
    pub scene: String,
    pub iou: f64,
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        kind => DataError::Parse {
            path: path.to_path_buf(),
            position: Position::Line(line),
            message: format!("{kind:?}"),
        },
    }
}

// ---------------------------------------------------------------- JSON

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDescriptor {
    pub focal: f64,
    /// `(c_u, c_v)`
    pub principal: [f64; 2],
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl CameraDescriptor {
    pub fn camera(&self) -> Result<CameraModel, GeometryError> {
        let base = CameraModel::look_at(
            self.position.into(),
            self.look_at.into(),
            self.up.into(),
            self.focal,
            self.width,
            self.height,
        )?;
        CameraModel::new(
            self.focal,
            (self.principal[0], self.principal[1]),
            *base.rotation(),
            base.translation(),
            self.width,
            self.height,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneDescriptor {
    pub normal: [f64; 3],
    pub point: [f64; 3],
}

/// File names relative to the descriptor's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFiles {
    pub shadow: String,
    pub validity: String,
    pub segmentation: String,
    pub mesh: String,
}

impl Default for SceneFiles {
    fn default() -> Self {
        Self {
            shadow: SHADOW_FILE.into(),
            validity: VALIDITY_FILE.into(),
            segmentation: SEGMENTATION_FILE.into(),
            mesh: MESH_FILE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub schema_version: u32,
    pub camera: CameraDescriptor,
    pub light: [f64; 3],
    pub plane: PlaneDescriptor,
    pub pose: PoseSE3,
    pub generator: GeneratorConfig,
    /// Present for scenes decoded from the generator.
    pub latent: Option<LatentVector>,
    /// Ground-truth shape in its object frame; `pose` places it.
    pub shape: ShapeSpec,
    pub files: SceneFiles,
}

impl SceneDescriptor {
    pub fn scene(&self) -> Result<Scene, GeometryError> {
        let mut scene = Scene::new(self.camera.camera()?, LightSource::at(self.light.into()), self.pose);
        scene.plane = Plane::new(self.plane.normal.into(), self.plane.point.into())?;
        Ok(scene)
    }

    pub fn generator(&self) -> Result<GeneratorSpec, GeneratorError> {
        GeneratorSpec::new(self.generator)
    }

    /// The ground-truth shape placed in the world.
    pub fn placed_shape(&self) -> ShapeSpec {
        self.shape.clone().with_pose(self.pose.compose(&self.shape.pose))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| json_err(path, e))?;
        let found = value.get("schema_version").and_then(|v| v.as_u64());
        match found {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(DataError::SchemaVersionMismatch { path: path.into(), found: v }),
            None => {
                return Err(DataError::Invalid {
                    path: path.into(),
                    message: "missing schema_version".into(),
                })
            }
        }
        let desc: Self = serde_json::from_value(value).map_err(|e| DataError::Invalid {
            path: path.into(),
            message: e.to_string(),
        })?;
        let invalid = |message: String| DataError::Invalid {
            path: path.into(),
            message,
        };
        let qn = desc.pose.quaternion_norm();
        if (qn - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("pose quaternion has norm {qn}")));
        }
        if !(desc.light[2] > 0.0) {
            return Err(invalid("light must lie above the ground".into()));
        }
        desc.shape.validate().map_err(|e| invalid(e.to_string()))?;
        if let Some(z) = &desc.latent {
            if z.dim() != desc.generator.latent_dim {
                return Err(invalid(format!(
                    "latent has dimension {}, generator expects {}",
                    z.dim(),
                    desc.generator.latent_dim
                )));
            }
        }
        Ok(desc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_json().as_bytes())
    }

    /// Loads a descriptor and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let desc = Self::from_json(&text, path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let f = &desc.files;
        for name in [&f.shadow, &f.validity, &f.segmentation, &f.mesh] {
            let p = dir.join(name);
            if !p.is_file() {
                return Err(DataError::Io {
                    path: p,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file is missing"),
                });
            }
        }
        Ok(desc)
    }
}

fn json_err(path: &Path, e: serde_json::Error) -> DataError {
    DataError::Parse {
        path: path.into(),
        position: Position::Line(e.line()),
        message: e.to_string(),
    }
}

/// A descriptor together with its observed shadow (validity applied).
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub dir: PathBuf,
    pub descriptor: SceneDescriptor,
    pub observed: ShadowImage,
}

/// Loads `dir/scene.json` and its shadow mask pair.
pub fn load_scene(dir: &Path) -> Result<LoadedScene> {
    let descriptor = SceneDescriptor::load(&dir.join(SCENE_FILE))?;
    let observed = read_pgm(&dir.join(&descriptor.files.shadow))?;
    let valid = read_pgm(&dir.join(&descriptor.files.validity))?;
    if (valid.width(), valid.height()) != (observed.width(), observed.height()) {
        return Err(DataError::SizeMismatch(valid.width(), valid.height(), observed.width(), observed.height()));
    }
    let flags = valid.values().iter().map(|&v| v > 0.5).collect();
    let observed = ShadowImage::from_parts(observed.width(), observed.height(), observed.values().to_vec(), flags)?;
    Ok(LoadedScene {
        dir: dir.to_path_buf(),
        descriptor,
        observed,
    })
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// 80/20 split by a hash of the scene index.
pub fn split_of(index: usize) -> Split {
    if splitmix64(index as u64) % 5 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    /// Relative to the manifest's directory.
    pub dir: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub category: Category,
    pub held_out: bool,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.scenes.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, serde_json::to_string_pretty(self).expect("manifest serializes").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(DataError::SchemaVersionMismatch { path: path.into(), found: v }),
            None => {
                return Err(DataError::Invalid {
                    path: path.into(),
                    message: "missing schema_version".into(),
                })
            }
        }
        serde_json::from_value(value).map_err(|e| DataError::Invalid {
            path: path.into(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetOptions {
    pub scenes: usize,
    pub category: Category,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Use the hand-built composite shapes instead of generator samples.
    pub held_out: bool,
}

impl DatasetOptions {
    pub fn new(scenes: usize, category: Category, seed: u64) -> Self {
        Self {
            scenes,
            category,
            seed,
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
            focal: DEFAULT_FOCAL,
            held_out: false,
        }
    }
}

/// Multi-box furniture outside the decoder's range, in object frames.
pub fn held_out_shapes() -> Vec<ShapeSpec> {
    let b = |c: [f64; 3], h: [f64; 3]| Primitive::cuboid(c, h, 8.0);
    let leg = 0.05;
    let legs = |x: f64, y: f64, z: f64, h: f64| {
        [[x, y], [-x, y], [x, -y], [-x, -y]].map(|[px, py]| b([px, py, z], [leg, leg, h]))
    };
    let chair = {
        let mut p = vec![b([0.0, 0.0, 0.0], [0.3, 0.3, 0.05]), b([0.0, 0.25, 0.35], [0.3, 0.05, 0.3])];
        p.extend(legs(0.25, 0.25, -0.3, 0.25));
        p
    };
    let table = {
        let mut p = vec![b([0.0, 0.0, 0.3], [0.5, 0.35, 0.05])];
        p.extend(legs(0.42, 0.28, -0.1, 0.35));
        p
    };
    let stool = vec![
        b([0.0, 0.0, 0.2], [0.2, 0.2, 0.05]),
        b([0.0, 0.0, -0.1], [0.06, 0.06, 0.25]),
        b([0.0, 0.0, -0.38], [0.2, 0.2, 0.05]),
    ];
    let bench = {
        let mut p = vec![b([0.0, 0.0, 0.0], [0.5, 0.15, 0.05])];
        p.extend([b([0.42, 0.0, -0.2], [0.05, 0.12, 0.15]), b([-0.42, 0.0, -0.2], [0.05, 0.12, 0.15])]);
        p
    };
    [chair, table, stool, bench]
        .into_iter()
        .map(|p| ShapeSpec::new(p, DEFAULT_SHARPNESS, PoseSE3::identity()).expect("valid composite"))
        .collect()
}

/// Scene directory name for `index`.
pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:04}")
}

struct SampledScene {
    descriptor: SceneDescriptor,
    shadow: ShadowImage,
    segmentation: ShadowImage,
}

fn sample_scene(opts: &DatasetOptions, gen: &GeneratorSpec, held_out: &[ShapeSpec], index: usize) -> Result<SampledScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64 + 1);
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let (latent, shape) = if opts.held_out {
            (None, held_out[index % held_out.len()].clone())
        } else {
            let z = sample_latent(&mut rng, gen.latent_dim());
            let shape = gen.decode(&z)?;
            (Some(z), shape)
        };
        let light = hemisphere_sample(&mut rng, LIGHT_DISTANCE);
        let eye = hemisphere_sample(&mut rng, CAMERA_DISTANCE);
        let yaw = rng.random::<f64>() * std::f64::consts::TAU;
        let pose = PoseSE3::from_yaw(yaw, Vec3::new(0.0, 0.0, shape.resting_height()));
        let camera = CameraDescriptor {
            focal: opts.focal,
            principal: [opts.width as f64 / 2.0, opts.height as f64 / 2.0],
            position: eye.into(),
            look_at: [0.0; 3],
            up: [0.0, 0.0, 1.0],
            width: opts.width,
            height: opts.height,
        };
        let descriptor = SceneDescriptor {
            schema_version: SCHEMA_VERSION,
            camera,
            light: light.into(),
            plane: PlaneDescriptor {
                normal: [0.0, 0.0, 1.0],
                point: [0.0; 3],
            },
            pose,
            generator: *gen.config(),
            latent,
            shape,
            files: SceneFiles::default(),
        };
        let scene = descriptor.scene()?;
        let shadow = render_shadow(&scene, &descriptor.shape, RenderMode::Hard)?.binarized();
        if shadow.valid_count() == 0 {
            continue;
        }
        let frac = shadow.shadow_fraction();
        if !(MIN_SHADOW_FRACTION..=MAX_SHADOW_FRACTION).contains(&frac) {
            continue;
        }
        let segmentation = render_segmentation(&scene, &descriptor.shape)?;
        return Ok(SampledScene {
            descriptor,
            shadow,
            segmentation,
        });
    }
    Err(DataError::DegenerateScene {
        index,
        attempts: MAX_SCENE_ATTEMPTS,
    })
}

fn write_scene(dir: &Path, s: &SampledScene) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let f = &s.descriptor.files;
    write_mask_pair(&dir.join(&f.shadow), &s.shadow)?;
    write_pgm(&dir.join(&f.segmentation), &s.segmentation)?;
    let mesh = extract_mesh(&s.descriptor.placed_shape(), MESH_RESOLUTION, 0.5)?;
    write_obj(&dir.join(&f.mesh), &mesh)?;
    s.descriptor.save(&dir.join(SCENE_FILE))
}

/// Renders `opts.scenes` scenes under `out` and writes the manifest. Each
/// scene draws from its own rng stream, so output does not depend on the
/// thread count.
pub fn generate_dataset(out: &Path, opts: &DatasetOptions) -> Result<Manifest> {
    if opts.scenes == 0 {
        return Err(DataError::Invalid {
            path: out.into(),
            message: "at least one scene is required".into(),
        });
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let gen = GeneratorSpec::new(GeneratorConfig::new(opts.category, opts.seed))?;
    let held_out = held_out_shapes();
    (0..opts.scenes).into_par_iter().try_for_each(|i| {
        let scene = sample_scene(opts, &gen, &held_out, i)?;
        write_scene(&out.join(scene_dir_name(i)), &scene)
    })?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed: opts.seed,
        category: opts.category,
        held_out: opts.held_out,
        scenes: (0..opts.scenes)
            .map(|index| ManifestEntry {
                index,
                dir: scene_dir_name(index),
                split: split_of(index),
            })
            .collect(),
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
