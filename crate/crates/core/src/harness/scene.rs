//! Analytic scenes: spheres, planes and boxes with procedural textures, lit by
//! one directional light with Lambertian shading, ray traced on the CPU.

use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{generate_rays, Camera, Ray};
use crate::harness::io::Image;

/// Hits closer than this along the ray are ignored.
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Texture {
    Solid {
        color: [f64; 3],
    },
    /// 3-D checkerboard of cube side `scale`.
    Checker {
        scale: f64,
        colors: [[f64; 3]; 2],
    },
    /// Linear blend along `axis` between `range[0]` and `range[1]`.
    Gradient {
        axis: [f64; 3],
        range: [f64; 2],
        colors: [[f64; 3]; 2],
    },
    /// Smooth value noise on a lattice of spacing `scale`, keyed by the scene
    /// seed.
    Noise {
        scale: f64,
        colors: [[f64; 3]; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        texture: Texture,
    },
    /// Infinite plane through `point`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        texture: Texture,
    },
    /// Axis-aligned box.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        texture: Texture,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Light {
    /// Direction the light travels.
    pub direction: [f64; 3],
    #[serde(default = "default_ambient")]
    pub ambient: f64,
    #[serde(default = "default_intensity")]
    pub intensity: f64,
}

fn default_ambient() -> f64 {
    0.3
}

fn default_intensity() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookAt {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    pub fov_y: f64,
    pub size: [usize; 2],
    pub near: f64,
    pub far: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CameraSpec {
    LookAt { look_at: LookAt },
    Explicit(Camera),
}

impl CameraSpec {
    pub fn build(&self) -> Result<Camera> {
        match self {
            CameraSpec::Explicit(c) => Ok(c.clone()),
            CameraSpec::LookAt { look_at: l } => Camera::look_at(
                Vector3::from(l.eye),
                Vector3::from(l.target),
                Vector3::from(l.up),
                l.fov_y,
                l.size[0],
                l.size[1],
                l.near,
                l.far,
            ),
        }
    }
}

/// Camera roles by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub source: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub cameras: Vec<CameraSpec>,
    pub light: Light,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub background: [f64; 3],
    /// Samples per pixel side for colour (depth is traced at the centre).
    #[serde(default = "default_supersample")]
    pub supersample: usize,
    /// Defaults to: first camera held out for testing, up to three following
    /// ones as sources, the rest for training.
    #[serde(default)]
    pub split: Option<Split>,
}

fn default_supersample() -> usize {
    1
}

impl SceneSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene spec serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(invalid("scene has no primitives"));
        }
        if self.cameras.is_empty() {
            return Err(invalid("scene has no cameras"));
        }
        if self.supersample == 0 {
            return Err(invalid("supersample must be at least 1"));
        }
        for p in &self.primitives {
            match p {
                Primitive::Sphere { radius, .. } if !(*radius > 0.0) => return Err(invalid("sphere radius must be positive")),
                Primitive::Plane { normal, .. } if Vector3::from(*normal).norm() == 0.0 => {
                    return Err(invalid("plane normal must be non-zero"))
                }
                Primitive::Box { min, max, .. } if (0..3).any(|i| min[i] >= max[i]) => {
                    return Err(invalid("box min must be below max on every axis"))
                }
                _ => {}
            }
        }
        if Vector3::from(self.light.direction).norm() == 0.0 {
            return Err(invalid("light direction must be non-zero"));
        }
        if let Some(s) = &self.split {
            let n = self.cameras.len();
            if s.source.iter().chain(&s.train).chain(&s.test).any(|&i| i >= n) {
                return Err(invalid("split refers to a camera that does not exist"));
            }
            if s.source.is_empty() {
                return Err(invalid("split needs at least one source view"));
            }
        }
        Ok(())
    }

    pub fn split(&self) -> Split {
        if let Some(s) = &self.split {
            return s.clone();
        }
        let n = self.cameras.len();
        if n == 1 {
            return Split {
                source: vec![0],
                train: vec![],
                test: vec![0],
            };
        }
        let src_end = (1 + 3).min(n);
        Split {
            test: vec![0],
            source: (1..src_end).collect(),
            train: (src_end..n).collect(),
        }
    }
}

/// Closest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    /// Unit normal facing the incoming ray.
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

fn face_ray(n: Vector3<f64>, d: &Vector3<f64>) -> Vector3<f64> {
    if n.dot(d) > 0.0 {
        -n
    } else {
        n
    }
}

impl Primitive {
    pub fn texture(&self) -> &Texture {
        match self {
            Primitive::Sphere { texture, .. } | Primitive::Plane { texture, .. } | Primitive::Box { texture, .. } => texture,
        }
    }

    /// Smallest `t > eps` with its unit outward normal.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let c = Vector3::from(*center);
                let oc = o - c;
                let a = d.dot(d);
                let b = oc.dot(d);
                let cc = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > HIT_EPS)?;
                Some((t, (o + d * t - c) / *radius))
            }
            Primitive::Plane { point, normal, .. } => {
                let n = Vector3::from(*normal).normalize();
                let denom = n.dot(d);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (Vector3::from(*point) - o).dot(&n) / denom;
                (t > HIT_EPS).then_some((t, n))
            }
            Primitive::Box { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut n0, mut n1) = (Vector3::zeros(), Vector3::zeros());
                for i in 0..3 {
                    if d[i].abs() < 1e-15 {
                        if o[i] < min[i] || o[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((min[i] - o[i]) / d[i], (max[i] - o[i]) / d[i]);
                    let mut na = Vector3::zeros();
                    na[i] = -1.0;
                    let mut nb = Vector3::zeros();
                    nb[i] = 1.0;
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                        std::mem::swap(&mut na, &mut nb);
                    }
                    if a > t0 {
                        t0 = a;
                        n0 = na;
                    }
                    if b < t1 {
                        t1 = b;
                        n1 = nb;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                if t0 > HIT_EPS {
                    Some((t0, n0))
                } else if t1 > HIT_EPS {
                    Some((t1, n1))
                } else {
                    None
                }
            }
        }
    }
}

fn lerp(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn lattice_hash(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ 0x2545_f491_4f6c_dd1d;
    for v in [x, y, z] {
        h = (h ^ v as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let fr = p - f;
    let s = fr.map(|t| t * t * (3.0 - 2.0 * t));
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = [dx, dy, dz]
            .iter()
            .enumerate()
            .map(|(i, &b)| if b == 1 { s[i] } else { 1.0 - s[i] })
            .product::<f64>();
        acc += w * lattice_hash(seed, f.x as i64 + dx as i64, f.y as i64 + dy as i64, f.z as i64 + dz as i64);
    }
    acc
}

impl Texture {
    pub fn albedo(&self, p: &Vector3<f64>, seed: u64) -> [f64; 3] {
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { scale, colors } => {
                let k = (p / *scale).map(f64::floor);
                let parity = (k.x + k.y + k.z).rem_euclid(2.0);
                colors[(parity >= 1.0) as usize]
            }
            Texture::Gradient { axis, range, colors } => {
                let a = Vector3::from(*axis);
                let t = ((p.dot(&a) - range[0]) / (range[1] - range[0])).clamp(0.0, 1.0);
                lerp(&colors[0], &colors[1], t)
            }
            Texture::Noise { scale, colors } => lerp(&colors[0], &colors[1], value_noise(&(p / *scale), seed)),
        }
    }
}

/// A scene spec with its cameras built.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub cameras: Vec<Camera>,
}

/// Traced result for one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shade {
    pub color: [f64; 3],
    pub hit: Option<Hit>,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let cameras = spec.cameras.iter().map(CameraSpec::build).collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, cameras })
    }

    pub fn closest_hit(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.spec.primitives.iter().enumerate() {
            if let Some((t, n)) = p.intersect(&ray.origin, &ray.direction) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: ray.at(t),
                        normal: face_ray(n, &ray.direction),
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    pub fn shade(&self, ray: &Ray) -> Shade {
        let Some(hit) = self.closest_hit(ray) else {
            return Shade {
                color: self.spec.background,
                hit: None,
            };
        };
        let l = &self.spec.light;
        let to_light = -Vector3::from(l.direction).normalize();
        let lambert = hit.normal.dot(&to_light).max(0.0);
        let albedo = self.spec.primitives[hit.primitive].texture().albedo(&hit.point, self.spec.seed);
        let k = l.ambient + l.intensity * lambert;
        Shade {
            color: albedo.map(|a| (a * k).clamp(0.0, 1.0)),
            hit: Some(hit),
        }
    }

    /// Colour image, depth along the unit ray (0 where nothing is hit) and
    /// the hit mask for one camera.
    pub fn render(&self, camera: &Camera) -> Result<GroundTruth> {
        let (h, w) = (camera.height(), camera.width());
        let ss = self.spec.supersample;
        let rows: Vec<Result<(Vec<f64>, Vec<f64>, Vec<bool>)>> = (0..h)
            .into_par_iter()
            .map(|r| {
                let mut color = Vec::with_capacity(w * 3);
                let mut depth = Vec::with_capacity(w);
                let mut hit = Vec::with_capacity(w);
                for c in 0..w {
                    let centre = generate_rays(camera, &[(r as f64 + 0.5, c as f64 + 0.5)])?.rays[0];
                    let s = self.shade(&centre);
                    depth.push(s.hit.map_or(0.0, |h| h.t));
                    hit.push(s.hit.is_some());
                    if ss == 1 {
                        color.extend(s.color);
                        continue;
                    }
                    let mut acc = [0.0; 3];
                    let pix: Vec<(f64, f64)> = (0..ss * ss)
                        .map(|k| {
                            let (i, j) = (k / ss, k % ss);
                            (r as f64 + (i as f64 + 0.5) / ss as f64, c as f64 + (j as f64 + 0.5) / ss as f64)
                        })
                        .collect();
                    for ray in generate_rays(camera, &pix)?.rays {
                        let s = self.shade(&ray);
                        for k in 0..3 {
                            acc[k] += s.color[k];
                        }
                    }
                    color.extend(acc.map(|a| a / (ss * ss) as f64));
                }
                Ok((color, depth, hit))
            })
            .collect();
        let mut color = Vec::with_capacity(h * w * 3);
        let mut depth = Vec::with_capacity(h * w);
        let mut hit = Vec::with_capacity(h * w);
        for row in rows {
            let (c, d, m) = row?;
            color.extend(c);
            depth.extend(d);
            hit.extend(m);
        }
        Ok(GroundTruth {
            color: Image::new(h, w, 3, color)?,
            depth: Image::new(h, w, 1, depth)?,
            hit,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub color: Image,
    pub depth: Image,
    pub hit: Vec<bool>,
}

/// A scene with ground truth rendered for every camera.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub split: Split,
    pub views: Vec<GroundTruth>,
}

impl SyntheticScene {
    pub fn cameras(&self) -> &[Camera] {
        &self.scene.cameras
    }

    pub fn images(&self, indices: &[usize]) -> Vec<Image> {
        indices.iter().map(|&i| self.views[i].color.clone()).collect()
    }

    pub fn source_set(&self) -> Result<crate::pipeline::SourceSet> {
        let cams = self.split.source.iter().map(|&i| self.scene.cameras[i].clone()).collect();
        crate::pipeline::SourceSet::new(cams, &self.images(&self.split.source))
    }

    /// Writes colour PNGs, float dumps, depth dumps and `cameras.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, v) in self.views.iter().enumerate() {
            v.color.write_png(&dir.join(format!("view_{i:03}.png")))?;
            v.color.write_raw(&dir.join(format!("view_{i:03}.raw")))?;
            v.depth.write_raw(&dir.join(format!("depth_{i:03}.raw")))?;
        }
        let cams = serde_json::to_string_pretty(&self.scene.cameras).map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(dir.join("cameras.json"), cams)?;
        std::fs::write(dir.join("scene.json"), self.scene.spec.to_json())?;
        Ok(())
    }
}

/// Traces ground truth for every camera; fails if any camera sees nothing.
pub fn make_scene(spec: SceneSpec) -> Result<SyntheticScene> {
    let split = spec.split();
    let scene = Scene::new(spec)?;
    let mut views = Vec::with_capacity(scene.cameras.len());
    for (i, cam) in scene.cameras.iter().enumerate() {
        let gt = scene.render(cam)?;
        if !gt.hit.iter().any(|&h| h) {
            return Err(invalid(format!("camera {i} sees no primitive")));
        }
        views.push(gt);
    }
    Ok(SyntheticScene { scene, split, views })
}

/// The bundled plane + sphere scene.
pub const BUNDLED_SCENE: &str = include_str!("../../scenes/plane_sphere.json");

pub fn bundled_scene() -> Result<SyntheticScene> {
    make_scene(SceneSpec::parse(BUNDLED_SCENE)?)
}
