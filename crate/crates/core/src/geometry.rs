//! Pinhole cameras, ray generation and projection.
//!
//! Conventions: `world_to_camera` maps world points into a camera frame whose
//! +z axis is the viewing direction, +x points right and +y points down.
//! Pixel coordinates are `(row, col)` measured from the top-left image corner
//! in continuous units, so pixel `(i, j)` covers `[i, i+1) x [j, j+1)` and its
//! centre is `(i + 0.5, j + 0.5)`. Image bounds are closed.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct Camera {
    intrinsics: Matrix3<f64>,
    world_to_camera: Matrix4<f64>,
    height: usize,
    width: usize,
    near: f64,
    far: f64,
}

/// On-disk camera layout: row-major matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraJson {
    intrinsics: [f64; 9],
    world_to_camera: [f64; 16],
    size: [usize; 2],
    near: f64,
    far: f64,
}

impl TryFrom<CameraJson> for Camera {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        Camera::new(
            Matrix3::from_row_slice(&j.intrinsics),
            Matrix4::from_row_slice(&j.world_to_camera),
            j.size[0],
            j.size[1],
            j.near,
            j.far,
        )
    }
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        let mut intrinsics = [0.0; 9];
        let mut world_to_camera = [0.0; 16];
        for r in 0..3 {
            for col in 0..3 {
                intrinsics[r * 3 + col] = c.intrinsics[(r, col)];
            }
        }
        for r in 0..4 {
            for col in 0..4 {
                world_to_camera[r * 4 + col] = c.world_to_camera[(r, col)];
            }
        }
        CameraJson {
            intrinsics,
            world_to_camera,
            size: [c.height, c.width],
            near: c.near,
            far: c.far,
        }
    }
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        world_to_camera: Matrix4<f64>,
        height: usize,
        width: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let k = &intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::Camera("focal lengths must be positive".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::Camera("intrinsics must be upper triangular with K[2,2] = 1".into()));
        }
        let r = world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::Camera(format!("rotation is not orthonormal (|RᵀR - I| = {err:e})")));
        }
        if r.determinant() < 0.0 {
            return Err(Error::Camera("rotation has negative determinant".into()));
        }
        let bottom = world_to_camera.fixed_view::<1, 4>(3, 0);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            return Err(Error::Camera("last row of world_to_camera must be [0 0 0 1]".into()));
        }
        if !(0.0 < near && near < far && far.is_finite()) {
            return Err(Error::Camera(format!("need 0 < near < far, got near={near} far={far}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Camera("image size must be positive".into()));
        }
        Ok(Self {
            intrinsics,
            world_to_camera,
            height,
            width,
            near,
            far,
        })
    }

    /// Camera at `eye` looking at `target`; `fov_y_deg` is the vertical field
    /// of view and the principal point is the image centre.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y_deg: f64,
        height: usize,
        width: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let z = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::Camera("eye equals target".into()))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Camera("up vector parallel to viewing direction".into()))?;
        let y = z.cross(&x);
        let rot = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(rot * eye);
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        let k = Matrix3::new(f, 0.0, 0.5 * width as f64, 0.0, f, 0.5 * height as f64, 0.0, 0.0, 1.0);
        Self::new(k, w2c, height, width, near, far)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn near(&self) -> f64 {
        self.near
    }

    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Unit viewing direction (+z axis) in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation().row(2).transpose()
    }

    pub fn with_size(&self, height: usize, width: usize) -> Result<Self> {
        let sy = height as f64 / self.height as f64;
        let sx = width as f64 / self.width as f64;
        let mut k = self.intrinsics;
        k[(0, 0)] *= sx;
        k[(0, 1)] *= sx;
        k[(0, 2)] *= sx;
        k[(1, 1)] *= sy;
        k[(1, 2)] *= sy;
        Self::new(k, self.world_to_camera, height, width, self.near, self.far)
    }

    pub fn with_bounds(&self, near: f64, far: f64) -> Result<Self> {
        Self::new(self.intrinsics, self.world_to_camera, self.height, self.width, near, far)
    }

    pub fn contains_pixel(&self, row: f64, col: f64) -> bool {
        (0.0..=self.height as f64).contains(&row) && (0.0..=self.width as f64).contains(&col)
    }

    /// Flattened `[R | t]` (12 values) followed by normalised intrinsics
    /// `fx/W, fy/H, cx/W, cy/H`.
    pub fn pose_features(&self) -> [f64; 16] {
        let mut f = [0.0; 16];
        for r in 0..3 {
            for c in 0..4 {
                f[r * 4 + c] = self.world_to_camera[(r, c)];
            }
        }
        let (w, h) = (self.width as f64, self.height as f64);
        f[12] = self.intrinsics[(0, 0)] / w;
        f[13] = self.intrinsics[(1, 1)] / h;
        f[14] = self.intrinsics[(0, 2)] / w;
        f[15] = self.intrinsics[(1, 2)] / h;
        f
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// World point at camera-space depth `depth` behind pixel `(row, col)`.
    pub fn unproject(&self, row: f64, col: f64, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let y = (row - k[(1, 2)]) / k[(1, 1)];
        let x = (col - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        let pc = Vector3::new(x * depth, y * depth, depth);
        self.rotation().transpose() * (pc - self.translation())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// A batch of target rays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RayBundle {
    pub rays: Vec<Ray>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Rays through continuous pixel positions `(row, col)`. The per-ray depth
/// range is the camera's `[near, far]`, measured along the unit direction.
pub fn generate_rays(camera: &Camera, pixels: &[(f64, f64)]) -> Result<RayBundle> {
    let k_inv = camera
        .intrinsics
        .try_inverse()
        .ok_or_else(|| Error::Camera("singular intrinsics".into()))?;
    let rt = camera.rotation().transpose();
    let origin = camera.center();
    let mut rays = Vec::with_capacity(pixels.len());
    for &(row, col) in pixels {
        if !camera.contains_pixel(row, col) {
            return Err(Error::PixelOutOfBounds {
                row,
                col,
                height: camera.height,
                width: camera.width,
            });
        }
        let d_cam = k_inv * Vector3::new(col, row, 1.0);
        let direction = (rt * d_cam).normalize();
        rays.push(Ray {
            origin,
            direction,
            near: camera.near,
            far: camera.far,
        });
    }
    Ok(RayBundle { rays })
}

/// Rays through the centre of every pixel, row-major.
pub fn pixel_centers(height: usize, width: usize) -> Vec<(f64, f64)> {
    (0..height)
        .flat_map(|r| (0..width).map(move |c| (r as f64 + 0.5, c as f64 + 0.5)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `(row, col)` per point.
    pub pixels: Vec<(f64, f64)>,
    /// Camera-space z.
    pub depths: Vec<f64>,
    pub in_frustum: Vec<bool>,
}

pub fn project(camera: &Camera, points: &[Vector3<f64>]) -> Projection {
    let mut out = Projection {
        pixels: Vec::with_capacity(points.len()),
        depths: Vec::with_capacity(points.len()),
        in_frustum: Vec::with_capacity(points.len()),
    };
    for p in points {
        let (px, z, ok) = project_point(camera, p);
        out.pixels.push(px);
        out.depths.push(z);
        out.in_frustum.push(ok);
    }
    out
}

/// Projects one point: `((row, col), depth, in_frustum)`. Points at zero or
/// negative depth report a NaN-free pixel of `(0, 0)` and are not in frustum.
pub fn project_point(camera: &Camera, p: &Vector3<f64>) -> ((f64, f64), f64, bool) {
    let pc = camera.to_camera(p);
    let z = pc.z;
    if z <= 0.0 {
        return ((0.0, 0.0), z, false);
    }
    let uvw = camera.intrinsics * pc;
    let (col, row) = (uvw.x / z, uvw.y / z);
    let ok = z > camera.near && z < camera.far && camera.contains_pixel(row, col);
    ((row, col), z, ok)
}

/// Samples along one ray.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
}

impl RaySamples {
    pub fn from_depths(ray: &Ray, depths: Vec<f64>) -> Self {
        let positions = depths.iter().map(|&t| ray.at(t)).collect();
        Self { depths, positions }
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplePoints {
    pub rays: Vec<RaySamples>,
}

/// Per-ray random stream keyed by `(seed, ray index)`, independent of how
/// rays are batched or scheduled.
pub fn ray_rng(seed: u64, ray_index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ray_index);
    rng
}

/// Jitter source for stratified sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Jitter {
    /// Bin midpoints.
    Off,
    /// One uniform draw per bin from `ray_rng(seed, first_ray + i)`.
    Seeded { seed: u64, first_ray: u64 },
}

/// `count` stratified depths in `[near, far]`, one per equal-width bin.
pub fn stratified_depths(near: f64, far: f64, count: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
    let width = (far - near) / count as f64;
    match rng {
        None => (0..count).map(|i| near + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..count)
            .map(|i| near + (i as f64 + rng.gen::<f64>()) * width)
            .collect(),
    }
}

pub fn sample_uniform(rays: &RayBundle, count: usize, jitter: Jitter) -> Result<SamplePoints> {
    if count < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 samples per ray, got {count}")));
    }
    let rays = rays
        .rays
        .iter()
        .enumerate()
        .map(|(i, ray)| {
            let depths = match jitter {
                Jitter::Off => stratified_depths(ray.near, ray.far, count, None),
                Jitter::Seeded { seed, first_ray } => {
                    let mut rng = ray_rng(seed, first_ray + i as u64);
                    stratified_depths(ray.near, ray.far, count, Some(&mut rng))
                }
            };
            RaySamples::from_depths(ray, depths)
        })
        .collect();
    Ok(SamplePoints { rays })
}
