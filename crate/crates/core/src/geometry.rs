//! Rigid and similarity transforms, pinhole cameras, ray generation, and
//! translation-based similarity alignment.
//!
//! Conventions used throughout the crate:
//! - quaternions are scalar-first `(w, x, y, z)`, right-handed;
//! - a [`Pose`] maps camera coordinates to world coordinates
//!   (world-from-camera), so its translation is the camera center;
//! - camera frame is x right, y down, z forward (optical axis);
//! - the world frame is z-up; road heights are measured along world z.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("pixel ({0}, {1}) outside image bounds {2}x{3}")]
    PixelOutOfBounds(f64, f64, u32, u32),
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid quaternion: {0}")]
    InvalidQuaternion(String),
    #[error("pose file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Affine action on points, shared by [`Pose`] and [`Similarity`].
pub trait Transform {
    fn transform_point(&self, p: &Vec3) -> Vec3;
}

/// Rigid world-from-camera transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Builds a pose from a scalar-first quaternion, normalizing it.
    pub fn from_wxyz(q: [f64; 4], t: Vec3) -> Result<Self, GeometryError> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = quat.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(GeometryError::InvalidQuaternion(format!("{q:?}")));
        }
        Ok(Self::new(UnitQuaternion::from_quaternion(quat), t))
    }

    /// Scalar-first quaternion coefficients.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Camera pose at `eye` looking at `target`, with `up` as the approximate
    /// world up direction. Camera y (image down) ends up opposite to `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let m = Matrix3::from_columns(&[right, down, forward]);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(m);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), eye)
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Camera forward axis (+z of the camera frame) in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation * Vec3::z()
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// World point expressed in the camera frame.
    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Geodesic interpolation: linear in translation, spherical-linear in
    /// rotation. `frac = 0` gives `a`, `frac = 1` gives `b`.
    pub fn interpolate(a: &Pose, b: &Pose, frac: f64) -> Pose {
        let t = a.translation + (b.translation - a.translation) * frac;
        let rot = a
            .rotation
            .try_slerp(&b.rotation, frac, 1e-12)
            .unwrap_or(if frac < 0.5 { a.rotation } else { b.rotation });
        Pose::new(rot, t)
    }
}

impl Transform for Pose {
    fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// `p ↦ scale · R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Similarity {
    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        assert!(scale > 0.0, "similarity scale must be positive");
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(1.0, UnitQuaternion::identity(), Vec3::zeros())
    }

    pub fn from_scale(scale: f64) -> Self {
        Self::new(scale, UnitQuaternion::identity(), Vec3::zeros())
    }

    pub fn compose(&self, other: &Similarity) -> Self {
        Self::new(
            self.scale * other.scale,
            self.rotation * other.rotation,
            self.scale * (self.rotation * other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        let s = 1.0 / self.scale;
        Self::new(s, inv, -(inv * self.translation) * s)
    }

    /// Maps a pose into the target frame: rotation is pre-multiplied and
    /// the camera center is transformed as a point.
    pub fn transform_pose(&self, pose: &Pose) -> Pose {
        Pose::new(
            self.rotation * pose.rotation,
            self.transform_point(&pose.translation),
        )
    }
}

impl Transform for Similarity {
    fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Centered principal point with square pixels.
    pub fn centered(focal: f64, width: u32, height: u32, near: f64, far: f64) -> Result<Self, GeometryError> {
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            near,
            far,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(GeometryError::InvalidCamera("need 0 < near < far".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("resolution must be at least 1x1".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Camera-frame point to continuous pixel coordinates; `None` behind the camera.
    pub fn project(&self, p_cam: &Vec3) -> Option<[f64; 2]> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some([
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ])
    }

    /// Unnormalized camera-frame direction with unit z through a pixel coordinate.
    pub fn unproject_dir(&self, px: [f64; 2]) -> Vec3 {
        Vec3::new((px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy, 1.0)
    }

    pub fn load(path: &Path) -> Result<Self, crate::io::IoError> {
        let cam: Camera = crate::io::read_toml(path)?;
        cam.validate()
            .map_err(|e| crate::io::IoError::Format(e.to_string()))?;
        Ok(cam)
    }

    pub fn save(&self, path: &Path) -> Result<(), crate::io::IoError> {
        crate::io::write_toml(path, self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// World-space ray through a continuous pixel coordinate. Pixel `(i, j)` has
/// its center at `(i + 0.5, j + 0.5)`.
pub fn pixel_ray(camera: &Camera, pose: &Pose, px: [f64; 2]) -> Result<Ray, GeometryError> {
    let (w, h) = (camera.width as f64, camera.height as f64);
    if !(px[0] >= 0.0 && px[0] <= w && px[1] >= 0.0 && px[1] <= h) {
        return Err(GeometryError::PixelOutOfBounds(px[0], px[1], camera.width, camera.height));
    }
    Ok(pixel_ray_unchecked(camera, pose, px))
}

pub(crate) fn pixel_ray_unchecked(camera: &Camera, pose: &Pose, px: [f64; 2]) -> Ray {
    let d = pose.rotation * camera.unproject_dir(px);
    Ray::new(pose.translation, d)
}

/// Rays through every pixel center, row-major.
pub fn pixel_rays(camera: &Camera, pose: &Pose) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(camera.pixel_count());
    for j in 0..camera.height {
        for i in 0..camera.width {
            rays.push(pixel_ray_unchecked(
                camera,
                pose,
                [i as f64 + 0.5, j as f64 + 0.5],
            ));
        }
    }
    rays
}

/// Closed-form least-squares similarity fit between point sets.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PointFit {
    pub sim: Similarity,
    /// Singular values of the centered source scatter, descending.
    pub source_spread: [f64; 3],
}

pub(crate) fn fit_similarity(src: &[Vec3], dst: &[Vec3]) -> Result<PointFit, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::Alignment(format!(
            "mismatched counts {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let a = s - mu_s;
        let b = d - mu_d;
        cross += b * a.transpose();
        scatter += a * a.transpose();
        var_s += a.norm_squared();
    }
    cross /= n;
    var_s /= n;
    let mut spread = scatter.symmetric_eigenvalues().map(|v| v.max(0.0).sqrt());
    spread.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    let source_spread = [spread[0], spread[1], spread[2]];
    if var_s <= 1e-24 {
        return Err(GeometryError::Alignment("source points coincide".into()));
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = svd.singular_values;
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        let imin = (0..3).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        sign[(imin, imin)] = -1.0;
    }
    let r = u * sign * v_t;
    let trace: f64 = (0..3).map(|i| d[i] * sign[(i, i)]).sum();
    let scale = trace / var_s;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(GeometryError::Alignment(format!("non-positive scale {scale}")));
    }
    let rot = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    let t = mu_d - scale * (rot * mu_s);
    Ok(PointFit {
        sim: Similarity::new(scale, rot, t),
        source_spread,
    })
}

/// Similarity mapping `source` camera centers onto `target` camera centers in
/// the least-squares sense (translations only).
pub fn align_similarity(source: &[Pose], target: &[Pose]) -> Result<Similarity, GeometryError> {
    if source.len() < 3 || source.len() != target.len() {
        return Err(GeometryError::Alignment(format!(
            "need at least 3 matched pose pairs, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let src: Vec<Vec3> = source.iter().map(|p| p.translation).collect();
    let dst: Vec<Vec3> = target.iter().map(|p| p.translation).collect();
    let fit = fit_similarity(&src, &dst)?;
    let [s0, s1, _] = fit.source_spread;
    if s1 <= 1e-9 * s0.max(1e-300) {
        return Err(GeometryError::Alignment(
            "source translations are collinear; rotation is unobservable".into(),
        ));
    }
    Ok(fit.sim)
}

/// One line of a pose file.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRecord {
    pub id: String,
    pub pose: Pose,
}

impl fmt::Display for PoseRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.pose.translation;
        let q = self.pose.wxyz();
        write!(
            f,
            "{} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            self.id, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        )
    }
}

/// Parses `id tx ty tz qw qx qy qz` lines; blank lines and `#` comments are skipped.
pub fn parse_poses(text: &str) -> Result<Vec<PoseRecord>, GeometryError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(GeometryError::Parse {
                line: lineno + 1,
                msg: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let mut vals = [0.0; 7];
        for (v, f) in vals.iter_mut().zip(&fields[1..]) {
            *v = f.parse().map_err(|e| GeometryError::Parse {
                line: lineno + 1,
                msg: format!("{f}: {e}"),
            })?;
        }
        let pose = Pose::from_wxyz(
            [vals[3], vals[4], vals[5], vals[6]],
            Vec3::new(vals[0], vals[1], vals[2]),
        )
        .map_err(|e| GeometryError::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(PoseRecord {
            id: fields[0].to_string(),
            pose,
        });
    }
    Ok(out)
}

pub fn read_pose_file(path: &Path) -> Result<Vec<PoseRecord>, GeometryError> {
    parse_poses(&std::fs::read_to_string(path)?)
}

pub fn write_pose_file(path: &Path, poses: &[PoseRecord]) -> Result<(), GeometryError> {
    let mut s = String::new();
    for p in poses {
        s.push_str(&p.to_string());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}
