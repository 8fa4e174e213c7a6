//! Differentiable 3D Gaussian primitives: covariance factorization,
//! perspective projection to 2D, tiled front-to-back blending, and the
//! matching reverse-mode pass.

mod ply;
mod project;
mod raster;

use nalgebra::Matrix3;

use crate::geometry::Vec3;

pub use ply::{read_gaussians_ply, write_gaussians_ply};
pub use project::{project, project_backward, Grad2D, Projected2D};
pub use raster::{rasterize, RasterSettings, SplatError, SplatLayer, SplatRenderer, SplatUpstream};

/// Number of scalar parameters per Gaussian.
pub const PARAM_COUNT: usize = 23;

/// Offsets into the flat parameter layout of a [`Gaussian3D`].
pub mod layout {
    pub const MU: usize = 0;
    pub const LOG_SCALE: usize = 3;
    pub const ROTATION: usize = 6;
    pub const OPACITY: usize = 10;
    pub const COLOR: usize = 11;
    pub const SH1: usize = 14;
}

/// Gradient of a scalar with respect to every parameter of one Gaussian,
/// in [`layout`] order.
pub type GaussianGrad = [f64; PARAM_COUNT];

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vec3,
    pub log_scale: Vec3,
    /// Scalar-first quaternion; normalized whenever it is used.
    pub rotation: [f64; 4],
    pub logit_opacity: f64,
    pub color: [f64; 3],
    /// Degree-1 directional color: `sh1[axis][channel]` multiplies the
    /// `axis` component of the unit viewing direction.
    pub sh1: [[f64; 3]; 3],
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Gaussian3D {
    pub fn isotropic(mu: Vec3, scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            mu,
            log_scale: Vec3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            logit_opacity: logit(opacity),
            color,
            sh1: [[0.0; 3]; 3],
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn to_params(&self) -> [f64; PARAM_COUNT] {
        let mut p = [0.0; PARAM_COUNT];
        p[layout::MU..layout::MU + 3].copy_from_slice(self.mu.as_slice());
        p[layout::LOG_SCALE..layout::LOG_SCALE + 3].copy_from_slice(self.log_scale.as_slice());
        p[layout::ROTATION..layout::ROTATION + 4].copy_from_slice(&self.rotation);
        p[layout::OPACITY] = self.logit_opacity;
        p[layout::COLOR..layout::COLOR + 3].copy_from_slice(&self.color);
        for a in 0..3 {
            p[layout::SH1 + 3 * a..layout::SH1 + 3 * a + 3].copy_from_slice(&self.sh1[a]);
        }
        p
    }

    pub fn from_params(p: &[f64; PARAM_COUNT]) -> Self {
        let v = |o: usize| Vec3::new(p[o], p[o + 1], p[o + 2]);
        let mut sh1 = [[0.0; 3]; 3];
        for (a, row) in sh1.iter_mut().enumerate() {
            row.copy_from_slice(&p[layout::SH1 + 3 * a..layout::SH1 + 3 * a + 3]);
        }
        Self {
            mu: v(layout::MU),
            log_scale: v(layout::LOG_SCALE),
            rotation: [p[6], p[7], p[8], p[9]],
            logit_opacity: p[layout::OPACITY],
            color: [p[11], p[12], p[13]],
            sh1,
        }
    }

    /// Unit quaternion and the norm of the stored one.
    pub(crate) fn unit_rotation(&self) -> ([f64; 4], f64) {
        let q = self.rotation;
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.unit_rotation().0)
    }

    /// Color seen along unit direction `dir` (camera center to mean).
    pub fn view_color(&self, dir: &Vec3) -> [f64; 3] {
        let mut c = self.color;
        for a in 0..3 {
            for (ch, cv) in c.iter_mut().enumerate() {
                *cv += self.sh1[a][ch] * dir[a];
            }
        }
        c
    }

    /// Re-normalizes the stored quaternion (after an optimizer step).
    pub fn normalize_rotation(&mut self) {
        let (q, _) = self.unit_rotation();
        self.rotation = q;
    }
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn covariance(g: &Gaussian3D) -> Matrix3<f64> {
    let m = g.rotation_matrix() * Matrix3::from_diagonal(&g.scale());
    m * m.transpose()
}

pub(crate) fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the rotation matrix back to the unit quaternion.
pub(crate) fn quat_matrix_backward(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// Drops Gaussians whose opacity fell below `min_opacity`; returns the kept mask.
pub fn prune_by_opacity(gaussians: &mut Vec<Gaussian3D>, min_opacity: f64) -> Vec<bool> {
    let keep: Vec<bool> = gaussians.iter().map(|g| g.opacity() >= min_opacity).collect();
    let mut it = keep.iter();
    gaussians.retain(|_| *it.next().unwrap());
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, UnitQuaternion};

    #[test]
    fn covariance_identity() {
        let g = Gaussian3D::isotropic(Vec3::zeros(), 1.0, 0.5, [0.0; 3]);
        assert!((covariance(&g) - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn covariance_axis_aligned() {
        let mut g = Gaussian3D::isotropic(Vec3::zeros(), 1.0, 0.5, [0.0; 3]);
        g.log_scale = Vec3::new(2f64.ln(), 0.0, 0.0);
        let c = covariance(&g);
        assert!((c - Matrix3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0))).norm() < 1e-12);
    }

    #[test]
    fn covariance_rotated_matches_dense_product() {
        let mut g = Gaussian3D::isotropic(Vec3::zeros(), 1.0, 0.5, [0.0; 3]);
        g.log_scale = Vec3::new(2f64.ln(), 0.0, 0.0);
        let h = std::f64::consts::FRAC_PI_4;
        g.rotation = [h.cos(), 0.0, 0.0, h.sin()];
        // Dense oracle: R diag(4,1,1) Rᵀ with a 90° z rotation matrix.
        let r = Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2).into_inner();
        let oracle = r * Matrix3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0)) * r.transpose();
        let c = covariance(&g);
        assert!((c - oracle).norm() < 1e-12);
        assert!((c - Matrix3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0))).norm() < 1e-12);
        assert!((c - c.transpose()).norm() < 1e-12);
    }

    #[test]
    fn quat_matrix_agrees_with_nalgebra() {
        let uq = UnitQuaternion::from_euler_angles(0.4, -1.0, 2.2);
        let q = [uq.w, uq.i, uq.j, uq.k];
        let diff = quat_to_matrix(q) - uq.to_rotation_matrix().into_inner();
        assert!(diff.norm() < 1e-12);
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let q = [0.7, -0.2, 0.4, 0.3];
        let g = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.1, -0.7, 1.2, 0.4, -0.3);
        let f = |q: [f64; 4]| quat_to_matrix(q).component_mul(&g).sum();
        let an = quat_matrix_backward(q, &g);
        for i in 0..4 {
            let h = 1e-6;
            let (mut a, mut b) = (q, q);
            a[i] += h;
            b[i] -= h;
            let fd = (f(a) - f(b)) / (2.0 * h);
            assert!((fd - an[i]).abs() < 1e-8, "{i}: {fd} vs {}", an[i]);
        }
    }

    #[test]
    fn params_round_trip_and_prune() {
        let mut g = Gaussian3D::isotropic(Vec3::new(1.0, 2.0, 3.0), 0.5, 0.3, [0.1, 0.2, 0.3]);
        g.sh1[1][2] = 0.7;
        assert_eq!(Gaussian3D::from_params(&g.to_params()), g);
        let mut v = vec![g.clone(), Gaussian3D::isotropic(Vec3::zeros(), 1.0, 0.001, [0.0; 3]), g];
        let keep = prune_by_opacity(&mut v, 0.005);
        assert_eq!(keep, vec![true, false, true]);
        assert_eq!(v.len(), 2);
    }
}
