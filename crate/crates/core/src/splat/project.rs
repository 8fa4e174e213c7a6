use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::{covariance, quat_matrix_backward, raster::RasterSettings, Gaussian3D, GaussianGrad};
use crate::geometry::{Camera, Pose, Vec3};
use crate::splat::layout;

/// Squared Mahalanobis radius of the 99% ellipse of a 2D Gaussian.
const CHI2_99: f64 = 9.210340371976184;

/// Screen-space footprint of a Gaussian.
#[derive(Clone, Debug)]
pub struct Projected2D {
    pub mean2d: [f64; 2],
    /// `(xx, xy, yy)` of `J W Σ Wᵀ Jᵀ`, before the low-pass term.
    pub cov2d: [f64; 3],
    /// Camera-frame z.
    pub depth: f64,
    /// Inverse of the regularized covariance, `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    /// Position of the source Gaussian in the input list.
    pub index: usize,
    pub(crate) p_cam: Vec3,
    /// Half extents of the axis-aligned box outside of which the splat
    /// cannot pass the alpha threshold; infinite when there is no threshold.
    pub(crate) reach: [f64; 2],
}

/// Gradient w.r.t. a [`Projected2D`]. `conic[1]` is the gradient of one
/// off-diagonal entry of the full symmetric 2×2 matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Grad2D {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Grad2D {
    pub(crate) fn add(&mut self, o: &Grad2D) {
        for i in 0..2 {
            self.mean2d[i] += o.mean2d[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

/// World-to-camera rotation and camera center, precomputed once per view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ViewTransform {
    pub w: Matrix3<f64>,
    pub center: Vec3,
}

impl ViewTransform {
    pub fn new(pose: &Pose) -> Self {
        Self {
            w: pose.rotation_matrix().transpose(),
            center: pose.translation,
        }
    }
}

fn jacobian(camera: &Camera, p: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * p.x * iz2,
        0.0,
        camera.fy * iz,
        -camera.fy * p.y * iz2,
    )
}

/// Projects a Gaussian; `None` when culled.
pub fn project(g: &Gaussian3D, camera: &Camera, pose: &Pose, settings: &RasterSettings) -> Option<Projected2D> {
    project_with(g, 0, camera, &ViewTransform::new(pose), settings)
}

pub(crate) fn project_with(
    g: &Gaussian3D,
    index: usize,
    camera: &Camera,
    view: &ViewTransform,
    settings: &RasterSettings,
) -> Option<Projected2D> {
    let p = view.w * (g.mu - view.center);
    if !(p.z > camera.near) {
        return None;
    }
    if settings.cull_offscreen {
        let (w, h) = (camera.width as f64, camera.height as f64);
        let lim_x = settings.frustum_guard * camera.cx.max(w - camera.cx) / camera.fx;
        let lim_y = settings.frustum_guard * camera.cy.max(h - camera.cy) / camera.fy;
        if (p.x / p.z).abs() > lim_x || (p.y / p.z).abs() > lim_y {
            return None;
        }
    }
    let mean2d = [
        camera.fx * p.x / p.z + camera.cx,
        camera.fy * p.y / p.z + camera.cy,
    ];
    let j = jacobian(camera, &p);
    let sigma_c = view.w * covariance(g) * view.w.transpose();
    let cov = j * sigma_c * j.transpose();
    let m = cov + Matrix2::identity() * settings.cov_blur;
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [m[(1, 1)] / det, -m[(0, 1)] / det, m[(0, 0)] / det];

    if settings.cull_offscreen {
        let hx = (CHI2_99 * m[(0, 0)]).sqrt();
        let hy = (CHI2_99 * m[(1, 1)]).sqrt();
        let (w, h) = (camera.width as f64, camera.height as f64);
        if mean2d[0] + hx < 0.0 || mean2d[0] - hx > w || mean2d[1] + hy < 0.0 || mean2d[1] - hy > h {
            return None;
        }
    }

    let opacity = g.opacity();
    let reach = if settings.alpha_min > 0.0 {
        if opacity < settings.alpha_min {
            return None;
        }
        let k = 2.0 * (opacity / settings.alpha_min).ln();
        [(k * m[(0, 0)]).sqrt(), (k * m[(1, 1)]).sqrt()]
    } else {
        [f64::INFINITY; 2]
    };

    let v = g.mu - view.center;
    let dir = v / v.norm();
    Some(Projected2D {
        mean2d,
        cov2d: [cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]],
        depth: p.z,
        conic,
        opacity,
        color: g.view_color(&dir),
        index,
        p_cam: p,
        reach,
    })
}

/// Chains a screen-space gradient back to the 3D parameters of `g`.
pub fn project_backward(
    g: &Gaussian3D,
    proj: &Projected2D,
    camera: &Camera,
    pose: &Pose,
    grad: &Grad2D,
) -> GaussianGrad {
    project_backward_with(g, proj, camera, &ViewTransform::new(pose), grad)
}

pub(crate) fn project_backward_with(
    g: &Gaussian3D,
    proj: &Projected2D,
    camera: &Camera,
    view: &ViewTransform,
    grad: &Grad2D,
) -> GaussianGrad {
    let mut out = [0.0; super::PARAM_COUNT];
    let p = proj.p_cam;
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;

    // conic -> regularized covariance: dM = -Q dQ Q
    let q = Matrix2::new(proj.conic[0], proj.conic[1], proj.conic[1], proj.conic[2]);
    let gq = Matrix2::new(grad.conic[0], grad.conic[1], grad.conic[1], grad.conic[2]);
    let gm = -(q * gq * q);

    let j = jacobian(camera, &p);
    let (rot, qnorm) = g.unit_rotation();
    let r = super::quat_to_matrix(rot);
    let s = g.scale();
    let a = r * Matrix3::from_diagonal(&s);
    let sigma = a * a.transpose();
    let sigma_c = view.w * sigma * view.w.transpose();

    let g_sigma_c = j.transpose() * gm * j;
    let g_j = 2.0 * gm * j * sigma_c;
    let g_sigma = view.w.transpose() * g_sigma_c * view.w;
    let g_a = 2.0 * g_sigma * a;

    let mut g_r = Matrix3::zeros();
    for i in 0..3 {
        for k in 0..3 {
            g_r[(i, k)] = g_a[(i, k)] * s[k];
        }
    }
    for k in 0..3 {
        let gs: f64 = (0..3).map(|i| g_a[(i, k)] * r[(i, k)]).sum();
        out[layout::LOG_SCALE + k] = gs * s[k];
    }
    let g_unit = quat_matrix_backward(rot, &g_r);
    let dot: f64 = (0..4).map(|i| g_unit[i] * rot[i]).sum();
    for i in 0..4 {
        out[layout::ROTATION + i] = (g_unit[i] - rot[i] * dot) / qnorm;
    }

    // camera-frame position: through J and through the projected mean
    let mut gp = Vector3::new(
        g_j[(0, 2)] * (-fx * iz2),
        g_j[(1, 2)] * (-fy * iz2),
        g_j[(0, 0)] * (-fx * iz2)
            + g_j[(0, 2)] * (2.0 * fx * p.x * iz3)
            + g_j[(1, 1)] * (-fy * iz2)
            + g_j[(1, 2)] * (2.0 * fy * p.y * iz3),
    );
    gp.x += grad.mean2d[0] * fx * iz;
    gp.y += grad.mean2d[1] * fy * iz;
    gp.z -= grad.mean2d[0] * fx * p.x * iz2 + grad.mean2d[1] * fy * p.y * iz2;
    let mut g_mu = view.w.transpose() * gp;

    // view-dependent color
    let v = g.mu - view.center;
    let dist = v.norm();
    let dir = v / dist;
    let mut g_dir = Vec3::zeros();
    for ch in 0..3 {
        out[layout::COLOR + ch] = grad.color[ch];
    }
    for ax in 0..3 {
        for ch in 0..3 {
            out[layout::SH1 + 3 * ax + ch] = grad.color[ch] * dir[ax];
            g_dir[ax] += grad.color[ch] * g.sh1[ax][ch];
        }
    }
    g_mu += (g_dir - dir * dir.dot(&g_dir)) / dist;

    for k in 0..3 {
        out[layout::MU + k] = g_mu[k];
    }
    out[layout::OPACITY] = grad.opacity * proj.opacity * (1.0 - proj.opacity);
    out
}
