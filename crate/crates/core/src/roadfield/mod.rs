//! Road surface as a 2D signed-distance field: elevation, slope factor and
//! color live on dense multi-resolution grids over the ground plane, and rays
//! are rendered with sigmoid-CDF opacities between consecutive samples.

pub mod grid;
mod persist;
mod render;
mod sampling;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::splat::sigmoid;

pub use grid::{level_resolutions, Extent2, Grid2D};
pub use persist::{manifest_path, read_road_field, write_road_field};
pub use render::{RoadGrad, RoadLayer, RoadRenderer, RoadSettings, RoadUpstream};
pub use sampling::{neus_alpha, sample_ray, RaySamples};

#[derive(Debug, Error)]
pub enum RoadError {
    #[error("backward called without a recorded forward pass")]
    NoForwardState,
    #[error("backward input mismatch: {0}")]
    Mismatch(String),
    #[error("road field file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadConfig {
    pub levels: usize,
    /// Cells along the long side of the coarsest level.
    pub base_cells: usize,
    /// Cells along the long side of the finest elevation and slope level.
    pub finest_cells: usize,
    /// Cells along the long side of the finest color level.
    pub color_finest_cells: usize,
    pub color_channels: usize,
    /// Vertical padding of the sampling slab around the elevation bounds (m).
    pub margin: f64,
    pub init_s: f64,
    /// Initial slope factor, slightly below 1.
    pub init_slope: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_cells: 16,
            finest_cells: 128,
            color_finest_cells: 512,
            color_channels: 3,
            margin: 0.5,
            init_s: 10.0,
            init_slope: 0.99,
        }
    }
}

/// `d(p) = slope(x, y) · (z − H(x, y))` with a view-dependent color field.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadField {
    pub elevation: Grid2D,
    /// Raw slope output; the factor itself is `sigmoid(raw)`.
    pub slope: Grid2D,
    /// Head input is the per-level features followed by the 9 degree-2
    /// spherical-harmonic values of the viewing direction.
    pub color: Grid2D,
    pub log_s: f64,
    pub margin: f64,
}

pub const SH2_LEN: usize = 9;

/// Real spherical harmonics up to degree 2 of a unit direction.
pub fn sh2_basis(d: &Vec3) -> [f64; SH2_LEN] {
    let (x, y, z) = (d.x, d.y, d.z);
    [
        0.282_094_791_773_878_1,
        0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * x * y,
        1.092_548_430_592_079_2 * y * z,
        0.315_391_565_252_520_05 * (3.0 * z * z - 1.0),
        1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (x * x - y * y),
    ]
}

impl RoadField {
    /// Flat field at height 0 with a mid-gray color.
    pub fn new(extent: Extent2, cfg: &RoadConfig) -> Self {
        let res = level_resolutions(&extent, cfg.levels.max(1), cfg.base_cells, cfg.finest_cells);
        let mut elevation = Grid2D::new(extent, &res, 1, 0, 1);
        elevation.head_weight.fill(1.0);
        let mut slope = Grid2D::new(extent, &res, 1, 0, 1);
        slope.head_weight.fill(1.0);
        slope.head_bias[0] = crate::splat::logit(cfg.init_slope);
        let ch = cfg.color_channels.max(1);
        let color_res = level_resolutions(&extent, cfg.levels.max(1), cfg.base_cells, cfg.color_finest_cells);
        let mut color = Grid2D::new(extent, &color_res, ch, SH2_LEN, 3);
        let n = color.in_dim();
        for o in 0..3 {
            for l in 0..color_res.len() {
                color.head_weight[o * n + l * ch + o % ch] = 1.0;
            }
        }
        Self {
            elevation,
            slope,
            color,
            log_s: cfg.init_s.ln(),
            margin: cfg.margin,
        }
    }

    pub fn extent(&self) -> Extent2 {
        self.elevation.extent
    }

    pub fn s(&self) -> f64 {
        self.log_s.exp()
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.elevation.eval_scalar(x, y)
    }

    pub fn slope_factor(&self, x: f64, y: f64) -> f64 {
        sigmoid(self.slope.eval_scalar(x, y))
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let (raw, h) = self.raw_slope_and_height(p.x, p.y);
        sigmoid(raw) * (p.z - h)
    }

    /// Raw slope output and elevation at one ground position.
    #[inline]
    pub fn raw_slope_and_height(&self, x: f64, y: f64) -> (f64, f64) {
        if self.slope.channels == 1 && self.slope.same_layout(&self.elevation) {
            Grid2D::eval_scalar_pair(&self.slope, &self.elevation, x, y)
        } else {
            (self.slope.eval_scalar(x, y), self.elevation.eval_scalar(x, y))
        }
    }

    /// Surface color at `p` seen along unit direction `view`.
    pub fn color_at(&self, p: &Vec3, view: &Vec3) -> [f64; 3] {
        let o = self.color.eval(p.x, p.y, &sh2_basis(view));
        [sigmoid(o[0]), sigmoid(o[1]), sigmoid(o[2])]
    }

    /// Conservative `(min, max)` of the elevation over the extent.
    pub fn height_bounds(&self) -> (f64, f64) {
        self.elevation.scalar_bounds()
    }

    /// Sets the elevation to the plane `z = a + b·x + c·y` (coarsest level
    /// carries the plane, finer levels are zeroed).
    pub fn set_plane(&mut self, plane: [f64; 3]) {
        let g = &mut self.elevation;
        g.head_bias[0] = 0.0;
        g.head_weight.fill(1.0);
        for li in 0..g.levels.len() {
            let (nx, ny) = (g.levels[li].nx, g.levels[li].ny);
            for j in 0..=ny {
                for i in 0..=nx {
                    let v = if li == 0 {
                        let (x, y) = g.vertex_position(li, i, j);
                        plane[0] + plane[1] * x + plane[2] * y
                    } else {
                        0.0
                    };
                    g.levels[li].data[j * (nx + 1) + i] = v;
                }
            }
        }
    }

    /// Fits the elevation to surface samples: the least-squares plane, then
    /// per-level corrections by kernel regression of the residual, coarse to
    /// fine. Vertices with less than `min_weight` bilinear support keep a
    /// zero correction.
    pub fn fit_elevation(&mut self, points: &[Vec3], min_weight: f64) {
        let Some(plane) = fit_ground_plane(points, 1.0) else {
            return;
        };
        self.set_plane(plane);
        let g = &mut self.elevation;
        let mut resid: Vec<f64> = points.iter().map(|p| p.z - (plane[0] + plane[1] * p.x + plane[2] * p.y)).collect();
        for li in 0..g.levels.len() {
            let nv = g.levels[li].vertex_count();
            let (mut num, mut den) = (vec![0.0; nv], vec![0.0; nv]);
            for (p, r) in points.iter().zip(&resid) {
                let k = g.corners(li, p.x, p.y);
                for q in 0..4 {
                    num[k.vertex[q]] += k.weight[q] * r;
                    den[k.vertex[q]] += k.weight[q];
                }
            }
            let level = &mut g.levels[li];
            for v in 0..nv {
                if den[v] >= min_weight {
                    level.data[v] += num[v] / den[v];
                }
            }
            for (p, r) in points.iter().zip(resid.iter_mut()) {
                let k = g.corners(li, p.x, p.y);
                let mut delta = 0.0;
                for q in 0..4 {
                    let v = k.vertex[q];
                    if den[v] >= min_weight {
                        delta += k.weight[q] * num[v] / den[v];
                    }
                }
                *r -= delta;
            }
        }
    }

    /// Sets every color output to `rgb` regardless of position or view.
    pub fn set_uniform_color(&mut self, rgb: [f64; 3]) {
        for l in self.color.levels.iter_mut() {
            l.data.fill(0.0);
        }
        for (o, b) in self.color.head_bias.iter_mut().enumerate() {
            *b = crate::splat::logit(rgb[o].clamp(1e-4, 1.0 - 1e-4));
        }
        let n = self.color.in_dim();
        let sh0 = self.color.levels.len() * self.color.channels;
        for o in 0..3 {
            for k in 0..SH2_LEN {
                self.color.head_weight[o * n + sh0 + k] = 0.0;
            }
        }
    }

    pub fn zero_grad(&self) -> RoadGrad {
        RoadGrad {
            elevation: self.elevation.zeros_like(),
            slope: self.slope.zeros_like(),
            color: self.color.zeros_like(),
            log_s: 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.elevation.param_count() + self.slope.param_count() + self.color.param_count() + 1
    }
}

/// Least-squares plane `z = a + b·x + c·y` through the lowest `fraction` of
/// the points by height.
pub fn fit_ground_plane(points: &[Vec3], fraction: f64) -> Option<[f64; 3]> {
    let mut zs: Vec<&Vec3> = points.iter().filter(|p| p.iter().all(|v| v.is_finite())).collect();
    if zs.len() < 3 {
        return None;
    }
    zs.sort_by(|a, b| a.z.total_cmp(&b.z));
    let n = ((zs.len() as f64 * fraction).ceil() as usize).clamp(3, zs.len());
    let low = &zs[..n];
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = Vec3::zeros();
    for p in low {
        let r = Vec3::new(1.0, p.x, p.y);
        ata += r * r.transpose();
        atb += r * p.z;
    }
    match ata.try_inverse() {
        Some(inv) => {
            let s = inv * atb;
            Some([s[0], s[1], s[2]])
        }
        None => {
            let mean = low.iter().map(|p| p.z).sum::<f64>() / n as f64;
            Some([mean, 0.0, 0.0])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field() -> RoadField {
        RoadField::new(Extent2::new(-10.0, 10.0, -5.0, 5.0), &RoadConfig::default())
    }

    #[test]
    fn flat_field_distance_is_height_above_ground() {
        let mut f = field();
        f.slope.head_bias[0] = 40.0;
        let d = f.signed_distance(&Vec3::new(3.0, -2.0, 1.5));
        assert!((d - 1.5).abs() < 1e-12);
    }

    #[test]
    fn tilted_distance_matches_direct_evaluation() {
        let mut f = field();
        f.set_plane([0.5, 0.0, 0.0]);
        f.slope.head_bias[0] = crate::splat::logit(0.8);
        let d = f.signed_distance(&Vec3::new(0.0, 0.0, 1.0));
        assert!((d - 0.4).abs() < 1e-12);
    }

    #[test]
    fn plane_init_reproduces_plane() {
        let mut f = field();
        f.set_plane([0.2, 0.01, -0.03]);
        for &(x, y) in &[(0.0, 0.0), (-7.3, 2.2), (9.9, -4.9)] {
            assert!((f.height(x, y) - (0.2 + 0.01 * x - 0.03 * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_color_ignores_view() {
        let mut f = field();
        f.set_uniform_color([0.3, 0.5, 0.7]);
        let c = f.color_at(&Vec3::new(1.0, 1.0, 0.0), &Vec3::new(0.0, 0.6, -0.8));
        for (a, b) in c.iter().zip([0.3, 0.5, 0.7]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sh2_basis_is_orthonormal_under_quadrature() {
        // Fibonacci-sphere quadrature of ∫ Y_a Y_b dΩ.
        let n = 20000;
        let mut g = [[0.0; SH2_LEN]; SH2_LEN];
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for k in 0..n {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * k as f64;
            let y = sh2_basis(&Vec3::new(r * phi.cos(), r * phi.sin(), z));
            for a in 0..SH2_LEN {
                for b in 0..SH2_LEN {
                    g[a][b] += y[a] * y[b] * 4.0 * std::f64::consts::PI / n as f64;
                }
            }
        }
        for a in 0..SH2_LEN {
            for b in 0..SH2_LEN {
                let e = if a == b { 1.0 } else { 0.0 };
                assert!((g[a][b] - e).abs() < 1e-3, "{a},{b}: {}", g[a][b]);
            }
        }
    }

    #[test]
    fn ground_plane_uses_lowest_points() {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                let (x, y) = (i as f64, j as f64 - 10.0);
                pts.push(Vec3::new(x, y, 0.1 + 0.02 * x));
                if (i + j) % 3 == 0 {
                    pts.push(Vec3::new(x, y, 5.0));
                }
            }
        }
        let p = fit_ground_plane(&pts, 0.2).unwrap();
        assert!((p[0] - 0.1).abs() < 1e-9 && (p[1] - 0.02).abs() < 1e-9 && p[2].abs() < 1e-9);
    }

    #[test]
    fn elevation_fit_follows_a_crown() {
        let mut f = field();
        let crown = |y: f64| 0.25 * (1.0 - (y / 4.0).powi(2)).max(0.0);
        let mut pts = Vec::new();
        for i in 0..=200 {
            for j in 0..=100 {
                let (x, y) = (-10.0 + 0.1 * i as f64, -5.0 + 0.1 * j as f64);
                pts.push(Vec3::new(x, y, crown(y)));
            }
        }
        f.fit_elevation(&pts, 1.0);
        let mut se = 0.0;
        for i in 0..100 {
            let x = -9.0 + 0.18 * i as f64;
            se += (f.height(x, 2.0) - crown(2.0)).powi(2);
        }
        assert!((se / 100.0).sqrt() < 0.01);
    }
}
