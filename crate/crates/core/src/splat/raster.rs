use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::project::{project_backward_with, project_with, Grad2D, Projected2D, ViewTransform};
use super::{Gaussian3D, GaussianGrad, PARAM_COUNT};
use crate::geometry::{Camera, Pose};
use crate::img::{Image, Plane};

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("backward called without a recorded forward pass")]
    NoForwardState,
    #[error("backward input mismatch: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterSettings {
    /// Contributions with `α·G` below this are skipped.
    pub alpha_min: f64,
    /// Blending stops once transmittance drops below this.
    pub transmittance_min: f64,
    /// Low-pass term added to the diagonal of every 2D covariance (px²).
    pub cov_blur: f64,
    pub tile_size: usize,
    /// Cull splats whose 99% ellipse lies entirely outside the image, or
    /// whose center lies outside the frustum widened by `frustum_guard`.
    pub cull_offscreen: bool,
    pub frustum_guard: f64,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            cov_blur: 0.3,
            tile_size: 16,
            cull_offscreen: true,
            frustum_guard: 1.3,
        }
    }
}

impl RasterSettings {
    /// No thresholds or screen culling: the rendered image is a smooth
    /// function of every parameter. Used for gradient verification.
    pub fn smooth() -> Self {
        Self {
            alpha_min: 0.0,
            transmittance_min: 0.0,
            cull_offscreen: false,
            ..Self::default()
        }
    }
}

/// Output of the splat layer. `color` is premultiplied by coverage.
#[derive(Clone, Debug)]
pub struct SplatLayer {
    pub color: Image,
    pub opacity: Plane,
    /// Coverage-normalized expected depth; 0 where nothing was hit.
    pub depth: Plane,
}

/// Gradients of the loss w.r.t. the layer outputs, one entry per pixel.
pub struct SplatUpstream<'a> {
    pub color: &'a [[f64; 3]],
    pub opacity: &'a [f64],
}

struct ForwardState {
    camera: Camera,
    view: ViewTransform,
    /// Visible splats sorted by (depth, index).
    projected: Vec<Projected2D>,
    tiles: Vec<Tile>,
    n_gaussians: usize,
}

struct Tile {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Indices into `projected`, front to back.
    list: Vec<u32>,
}

/// Tiled CPU rasterizer that records what it needs for the backward pass.
#[derive(Default)]
pub struct SplatRenderer {
    pub settings: RasterSettings,
    state: Option<ForwardState>,
}

/// One-shot forward render.
pub fn rasterize(gaussians: &[Gaussian3D], camera: &Camera, pose: &Pose, settings: &RasterSettings) -> SplatLayer {
    let mut r = SplatRenderer::new(*settings);
    r.forward(gaussians, camera, pose)
}

impl SplatRenderer {
    pub fn new(settings: RasterSettings) -> Self {
        Self {
            settings,
            state: None,
        }
    }

    /// Projected splats of the last forward pass, front to back.
    pub fn projected(&self) -> &[Projected2D] {
        self.state.as_ref().map(|s| s.projected.as_slice()).unwrap_or(&[])
    }

    pub fn forward(&mut self, gaussians: &[Gaussian3D], camera: &Camera, pose: &Pose) -> SplatLayer {
        let settings = self.settings;
        let view = ViewTransform::new(pose);
        let mut projected: Vec<Projected2D> = gaussians
            .par_iter()
            .enumerate()
            .filter_map(|(i, g)| project_with(g, i, camera, &view, &settings))
            .collect();
        // Stable (depth, index) order.
        projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

        let (w, h) = (camera.width as usize, camera.height as usize);
        let ts = settings.tile_size.max(1);
        let (tx, ty) = (w.div_ceil(ts), h.div_ceil(ts));
        let mut tiles: Vec<Tile> = (0..ty)
            .flat_map(|j| {
                (0..tx).map(move |i| Tile {
                    x0: i * ts,
                    y0: j * ts,
                    x1: ((i + 1) * ts).min(w),
                    y1: ((j + 1) * ts).min(h),
                    list: Vec::new(),
                })
            })
            .collect();
        for (k, p) in projected.iter().enumerate() {
            // Pixel centers (i + 0.5) within the reach box.
            let Some((px0, px1)) = pixel_span(p.mean2d[0], p.reach[0], w) else { continue };
            let Some((py0, py1)) = pixel_span(p.mean2d[1], p.reach[1], h) else { continue };
            for j in py0 / ts..=py1 / ts {
                for i in px0 / ts..=px1 / ts {
                    tiles[j * tx + i].list.push(k as u32);
                }
            }
        }

        let results: Vec<Vec<([f64; 3], f64, f64)>> = tiles
            .par_iter()
            .map(|tile| blend_tile(tile, &projected, &settings))
            .collect();

        let mut color = Image::new(w, h);
        let mut opacity = Plane::new(w, h);
        let mut depth = Plane::new(w, h);
        for (tile, res) in tiles.iter().zip(results) {
            let mut it = res.into_iter();
            for y in tile.y0..tile.y1 {
                for x in tile.x0..tile.x1 {
                    let (c, o, d) = it.next().unwrap();
                    let idx = y * w + x;
                    color.data[idx] = c;
                    opacity.data[idx] = o;
                    depth.data[idx] = d;
                }
            }
        }

        self.state = Some(ForwardState {
            camera: *camera,
            view,
            projected,
            tiles,
            n_gaussians: gaussians.len(),
        });
        SplatLayer { color, opacity, depth }
    }

    /// Reverse pass for the last forward call. `gaussians` must be the same
    /// list that was rendered.
    pub fn backward(&self, gaussians: &[Gaussian3D], upstream: &SplatUpstream) -> Result<Vec<GaussianGrad>, SplatError> {
        let state = self.state.as_ref().ok_or(SplatError::NoForwardState)?;
        if gaussians.len() != state.n_gaussians {
            return Err(SplatError::Mismatch(format!(
                "rendered {} gaussians, got {}",
                state.n_gaussians,
                gaussians.len()
            )));
        }
        let npx = state.camera.pixel_count();
        if upstream.color.len() != npx || upstream.opacity.len() != npx {
            return Err(SplatError::Mismatch("upstream gradient size".into()));
        }
        let settings = self.settings;
        let w = state.camera.width as usize;

        let tile_grads: Vec<Vec<Grad2D>> = state
            .tiles
            .par_iter()
            .map(|tile| backward_tile(tile, &state.projected, &settings, upstream, w))
            .collect();

        // Deterministic reduction in tile order.
        let mut grads2d = vec![Grad2D::default(); state.projected.len()];
        for (tile, tg) in state.tiles.iter().zip(&tile_grads) {
            for (&k, g) in tile.list.iter().zip(tg) {
                grads2d[k as usize].add(g);
            }
        }

        let per_visible: Vec<(usize, GaussianGrad)> = state
            .projected
            .par_iter()
            .zip(grads2d.par_iter())
            .map(|(p, g)| {
                (
                    p.index,
                    project_backward_with(&gaussians[p.index], p, &state.camera, &state.view, g),
                )
            })
            .collect();
        let mut out = vec![[0.0; PARAM_COUNT]; gaussians.len()];
        for (i, g) in per_visible {
            out[i] = g;
        }
        Ok(out)
    }
}

/// Inclusive pixel index range whose centers lie within `center ± reach`.
fn pixel_span(center: f64, reach: f64, n: usize) -> Option<(usize, usize)> {
    if !reach.is_finite() {
        return Some((0, n - 1));
    }
    let lo = (center - reach - 0.5).ceil().max(0.0);
    let hi = (center + reach - 0.5).floor().min(n as f64 - 1.0);
    if lo > hi {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

#[inline]
fn splat_alpha(p: &Projected2D, x: f64, y: f64) -> (f64, f64, f64) {
    let dx = x - p.mean2d[0];
    let dy = y - p.mean2d[1];
    let power = -0.5 * (p.conic[0] * dx * dx + p.conic[2] * dy * dy) - p.conic[1] * dx * dy;
    (p.opacity * power.min(0.0).exp(), dx, dy)
}

fn blend_tile(tile: &Tile, projected: &[Projected2D], s: &RasterSettings) -> Vec<([f64; 3], f64, f64)> {
    let mut out = Vec::with_capacity((tile.x1 - tile.x0) * (tile.y1 - tile.y0));
    for y in tile.y0..tile.y1 {
        for x in tile.x0..tile.x1 {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut d = 0.0;
            for &k in &tile.list {
                let p = &projected[k as usize];
                let (alpha, _, _) = splat_alpha(p, fx, fy);
                if alpha < s.alpha_min || alpha <= 0.0 {
                    continue;
                }
                let wgt = alpha * t;
                for ch in 0..3 {
                    c[ch] += wgt * p.color[ch];
                }
                d += wgt * p.depth;
                t *= 1.0 - alpha;
                if t < s.transmittance_min {
                    break;
                }
            }
            let o = 1.0 - t;
            out.push((c, o, if o > 0.0 { d / o } else { 0.0 }));
        }
    }
    out
}

fn backward_tile(
    tile: &Tile,
    projected: &[Projected2D],
    s: &RasterSettings,
    up: &SplatUpstream,
    width: usize,
) -> Vec<Grad2D> {
    let mut grads = vec![Grad2D::default(); tile.list.len()];
    // (list position, alpha, transmittance before, dx, dy)
    let mut contrib: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
    for y in tile.y0..tile.y1 {
        for x in tile.x0..tile.x1 {
            let idx = y * width + x;
            let gc = up.color[idx];
            let go = up.opacity[idx];
            if gc == [0.0; 3] && go == 0.0 {
                continue;
            }
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            contrib.clear();
            let mut t = 1.0;
            for (pos, &k) in tile.list.iter().enumerate() {
                let p = &projected[k as usize];
                let (alpha, dx, dy) = splat_alpha(p, fx, fy);
                if alpha < s.alpha_min || alpha <= 0.0 {
                    continue;
                }
                contrib.push((pos, alpha, t, dx, dy));
                t *= 1.0 - alpha;
                if t < s.transmittance_min {
                    break;
                }
            }
            // Suffix color sum and suffix transmittance product.
            let mut suffix = [0.0; 3];
            let mut rest = 1.0;
            for &(pos, alpha, t_k, dx, dy) in contrib.iter().rev() {
                let p = &projected[tile.list[pos] as usize];
                let g = &mut grads[pos];
                let wgt = alpha * t_k;
                let mut d_alpha = go * t_k * rest;
                for ch in 0..3 {
                    g.color[ch] += wgt * gc[ch];
                    d_alpha += t_k * gc[ch] * (p.color[ch] - suffix[ch]);
                    suffix[ch] = p.color[ch] * alpha + (1.0 - alpha) * suffix[ch];
                }
                rest *= 1.0 - alpha;
                g.opacity += d_alpha * alpha / p.opacity;
                let d_power = d_alpha * alpha;
                g.mean2d[0] += d_power * (p.conic[0] * dx + p.conic[1] * dy);
                g.mean2d[1] += d_power * (p.conic[1] * dx + p.conic[2] * dy);
                g.conic[0] += -0.5 * d_power * dx * dx;
                g.conic[1] += -0.5 * d_power * dx * dy;
                g.conic[2] += -0.5 * d_power * dy * dy;
            }
        }
    }
    grads
}
