//! Analytic ray tracer for [`SynthScene`](super::SynthScene).

use nalgebra::{Rotation3, Vector3};

use super::{HeightProfile, Obstacle, ObstacleShape, RoadSpec, SkySpec, SynthScene};
use crate::geometry::{pixel_ray, pixel_rays, Camera, Pose, Ray, Vec3};
use crate::img::{Image, Plane};
use crate::roadfield::Extent2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HitKind {
    Sky,
    Road,
    Obstacle(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub kind: HitKind,
    /// Distance along the unit ray direction.
    pub t: f64,
    pub color: [f64; 3],
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl HeightProfile {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        match *self {
            HeightProfile::Flat => 0.0,
            HeightProfile::Crown { amplitude, half_width } => amplitude * (1.0 - (y / half_width).powi(2)).max(0.0),
            HeightProfile::Bumps {
                amplitude,
                wavelength_x,
                wavelength_y,
            } => {
                let tau = std::f64::consts::TAU;
                amplitude * (tau * x / wavelength_x).sin() * (tau * y / wavelength_y).sin()
            }
        }
    }

    /// `(min, max)` of the height over the plane.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            HeightProfile::Flat => (0.0, 0.0),
            HeightProfile::Crown { amplitude, .. } => (amplitude.min(0.0), amplitude.max(0.0)),
            HeightProfile::Bumps { amplitude, .. } => (-amplitude.abs(), amplitude.abs()),
        }
    }
}

impl RoadSpec {
    /// Paint coverage in `[0, 1]` at a road point.
    pub fn marking(&self, x: f64, y: f64) -> f64 {
        let m = &self.markings;
        let half = 0.5 * m.width;
        let mut cover: f64 = 0.0;
        for line in &m.lines {
            let across = 1.0 - smoothstep(half - m.softness, half + m.softness, (y - line.y).abs());
            if across <= 0.0 {
                continue;
            }
            let along = if line.dashed {
                let ph = x.rem_euclid(m.dash_period);
                let s = m.softness;
                smoothstep(-s, s, ph) * (1.0 - smoothstep(m.dash_length - s, m.dash_length + s, ph))
                    + smoothstep(m.dash_period - s, m.dash_period + s, ph)
            } else {
                1.0
            };
            cover = cover.max(across * along.min(1.0));
        }
        cover
    }

    pub fn albedo(&self, x: f64, y: f64) -> [f64; 3] {
        let n = 0.5 * (1.3 * x + 0.7 * y).sin() * (0.9 * y - 0.4 * x).cos() + 0.3 * (2.9 * x - 1.7 * y + 1.0).sin()
            + 0.2 * (0.45 * x + 2.3 * y + 2.0).sin();
        let base = self.base_color.map(|c| (c + self.texture_amplitude * n).clamp(0.0, 1.0));
        let m = self.marking(x, y);
        [0, 1, 2].map(|ch| base[ch] * (1.0 - m) + self.markings.color[ch] * m)
    }
}

impl SkySpec {
    pub fn color(&self, d: &Vec3) -> [f64; 3] {
        let z = d.z.clamp(-1.0, 1.0);
        let (a, b, t) = if z >= 0.0 { (self.horizon, self.zenith, z) } else { (self.horizon, self.nadir, -z) };
        [0, 1, 2].map(|ch| a[ch] + (b[ch] - a[ch]) * t)
    }
}

/// Nearest road crossing inside `extent` for a ray from above.
pub(super) fn intersect_road(spec: &RoadSpec, extent: &Extent2, ray: &Ray) -> Option<f64> {
    let (o, d) = (ray.origin, ray.direction);
    // Clip to the extent's xy slab.
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for (oc, dc, lo, hi) in [(o.x, d.x, extent.x0, extent.x1), (o.y, d.y, extent.y0, extent.y1)] {
        if dc.abs() < 1e-300 {
            if oc < lo || oc > hi {
                return None;
            }
        } else {
            let (a, b) = ((lo - oc) / dc, (hi - oc) / dc);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    if t0 > t1 {
        return None;
    }
    let (hmin, hmax) = spec.height.bounds();
    if let HeightProfile::Flat = spec.height {
        if d.z >= 0.0 {
            return None;
        }
        let t = (hmin - o.z) / d.z;
        return (t >= t0 && t <= t1 && t > 0.0).then_some(t);
    }
    // Restrict to where the ray is within the height band.
    if d.z.abs() < 1e-300 {
        if o.z < hmin || o.z > hmax {
            return None;
        }
    } else {
        let (a, b) = ((hmin - 1e-9 - o.z) / d.z, (hmax + 1e-9 - o.z) / d.z);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if t0 > t1 {
        return None;
    }
    let f = |t: f64| {
        let p = o + d * t;
        p.z - spec.height.height(p.x, p.y)
    };
    const STEP: f64 = 0.02;
    let mut ta = t0;
    if f(ta) <= 0.0 {
        return None;
    }
    while ta < t1 {
        let tb = (ta + STEP).min(t1);
        let fb = f(tb);
        if fb <= 0.0 {
            let (mut lo, mut hi) = (ta, tb);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        ta = tb;
    }
    None
}

/// Entry distance and world normal of an obstacle hit.
pub(super) fn intersect_obstacle(ob: &Obstacle, ray: &Ray) -> Option<(f64, Vec3)> {
    match ob.shape {
        ObstacleShape::Box { half_size, yaw } => {
            let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
            let c = Vec3::from(ob.center);
            let o = rot.inverse() * (ray.origin - c);
            let d = rot.inverse() * ray.direction;
            let (mut tn, mut tf) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            let mut sign = 1.0;
            for k in 0..3 {
                let h = half_size[k];
                if d[k].abs() < 1e-300 {
                    if o[k].abs() > h {
                        return None;
                    }
                    continue;
                }
                let a = (-h - o[k]) / d[k];
                let b = (h - o[k]) / d[k];
                let (near, far) = if a < b { (a, b) } else { (b, a) };
                if near > tn {
                    tn = near;
                    axis = k;
                    sign = if d[k] > 0.0 { -1.0 } else { 1.0 };
                }
                tf = tf.min(far);
            }
            if tn > tf || tn <= 0.0 {
                return None;
            }
            let mut n = Vec3::zeros();
            n[axis] = sign;
            Some((tn, rot * n))
        }
        ObstacleShape::Ellipsoid { radii } => {
            let c = Vec3::from(ob.center);
            let r = Vec3::from(radii);
            let o = (ray.origin - c).component_div(&r);
            let d = ray.direction.component_div(&r);
            let a = d.dot(&d);
            let b = o.dot(&d);
            let cc = o.dot(&o) - 1.0;
            let disc = b * b - a * cc;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / a;
            if t <= 0.0 {
                return None;
            }
            let p = ray.at(t) - c;
            let n = p.component_div(&r.component_mul(&r)).normalize();
            Some((t, n))
        }
    }
}

impl SynthScene {
    pub fn trace(&self, ray: &Ray) -> Hit {
        let extent = self.road_extent();
        let mut best = Hit {
            kind: HitKind::Sky,
            t: f64::INFINITY,
            color: self.sky.color(&ray.direction),
        };
        if let Some(t) = intersect_road(&self.road, &extent, ray) {
            let p = ray.at(t);
            best = Hit {
                kind: HitKind::Road,
                t,
                color: self.road.albedo(p.x, p.y),
            };
        }
        let light = Vec3::from(self.light_dir).normalize();
        for (i, ob) in self.obstacles.iter().enumerate() {
            if let Some((t, n)) = intersect_obstacle(ob, ray) {
                if t < best.t {
                    let shade = 0.55 + 0.45 * n.dot(&light).max(0.0);
                    best = Hit {
                        kind: HitKind::Obstacle(i),
                        t,
                        color: ob.color.map(|c| (c * shade).clamp(0.0, 1.0)),
                    };
                }
            }
        }
        best
    }

    /// Unquantized image, camera-z depth (0 on sky) and per-pixel hit kinds.
    pub fn render_exact(&self, camera: &Camera, pose: &Pose) -> (Image, Plane, Vec<HitKind>) {
        use rayon::prelude::*;
        let fwd = pose.forward();
        let hits: Vec<Hit> = pixel_rays(camera, pose).par_iter().map(|r| self.trace(r)).collect();
        let (w, h) = (camera.width as usize, camera.height as usize);
        let image = Image {
            width: w,
            height: h,
            data: hits.iter().map(|h| h.color).collect(),
        };
        let rays = pixel_rays(camera, pose);
        let depth = Plane {
            width: w,
            height: h,
            data: hits
                .iter()
                .zip(&rays)
                .map(|(h, r)| if h.kind == HitKind::Sky { 0.0 } else { h.t * r.direction.dot(&fwd) })
                .collect(),
        };
        (image, depth, hits.iter().map(|h| h.kind).collect())
    }

    /// Camera-z depth along the ray through a continuous pixel coordinate;
    /// `None` on sky.
    pub fn depth_at(&self, camera: &Camera, pose: &Pose, px: [f64; 2]) -> Option<f64> {
        let r = pixel_ray(camera, pose, px).ok()?;
        let h = self.trace(&r);
        (h.kind != HitKind::Sky).then(|| h.t * r.direction.dot(&pose.forward()))
    }
}
