use super::RoadField;
use crate::geometry::{Ray, Vec3};

/// Sample distances along one ray; strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub ray: Ray,
    pub t: Vec<f64>,
}

impl RaySamples {
    pub fn empty(ray: Ray) -> Self {
        Self { ray, t: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.t.len() < 2
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.t.iter().map(|&t| self.ray.at(t)).collect()
    }
}

/// `ln Φ(a)` for the logistic CDF, stable for large `|a|`.
#[inline]
pub(crate) fn log_cdf(a: f64) -> f64 {
    // −softplus(−a)
    if a > 0.0 {
        -(-a).exp().ln_1p()
    } else {
        a - a.exp().ln_1p()
    }
}

/// Interval opacity from the sharpness-scaled distances at its two ends, and
/// the CDF ratio `Φ(a1)/Φ(a0)` used by the backward pass.
#[inline]
pub(crate) fn interval_alpha(a0: f64, a1: f64) -> (f64, f64) {
    let ratio = (log_cdf(a1) - log_cdf(a0)).exp();
    if ratio < 1.0 {
        (1.0 - ratio, ratio)
    } else {
        (0.0, ratio)
    }
}

/// Per-interval opacities of a sample set: `N` samples give `N − 1` values.
pub fn neus_alpha(field: &RoadField, samples: &RaySamples) -> Vec<f64> {
    let s = field.s();
    let a: Vec<f64> = samples
        .positions()
        .iter()
        .map(|p| s * field.signed_distance(p))
        .collect();
    a.windows(2).map(|w| interval_alpha(w[0], w[1]).0).collect()
}

/// Entry and exit distances of the ray through an axis-aligned box.
fn box_interval(ray: &Ray, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let o = ray.origin[k];
        let d = ray.direction[k];
        if d.abs() < 1e-300 {
            if o < lo[k] || o > hi[k] {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((lo[k] - o) / d, (hi[k] - o) / d);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Coarse uniform samples through the field's bounding slab plus fine
/// samples packed around the first outside-to-inside crossing (or around the
/// smallest `|d|` when the coarse pass finds none).
pub fn sample_ray(ray: &Ray, field: &RoadField, n_coarse: usize, n_fine: usize, near: f64, far: f64) -> RaySamples {
    sample_ray_within(ray, field, field.height_bounds(), n_coarse, n_fine, near, far)
}

/// [`sample_ray`] with precomputed elevation bounds.
pub(crate) fn sample_ray_within(
    ray: &Ray,
    field: &RoadField,
    (h0, h1): (f64, f64),
    n_coarse: usize,
    n_fine: usize,
    near: f64,
    far: f64,
) -> RaySamples {
    let e = field.extent();
    let lo = Vec3::new(e.x0, e.y0, h0 - field.margin);
    let hi = Vec3::new(e.x1, e.y1, h1 + field.margin);
    let Some((ta, tb)) = box_interval(ray, &lo, &hi) else {
        return RaySamples::empty(*ray);
    };
    let (ta, tb) = (ta.max(near), tb.min(far));
    let n_coarse = n_coarse.max(2);
    if tb - ta <= 1e-9 {
        return RaySamples::empty(*ray);
    }
    let step = (tb - ta) / (n_coarse - 1) as f64;
    let mut t: Vec<f64> = (0..n_coarse).map(|i| ta + step * i as f64).collect();
    t[n_coarse - 1] = tb;

    if n_fine > 0 {
        let d: Vec<f64> = t.iter().map(|&ti| field.signed_distance(&ray.at(ti))).collect();
        let s = field.s();
        let crossing = (0..n_coarse - 1).find(|&i| d[i] > 0.0 && d[i + 1] <= 0.0);
        let (center, rate) = match crossing {
            Some(i) => {
                let f = d[i] / (d[i] - d[i + 1]);
                (t[i] + f * (t[i + 1] - t[i]), (d[i] - d[i + 1]) / (t[i + 1] - t[i]))
            }
            None => {
                let i = (0..n_coarse)
                    .min_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()))
                    .unwrap();
                // Local |∂d/∂t| from the nearest coarse neighbor.
                let j = if i + 1 < n_coarse { i + 1 } else { i - 1 };
                (t[i], ((d[j] - d[i]) / (t[j] - t[i])).abs())
            }
        };
        let half = (4.0 / (s * rate.max(1e-12))).min(0.5 * (tb - ta));
        let (fa, fb) = ((center - half).max(ta), (center + half).min(tb));
        if fb > fa {
            for k in 0..n_fine {
                t.push(fa + (fb - fa) * (k as f64 + 0.5) / n_fine as f64);
            }
        }
        t.sort_by(f64::total_cmp);
        t.dedup_by(|b, a| *b - *a <= 1e-9);
    }
    RaySamples { ray: *ray, t }
}
