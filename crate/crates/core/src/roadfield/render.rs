use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampling::{log_cdf, sample_ray_within, RaySamples};
use super::{sh2_basis, Grid2D, RoadError, RoadField};
use crate::geometry::{pixel_rays, Camera, Pose, Vec3};
use crate::img::{Image, Plane};
use crate::splat::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadSettings {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Intervals whose blend weight `T·α` is at or below this contribute no
    /// color (their opacity still counts).
    pub color_weight_min: f64,
    /// Marching stops once the transmittance drops below this.
    pub transmittance_min: f64,
}

impl Default for RoadSettings {
    fn default() -> Self {
        Self {
            n_coarse: 16,
            n_fine: 16,
            color_weight_min: 1e-6,
            transmittance_min: 1e-4,
        }
    }
}

impl RoadSettings {
    pub fn smooth() -> Self {
        Self {
            color_weight_min: 0.0,
            transmittance_min: 0.0,
            ..Self::default()
        }
    }
}

/// Road layer. `color` is premultiplied by `opacity`.
#[derive(Clone, Debug)]
pub struct RoadLayer {
    pub color: Image,
    pub opacity: Plane,
    /// Coverage-normalized camera-z depth; 0 where the ray found no surface.
    pub depth: Plane,
}

pub struct RoadUpstream<'a> {
    pub color: &'a [[f64; 3]],
    pub opacity: &'a [f64],
}

/// Gradient buffers with the same shapes as a [`RoadField`].
#[derive(Clone, Debug, PartialEq)]
pub struct RoadGrad {
    pub elevation: Grid2D,
    pub slope: Grid2D,
    pub color: Grid2D,
    pub log_s: f64,
}

impl RoadGrad {
    pub fn accumulate(&mut self, other: &RoadGrad) {
        self.elevation.accumulate(&other.elevation);
        self.slope.accumulate(&other.slope);
        self.color.accumulate(&other.color);
        self.log_s += other.log_s;
    }

    /// Every entry in a fixed order: elevation, slope, color, then `log_s`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = Vec::new();
        for g in [&self.elevation, &self.slope, &self.color] {
            for p in g.params() {
                v.extend_from_slice(p);
            }
        }
        v.push(self.log_s);
        v
    }
}

impl RoadField {
    /// Parameters flattened in [`RoadGrad::flatten`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = Vec::new();
        for g in [&self.elevation, &self.slope, &self.color] {
            for p in g.params() {
                v.extend_from_slice(p);
            }
        }
        v.push(self.log_s);
        v
    }

    /// Overwrites every parameter from a vector in flattened order.
    pub fn assign(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.param_count(), "parameter vector length");
        let mut off = 0;
        for g in [&mut self.elevation, &mut self.slope, &mut self.color] {
            for p in g.params_mut() {
                p.copy_from_slice(&v[off..off + p.len()]);
                off += p.len();
            }
        }
        self.log_s = v[off];
    }

    /// Mutable access to the `k`-th parameter in flattened order.
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for g in [&mut self.elevation, &mut self.slope, &mut self.color] {
            for p in g.params_mut() {
                if k < p.len() {
                    return &mut p[k];
                }
                k -= p.len();
            }
        }
        assert_eq!(k, 0, "parameter index out of range");
        &mut self.log_s
    }
}

#[derive(Clone, Copy, Debug)]
struct SamplePoint {
    p: Vec3,
    raw: f64,
    hgt: f64,
    /// Sharpness-scaled signed distance.
    a: f64,
    log_cdf: f64,
}

#[derive(Clone, Copy, Debug)]
struct Interval {
    alpha: f64,
    ratio: f64,
    trans: f64,
    col: Option<[f64; 3]>,
}

/// Per-ray quantities of the forward pass that the backward pass reuses.
/// Only the marched prefix of the samples is stored.
#[derive(Clone, Debug, Default)]
struct RayTrace {
    points: Vec<SamplePoint>,
    intervals: Vec<Interval>,
}

struct RayState {
    samples: Vec<RaySamples>,
    traces: Vec<RayTrace>,
}

/// Road layer renderer that keeps its sample sets for the backward pass.
#[derive(Default)]
pub struct RoadRenderer {
    pub settings: RoadSettings,
    state: Option<RayState>,
}

impl RoadRenderer {
    pub fn new(settings: RoadSettings) -> Self {
        Self { settings, state: None }
    }

    /// Sample sets of the last forward pass, row-major.
    pub fn samples(&self) -> &[RaySamples] {
        self.state.as_ref().map(|s| s.samples.as_slice()).unwrap_or(&[])
    }

    pub fn forward(&mut self, field: &RoadField, camera: &Camera, pose: &Pose) -> RoadLayer {
        let st = self.settings;
        let bounds = field.height_bounds();
        let samples: Vec<RaySamples> = pixel_rays(camera, pose)
            .par_iter()
            .map(|r| sample_ray_within(r, field, bounds, st.n_coarse, st.n_fine, camera.near, camera.far))
            .collect();
        self.forward_with_samples(field, camera, pose, samples)
    }

    /// Renders with caller-supplied samples (one set per pixel, row-major).
    /// The samples are constants of the pass: the backward pass does not
    /// differentiate through their placement.
    pub fn forward_with_samples(
        &mut self,
        field: &RoadField,
        camera: &Camera,
        pose: &Pose,
        samples: Vec<RaySamples>,
    ) -> RoadLayer {
        assert_eq!(samples.len(), camera.pixel_count(), "one sample set per pixel");
        let forward = pose.forward();
        let st = self.settings;
        let out: Vec<(([f64; 3], f64, f64), RayTrace)> = samples
            .par_iter()
            .map(|smp| trace(field, smp, &forward, &st))
            .collect();
        let (w, h) = (camera.width as usize, camera.height as usize);
        let mut color = Image::new(w, h);
        let mut opacity = Plane::new(w, h);
        let mut depth = Plane::new(w, h);
        let mut traces = Vec::with_capacity(out.len());
        for (i, ((c, o, d), tr)) in out.into_iter().enumerate() {
            color.data[i] = c;
            opacity.data[i] = o;
            depth.data[i] = d;
            traces.push(tr);
        }
        self.state = Some(RayState { samples, traces });
        RoadLayer { color, opacity, depth }
    }

    pub fn backward(&self, field: &RoadField, upstream: &RoadUpstream) -> Result<RoadGrad, RoadError> {
        let state = self.state.as_ref().ok_or(RoadError::NoForwardState)?;
        let n = state.samples.len();
        if upstream.color.len() != n || upstream.opacity.len() != n {
            return Err(RoadError::Mismatch("upstream gradient size".into()));
        }
        // One gradient buffer per worker, reduced in chunk order.
        let chunk = n.div_ceil(rayon::current_num_threads().max(1)).max(1);
        let partial: Vec<RoadGrad> = state
            .samples
            .par_chunks(chunk)
            .zip(state.traces.par_chunks(chunk))
            .enumerate()
            .map(|(ci, (rays, traces))| {
                let mut g = field.zero_grad();
                for (k, (smp, tr)) in rays.iter().zip(traces).enumerate() {
                    let i = ci * chunk + k;
                    let (gc, go) = (upstream.color[i], upstream.opacity[i]);
                    if go == 0.0 && gc == [0.0; 3] {
                        continue;
                    }
                    trace_backward(field, smp, tr, gc, go, &mut g);
                }
                g
            })
            .collect();
        let mut parts = partial.into_iter();
        let mut total = parts.next().unwrap_or_else(|| field.zero_grad());
        for p in parts {
            total.accumulate(&p);
        }
        Ok(total)
    }
}

/// Premultiplied color, opacity and normalized depth of one ray, plus the
/// state its backward pass needs.
fn trace(field: &RoadField, smp: &RaySamples, forward: &Vec3, st: &RoadSettings) -> (([f64; 3], f64, f64), RayTrace) {
    let mut tr = RayTrace::default();
    if smp.is_empty() {
        return (([0.0; 3], 0.0, 0.0), tr);
    }
    let s = field.s();
    let sh = sh2_basis(&smp.ray.direction);
    let mut feats = Vec::new();
    let mut head = [0.0; 3];
    let point = |t: f64| {
        let p = smp.ray.at(t);
        let (raw, hgt) = field.raw_slope_and_height(p.x, p.y);
        let a = s * sigmoid(raw) * (p.z - hgt);
        SamplePoint {
            p,
            raw,
            hgt,
            a,
            log_cdf: log_cdf(a),
        }
    };
    tr.points.reserve(smp.t.len());
    tr.intervals.reserve(smp.t.len() - 1);
    tr.points.push(point(smp.t[0]));
    let (mut t_acc, mut c, mut dsum) = (1.0, [0.0; 3], 0.0);
    for i in 0..smp.t.len() - 1 {
        let next = point(smp.t[i + 1]);
        let prev = tr.points[i];
        tr.points.push(next);
        let ratio = (next.log_cdf - prev.log_cdf).exp();
        let alpha = if ratio < 1.0 { 1.0 - ratio } else { 0.0 };
        let mut iv = Interval {
            alpha,
            ratio,
            trans: t_acc,
            col: None,
        };
        if alpha == 0.0 {
            tr.intervals.push(iv);
            continue;
        }
        let wgt = t_acc * alpha;
        let mid = (prev.p + next.p) * 0.5;
        if wgt > st.color_weight_min {
            field.color.features(mid.x, mid.y, &sh, &mut feats);
            field.color.head(&feats, &mut head);
            let col = [sigmoid(head[0]), sigmoid(head[1]), sigmoid(head[2])];
            for ch in 0..3 {
                c[ch] += wgt * col[ch];
            }
            iv.col = Some(col);
        }
        tr.intervals.push(iv);
        dsum += wgt * (mid - smp.ray.origin).dot(forward);
        t_acc *= 1.0 - alpha;
        if t_acc < st.transmittance_min {
            break;
        }
    }
    let o = 1.0 - t_acc;
    let depth = if o > 1e-12 { dsum / o } else { 0.0 };
    ((c, o, depth), tr)
}

fn trace_backward(field: &RoadField, smp: &RaySamples, tr: &RayTrace, gc: [f64; 3], go: f64, grad: &mut RoadGrad) {
    let m = tr.intervals.len();
    if m == 0 {
        return;
    }
    let s = field.s();
    let sh = sh2_basis(&smp.ray.direction);
    let mut feats = Vec::new();

    // Back-to-front: `behind` is the color (and coverage) composited behind
    // interval i, so no division by (1 − α) is needed.
    let mut behind = [0.0; 3];
    let mut behind_o = 0.0;
    let mut g_a = vec![0.0; m + 1];
    for i in (0..m).rev() {
        let iv = &tr.intervals[i];
        let al = iv.alpha;
        if al == 0.0 {
            continue;
        }
        let c = iv.col.unwrap_or([0.0; 3]);
        let mut g_alpha = go * (1.0 - behind_o);
        for ch in 0..3 {
            g_alpha += gc[ch] * (c[ch] - behind[ch]);
        }
        g_alpha *= iv.trans;
        if let Some(c) = iv.col {
            let wgt = iv.trans * al;
            let d_head = [
                wgt * gc[0] * c[0] * (1.0 - c[0]),
                wgt * gc[1] * c[1] * (1.0 - c[1]),
                wgt * gc[2] * c[2] * (1.0 - c[2]),
            ];
            let mid = (tr.points[i].p + tr.points[i + 1].p) * 0.5;
            field.color.features(mid.x, mid.y, &sh, &mut feats);
            field.color.backward(mid.x, mid.y, &feats, &d_head, &mut grad.color);
        }
        for ch in 0..3 {
            behind[ch] = al * c[ch] + (1.0 - al) * behind[ch];
        }
        behind_o = al + (1.0 - al) * behind_o;
        // α = 1 − Φ(a₁)/Φ(a₀), d ln Φ(a)/da = 1 − Φ(a).
        g_a[i] += g_alpha * iv.ratio * sigmoid(-tr.points[i].a);
        g_a[i + 1] -= g_alpha * iv.ratio * sigmoid(-tr.points[i + 1].a);
    }

    let paired = field.slope.channels == 1 && field.slope.same_layout(&field.elevation);
    for (k, sp) in tr.points.iter().enumerate() {
        if g_a[k] == 0.0 {
            continue;
        }
        grad.log_s += g_a[k] * sp.a;
        let g_d = s * g_a[k];
        let sg = sigmoid(sp.raw);
        let p = &sp.p;
        let g_raw = g_d * sg * (1.0 - sg) * (p.z - sp.hgt);
        let g_h = -g_d * sg;
        if paired {
            Grid2D::backward_scalar_pair(
                &field.slope,
                &field.elevation,
                p.x,
                p.y,
                (g_raw, g_h),
                &mut grad.slope,
                &mut grad.elevation,
            );
        } else {
            field.slope.backward_scalar(p.x, p.y, g_raw, &mut grad.slope);
            field.elevation.backward_scalar(p.x, p.y, g_h, &mut grad.elevation);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Ray;
    use crate::roadfield::{sample_ray, Extent2, RoadConfig};

    fn gray_road(s: f64) -> RoadField {
        let mut f = RoadField::new(Extent2::new(-30.0, 30.0, -30.0, 30.0), &RoadConfig::default());
        f.set_uniform_color([0.4, 0.4, 0.4]);
        f.log_s = s.ln();
        f
    }

    fn one_ray(field: &RoadField, ray: Ray) -> ([f64; 3], f64, f64, Vec<f64>) {
        let smp = sample_ray(&ray, field, 32, 32, 0.1, 100.0);
        let alphas = crate::roadfield::neus_alpha(field, &smp);
        let (c, o, d) = trace(field, &smp, &ray.direction, &RoadSettings::smooth()).0;
        (c, o, d, alphas)
    }

    #[test]
    fn upward_ray_is_transparent() {
        let f = gray_road(10.0);
        let r = Ray::new(Vec3::new(0.0, 0.0, 1.5), Vec3::new(0.2, 0.0, 1.0));
        assert!(one_ray(&f, r).1 < 1e-3);
    }

    #[test]
    fn nadir_ray_hits_gray_road() {
        let f = gray_road(2000.0);
        let r = Ray::new(Vec3::new(2.0, 1.0, 1.5), Vec3::new(0.0, 0.0, -1.0));
        let (c, o, d, _) = one_ray(&f, r);
        assert!(o > 0.999, "{o}");
        for ch in c {
            assert!((ch / o - 0.4).abs() < 1e-2);
        }
        // Analytic intersection at t = 1.5.
        assert!((d - 1.5).abs() < 1e-2, "{d}");
    }

    #[test]
    fn weights_telescope_to_opacity() {
        let f = gray_road(30.0);
        let r = Ray::new(Vec3::new(0.0, 0.0, 1.5), Vec3::new(1.0, 0.1, -0.08));
        let (_, o, _, alphas) = one_ray(&f, r);
        let mut t = 1.0;
        let mut sum = 0.0;
        for a in alphas {
            assert!((0.0..=1.0).contains(&a));
            sum += t * a;
            t *= 1.0 - a;
        }
        assert!((sum - o).abs() < 1e-12, "{sum} vs {o}");
        assert!(o > 0.5);
    }

    #[test]
    fn backward_without_forward_errors() {
        let f = gray_road(10.0);
        let r = RoadRenderer::default();
        let up = RoadUpstream { color: &[], opacity: &[] };
        assert!(matches!(r.backward(&f, &up), Err(RoadError::NoForwardState)));
    }

    #[test]
    fn flatten_and_param_mut_agree() {
        let mut f = gray_road(10.0);
        let n = f.flatten().len();
        assert_eq!(n, f.param_count());
        *f.param_mut(n - 1) = 1.25;
        assert_eq!(f.log_s, 1.25);
        *f.param_mut(3) = -7.0;
        assert_eq!(f.flatten()[3], -7.0);
    }
}
