//! Independent oracles shared by the integration tests and the acceptance
//! harness: central finite differences and a naive all-pairs splat blender.

#![allow(dead_code)]

use lanesplat::compositor::{composite, composite_backward};
use lanesplat::geometry::{Camera, Pose, Vec3};
use lanesplat::img::{Image, Plane};
use lanesplat::metrics::MultiScaleSsim;
use lanesplat::roadfield::{Extent2, RoadConfig, RoadField, RoadRenderer, RoadSettings, RoadUpstream};
use lanesplat::sky::SkyMap;
use lanesplat::splat::{rasterize, Gaussian3D, RasterSettings, SplatRenderer, SplatUpstream, PARAM_COUNT};
use lanesplat::trainer::{pseudo_loss, reconstruction_loss, PseudoWeights, ReconWeights};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, UnitQuaternion, Quaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

/// `(f(x + h) − f(x − h)) / 2h` for a perturbation applied by `f`.
pub fn central(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
    let c = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
    let o = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    (c, o)
}

fn dot(c: &[[f64; 3]], o: &[f64], color: &Image, opacity: &Plane) -> f64 {
    let mut l = 0.0;
    for i in 0..c.len() {
        for ch in 0..3 {
            l += c[i][ch] * color.data[i][ch];
        }
        l += o[i] * opacity.data[i];
    }
    l
}

// ---------------------------------------------------------------- splats

pub fn random_gaussian(rng: &mut ChaCha8Rng, depth: (f64, f64), spread: f64) -> Gaussian3D {
    let mut g = Gaussian3D::isotropic(
        Vec3::new(
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            rng.random_range(depth.0..depth.1),
        ),
        1.0,
        0.5,
        [rng.random(), rng.random(), rng.random()],
    );
    g.log_scale = Vec3::new(
        rng.random_range(-1.8..-0.8),
        rng.random_range(-1.8..-0.8),
        rng.random_range(-1.8..-0.8),
    );
    g.rotation = [
        rng.random_range(0.2..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    g.logit_opacity = rng.random_range(-1.0..2.0);
    for a in 0..3 {
        for c in 0..3 {
            g.sh1[a][c] = rng.random_range(-0.3..0.3);
        }
    }
    g
}

/// Worst relative error of the splat reverse pass over every parameter of
/// one to three random Gaussians.
pub fn splat_grad_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let cam = Camera::centered(20.0, 20, 16, 0.1, 100.0).unwrap();
    let pose = Pose::from_wxyz([1.0, 0.02, -0.03, 0.01], Vec3::new(0.05, -0.02, 0.1)).unwrap();
    let n = 1 + (seed % 3) as usize;
    let gs: Vec<Gaussian3D> = (0..n).map(|_| random_gaussian(&mut rng, (3.0, 5.0), 0.6)).collect();
    let (c, o) = weights(&mut rng, cam.pixel_count());
    let settings = RasterSettings::smooth();
    let mut r = SplatRenderer::new(settings);
    r.forward(&gs, &cam, &pose);
    let grads = r.backward(&gs, &SplatUpstream { color: &c, opacity: &o }).unwrap();
    let loss = |gs: &[Gaussian3D]| {
        let out = rasterize(gs, &cam, &pose, &settings);
        dot(&c, &o, &out.color, &out.opacity)
    };
    let mut worst: f64 = 0.0;
    for gi in 0..n {
        for k in 0..PARAM_COUNT {
            let fd = central(
                |h| {
                    let mut v = gs.clone();
                    let mut p = v[gi].to_params();
                    p[k] += h;
                    v[gi] = Gaussian3D::from_params(&p);
                    loss(&v)
                },
                FD_STEP,
            );
            worst = worst.max(rel_err(grads[gi][k], fd));
        }
    }
    worst
}

fn quat_matrix(q: [f64; 4]) -> Matrix3<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

struct Naive {
    mean: [f64; 2],
    conic: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    index: usize,
}

/// Projects and blends every Gaussian at every pixel with no tiling and no
/// per-splat bounding boxes. Culling follows the documented rules: behind
/// the near plane, outside the widened frustum, or with the 99% ellipse
/// wholly off-image.
pub fn naive_splat(gs: &[Gaussian3D], cam: &Camera, pose: &Pose, s: &RasterSettings) -> (Image, Plane) {
    const CHI2_99: f64 = 9.210340371976184;
    let w_rot = pose.rotation_matrix().transpose();
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut list: Vec<Naive> = Vec::new();
    for (index, g) in gs.iter().enumerate() {
        let p = w_rot * (g.mu - pose.translation);
        if p.z <= cam.near {
            continue;
        }
        if s.cull_offscreen {
            let lx = s.frustum_guard * cam.cx.max(w as f64 - cam.cx) / cam.fx;
            let ly = s.frustum_guard * cam.cy.max(h as f64 - cam.cy) / cam.fy;
            if (p.x / p.z).abs() > lx || (p.y / p.z).abs() > ly {
                continue;
            }
        }
        let r = quat_matrix(g.rotation);
        let sc = Matrix3::from_diagonal(&g.log_scale.map(f64::exp));
        let cov3 = w_rot * (r * sc * sc * r.transpose()) * w_rot.transpose();
        let j = Matrix2x3::new(
            cam.fx / p.z,
            0.0,
            -cam.fx * p.x / (p.z * p.z),
            0.0,
            cam.fy / p.z,
            -cam.fy * p.y / (p.z * p.z),
        );
        let cov2 = j * cov3 * j.transpose() + Matrix2::identity() * s.cov_blur;
        let Some(conic) = cov2.try_inverse() else { continue };
        let mean = [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy];
        if s.cull_offscreen {
            let (hx, hy) = ((CHI2_99 * cov2[(0, 0)]).sqrt(), (CHI2_99 * cov2[(1, 1)]).sqrt());
            if mean[0] + hx < 0.0 || mean[0] - hx > w as f64 || mean[1] + hy < 0.0 || mean[1] - hy > h as f64 {
                continue;
            }
        }
        let opacity = 1.0 / (1.0 + (-g.logit_opacity).exp());
        if s.alpha_min > 0.0 && opacity < s.alpha_min {
            continue;
        }
        let dir = (g.mu - pose.translation).normalize();
        let mut color = g.color;
        for a in 0..3 {
            for ch in 0..3 {
                color[ch] += g.sh1[a][ch] * dir[a];
            }
        }
        list.push(Naive { mean, conic, opacity, color, depth: p.z, index });
    }
    list.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let mut color = Image::new(w, h);
    let mut opacity = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for n in &list {
                let d = nalgebra::Vector2::new(px - n.mean[0], py - n.mean[1]);
                let power = (-0.5 * d.dot(&(n.conic * d))).min(0.0);
                let alpha = n.opacity * power.exp();
                if alpha < s.alpha_min || alpha <= 0.0 {
                    continue;
                }
                for ch in 0..3 {
                    c[ch] += t * alpha * n.color[ch];
                }
                t *= 1.0 - alpha;
                if t < s.transmittance_min {
                    break;
                }
            }
            color.data[y * w + x] = c;
            opacity.data[y * w + x] = 1.0 - t;
        }
    }
    (color, opacity)
}

// ------------------------------------------------------------------ road

pub fn random_road_field(rng: &mut ChaCha8Rng) -> RoadField {
    let cfg = RoadConfig {
        levels: 2,
        base_cells: 4,
        finest_cells: 8,
        color_finest_cells: 8,
        ..RoadConfig::default()
    };
    let mut f = RoadField::new(Extent2::new(-2.0, 22.0, -6.0, 6.0), &cfg);
    for l in f.elevation.levels.iter_mut() {
        l.data.iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
    }
    f.elevation.head_weight.iter_mut().for_each(|v| *v = rng.random_range(0.8..1.2));
    for l in f.slope.levels.iter_mut() {
        l.data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    f.slope.head_bias[0] = rng.random_range(0.5..2.5);
    for l in f.color.levels.iter_mut() {
        l.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    f.color.head_weight.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    f.color.head_bias.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    f.log_s = rng.random_range(5f64..20.0).ln();
    f
}

/// Worst relative error of the road reverse pass over every field
/// parameter, with ray samples held at their forward positions.
pub fn road_grad_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let field = random_road_field(&mut rng);
    let cam = Camera::centered(10.0, 12, 10, 0.1, 100.0).unwrap();
    let pose = Pose::look_at(
        Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.5),
        Vec3::new(6.0, rng.random_range(-1.0..1.0), 0.0),
        Vec3::z(),
    );
    let (c, o) = weights(&mut rng, cam.pixel_count());
    let mut r = RoadRenderer::new(RoadSettings::smooth());
    r.forward(&field, &cam, &pose);
    let samples = r.samples().to_vec();
    let grad = r.backward(&field, &RoadUpstream { color: &c, opacity: &o }).unwrap().flatten();
    let loss = |f: &RoadField| {
        let out = RoadRenderer::new(RoadSettings::smooth()).forward_with_samples(f, &cam, &pose, samples.clone());
        dot(&c, &o, &out.color, &out.opacity)
    };
    let mut worst: f64 = 0.0;
    for (k, &an) in grad.iter().enumerate() {
        let fd = central(
            |h| {
                let mut f = field.clone();
                *f.param_mut(k) += h;
                loss(&f)
            },
            FD_STEP,
        );
        worst = worst.max(rel_err(an, fd));
    }
    worst
}

// ------------------------------------------------------------------- sky

fn random_sky(rng: &mut ChaCha8Rng) -> SkyMap {
    let mut sky = SkyMap::new(12, 6, [0.5; 3]);
    for t in sky.texture.data.iter_mut() {
        *t = [0; 3].map(|_| rng.random_range(0.0..1.0));
    }
    sky
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let q = [0; 4].map(|_| rng.random_range(-1.0..1.0));
    Pose::from_wxyz(q, Vec3::new(rng.random(), rng.random(), rng.random())).unwrap()
}

/// Worst absolute-or-relative error of the sky texel gradient. Bilinear
/// sampling is linear in the texels, so differences are exact up to
/// rounding.
pub fn sky_grad_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let sky = random_sky(&mut rng);
    let cam = Camera::centered(6.0, 9, 7, 0.1, 100.0).unwrap();
    let pose = random_pose(&mut rng);
    let (c, _) = weights(&mut rng, cam.pixel_count());
    let grad = sky.render_backward(&cam, &pose, &c);
    let loss = |s: &SkyMap| {
        let img = s.render(&cam, &pose);
        dot(&c, &vec![0.0; c.len()], &img, &Plane::new(img.width, img.height))
    };
    let mut worst: f64 = 0.0;
    for t in 0..sky.texture.data.len() {
        for ch in 0..3 {
            let fd = central(
                |h| {
                    let mut s = sky.clone();
                    s.texture.data[t][ch] += h;
                    loss(&s)
                },
                FD_STEP,
            );
            worst = worst.max(rel_err(grad[t][ch], fd));
        }
    }
    worst
}

// ------------------------------------------------------------ compositor

/// Worst error of the compositor reverse pass over all five inputs.
pub fn compositor_grad_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (w, h) = (5, 4);
    let img = |rng: &mut ChaCha8Rng| Image::from_fn(w, h, |_, _| [0; 3].map(|_| rng.random_range(0.0..1.0)));
    let plane = |rng: &mut ChaCha8Rng| Plane {
        width: w,
        height: h,
        data: (0..w * h).map(|_| rng.random_range(0.05..0.95)).collect(),
    };
    let (i_gs, o_gs, i_road, o_road, i_sky) = (img(&mut rng), plane(&mut rng), img(&mut rng), plane(&mut rng), img(&mut rng));
    let (c, _) = weights(&mut rng, w * h);
    let out = composite(&i_gs, &o_gs, &i_road, &o_road, &i_sky).unwrap();
    let g = composite_backward(&out, &c);
    let loss = |a: &Image, b: &Plane, cc: &Image, d: &Plane, e: &Image| {
        let o = composite(a, b, cc, d, e).unwrap();
        dot(&c, &vec![0.0; c.len()], &o.image, &Plane::new(w, h))
    };
    let mut worst: f64 = 0.0;
    for k in 0..w * h {
        for ch in 0..3 {
            for (which, an) in [(0, g.i_gs[k][ch]), (2, g.i_road[k][ch]), (4, g.i_sky[k][ch])] {
                let fd = central(
                    |hh| {
                        let (mut a, mut cc, mut e) = (i_gs.clone(), i_road.clone(), i_sky.clone());
                        match which {
                            0 => a.data[k][ch] += hh,
                            2 => cc.data[k][ch] += hh,
                            _ => e.data[k][ch] += hh,
                        }
                        loss(&a, &o_gs, &cc, &o_road, &e)
                    },
                    FD_STEP,
                );
                worst = worst.max(rel_err(an, fd));
            }
        }
        for (which, an) in [(1, g.o_gs[k]), (3, g.o_road[k])] {
            let fd = central(
                |hh| {
                    let (mut b, mut d) = (o_gs.clone(), o_road.clone());
                    if which == 1 {
                        b.data[k] += hh;
                    } else {
                        d.data[k] += hh;
                    }
                    loss(&i_gs, &b, &i_road, &d, &i_sky)
                },
                FD_STEP,
            );
            worst = worst.max(rel_err(an, fd));
        }
    }
    worst
}

// ---------------------------------------------------------------- losses

/// Worst error of the reconstruction and pseudo-GT loss gradients with
/// respect to every rendered pixel value.
pub fn loss_grad_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (w, h) = (16, 16);
    let gt = Image::from_fn(w, h, |_, _| [0; 3].map(|_| rng.random_range(0.1..0.9)));
    let render = Image::from_fn(w, h, |x, y| {
        let g = gt.at(x, y);
        // Keep every pixel away from the L1 kink.
        g.map(|v| v + if (x + y) % 2 == 0 { 0.05 } else { -0.05 })
    });
    let recon = ReconWeights { l1: rng.random_range(0.2..1.0), ssim: rng.random_range(0.1..0.5) };
    let pw = PseudoWeights::default();
    let perc = MultiScaleSsim::default();
    let (_, g_rec) = reconstruction_loss(&render, &gt, &recon).unwrap();
    let (_, g_ps) = pseudo_loss(&render, &gt, &pw, &perc).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..w * h {
        for ch in 0..3 {
            let bump = |hh: f64| {
                let mut r = render.clone();
                r.data[k][ch] += hh;
                r
            };
            let fd = central(|hh| reconstruction_loss(&bump(hh), &gt, &recon).unwrap().0, FD_STEP);
            worst = worst.max(rel_err(g_rec[k][ch], fd));
            let fd = central(|hh| pseudo_loss(&bump(hh), &gt, &pw, &perc).unwrap().0, FD_STEP);
            worst = worst.max(rel_err(g_ps[k][ch], fd));
        }
    }
    worst
}
