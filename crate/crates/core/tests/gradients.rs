//! Analytic reverse passes against central finite differences.

mod common;

use lanesplat::geometry::{Camera, Pose, Vec3};
use lanesplat::roadfield::{Extent2, RoadConfig, RoadField, RoadRenderer, RoadSettings, RoadUpstream};
use lanesplat::splat::{rasterize, Gaussian3D, RasterSettings, SplatRenderer, SplatUpstream, PARAM_COUNT};

struct Weights {
    color: Vec<[f64; 3]>,
    opacity: Vec<f64>,
}

fn loss(gs: &[Gaussian3D], cam: &Camera, pose: &Pose, s: &RasterSettings, w: &Weights) -> f64 {
    let out = rasterize(gs, cam, pose, s);
    let mut l = 0.0;
    for i in 0..out.color.data.len() {
        for c in 0..3 {
            l += w.color[i][c] * out.color.data[i][c];
        }
        l += w.opacity[i] * out.opacity.data[i];
    }
    l
}

#[test]
fn splat_gradients_match_finite_differences() {
    for seed in 0..6 {
        let e = common::splat_grad_error(seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

#[test]
fn road_gradients_match_finite_differences() {
    for seed in 0..4 {
        let e = common::road_grad_error(seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

#[test]
fn sky_gradients_match_finite_differences() {
    for seed in 0..4 {
        let e = common::sky_grad_error(seed);
        assert!(e < 1e-6, "seed {seed}: {e}");
    }
}

#[test]
fn compositor_gradients_match_finite_differences() {
    for seed in 0..4 {
        let e = common::compositor_grad_error(seed);
        assert!(e < 1e-6, "seed {seed}: {e}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..2 {
        let e = common::loss_grad_error(seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

#[test]
fn sum_of_pixels_single_gaussian_production_settings() {
    // A large, bright splat keeps every pixel far from the alpha threshold.
    let cam = Camera::centered(20.0, 16, 16, 0.1, 100.0).unwrap();
    let mut g = Gaussian3D::isotropic(Vec3::new(0.05, -0.03, 4.0), 1.5, 0.7, [0.3, 0.5, 0.7]);
    g.rotation = [0.9, 0.1, -0.2, 0.3];
    g.log_scale = Vec3::new(0.4, 0.2, 0.3);
    let s = RasterSettings::default();
    let n = cam.pixel_count();
    let w = Weights { color: vec![[1.0; 3]; n], opacity: vec![0.0; n] };
    let pose = Pose::identity();
    let mut r = SplatRenderer::new(s);
    r.forward(std::slice::from_ref(&g), &cam, &pose);
    let grads = r.backward(std::slice::from_ref(&g), &SplatUpstream { color: &w.color, opacity: &w.opacity }).unwrap();
    let h = 1e-4;
    for k in 0..PARAM_COUNT {
        let mut p = g.to_params();
        p[k] += h;
        let a = loss(&[Gaussian3D::from_params(&p)], &cam, &pose, &s, &w);
        p[k] -= 2.0 * h;
        let b = loss(&[Gaussian3D::from_params(&p)], &cam, &pose, &s, &w);
        let fd = (a - b) / (2.0 * h);
        let an = grads[0][k];
        assert!((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) < 1e-3, "param {k}: {an} vs {fd}");
    }
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let mut rng = common::rng(99);
    let field = common::random_road_field(&mut rng);
    let cam = Camera::centered(10.0, 12, 10, 0.1, 100.0).unwrap();
    let pose = Pose::look_at(Vec3::new(0.0, 0.0, 1.5), Vec3::new(6.0, 0.0, 0.0), Vec3::z());
    let n = cam.pixel_count();
    let mut r = RoadRenderer::default();
    r.forward(&field, &cam, &pose);
    let g = r
        .backward(&field, &RoadUpstream { color: &vec![[0.0; 3]; n], opacity: &vec![0.0; n] })
        .unwrap();
    assert!(g.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn opacity_gradient_wrt_sharpness() {
    // Single nadir pixel over a flat road crossing the surface.
    let mut field = RoadField::new(Extent2::new(-5.0, 5.0, -5.0, 5.0), &RoadConfig::default());
    field.log_s = 3f64.ln();
    let cam = Camera::centered(10.0, 1, 1, 0.1, 100.0).unwrap();
    let pose = Pose::look_at(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 0.0), Vec3::x());
    let mut r = RoadRenderer::new(RoadSettings::smooth());
    r.forward(&field, &cam, &pose);
    let samples = r.samples().to_vec();
    let g = r.backward(&field, &RoadUpstream { color: &[[0.0; 3]], opacity: &[1.0] }).unwrap();
    let o = |ls: f64| {
        let mut f = field.clone();
        f.log_s = ls;
        RoadRenderer::new(RoadSettings::smooth())
            .forward_with_samples(&f, &cam, &pose, samples.clone())
            .opacity
            .data[0]
    };
    let h = 1e-4;
    let fd = (o(field.log_s + h) - o(field.log_s - h)) / (2.0 * h);
    assert!(fd > 0.0);
    assert!((g.log_s - fd).abs() / fd.abs() < 1e-3, "{} vs {fd}", g.log_s);
}
