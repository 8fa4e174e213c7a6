use std::sync::Arc;

use lanesplat::dataset::Dataset;
use lanesplat::geometry::{pixel_ray, Pose};
use lanesplat::img::Image;
use lanesplat::metrics::{psnr, ssim, MultiScaleSsim};
use lanesplat::pseudolidar::{initialize_scene, InitConfig};
use lanesplat::scene::{render, Scene};
use lanesplat::synthbench::{HitKind, Route, SynthScene};
use lanesplat::trainer::{
    generate_pseudo_gt, schedule_pseudo_poses, train, FixError, Fixer, IdentityFixer, OracleFixer, Plugins,
    PseudoPool, SampleKind, TrainConfig, TrainReport,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A short straight drive at 32x32 so training runs in seconds.
fn small_scene(preset: &str) -> Arc<SynthScene> {
    let mut s = SynthScene::preset(preset).unwrap();
    s.camera.width = 32;
    s.camera.height = 32;
    s.camera.focal = 20.0;
    s.trajectory.count = 10;
    s.trajectory.interp_every = 3;
    s.trajectory.route = Route::Straight { length: 9.0 };
    s.extrapolation.every = 4;
    s.extrapolation.first = 1;
    Arc::new(s)
}

fn fast_init() -> InitConfig {
    let mut cfg = InitConfig::default();
    cfg.road.field.finest_cells = 32;
    cfg.road.field.color_finest_cells = 32;
    cfg
}

fn fast_train(iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        iterations,
        eval_interval: 0,
        ..TrainConfig::default()
    };
    cfg.road_render.n_coarse = 8;
    cfg.road_render.n_fine = 8;
    cfg
}

fn run(synth: &Arc<SynthScene>, data: &Dataset, cfg: &TrainConfig) -> (Scene, TrainReport) {
    let (mut scene, _) = initialize_scene(data, &fast_init(), cfg.seed).unwrap();
    let fixer = OracleFixer {
        ground_truth: synth.ground_truth_fn(),
    };
    let perc = MultiScaleSsim::default();
    let report = train(&mut scene, data, cfg, &Plugins { fixer: &fixer, perceptual: &perc }).unwrap();
    (scene, report)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn oracle_depth_reprojects_between_views() {
    let synth = small_scene("crown-lane");
    let cam = synth.camera();
    let poses = synth.train_poses();
    let (a, b) = (poses[2], poses[4]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut covisible, mut worst) = (0, 0.0f64);
    for _ in 0..6000 {
        let px = [rng.random_range(0.0..32.0), rng.random_range(0.0..32.0)];
        let Some(depth) = synth.depth_at(&cam, &a, px) else { continue };
        let ray = pixel_ray(&cam, &a, px).unwrap();
        let x = ray.at(depth / ray.direction.dot(&a.forward()));
        let z_b = b.world_to_camera(&x).z;
        let Some(q) = cam.project(&b.world_to_camera(&x)) else { continue };
        if !(0.0..32.0).contains(&q[0]) || !(0.0..32.0).contains(&q[1]) {
            continue;
        }
        let seen = synth.depth_at(&cam, &b, q).expect("reprojected surface point reads as sky");
        // A nearer surface may occlude the point; nothing may lie behind it.
        assert!(seen < z_b + 1e-6, "view b sees through the surface: {seen} vs {z_b}");
        if seen > z_b - 1e-6 {
            covisible += 1;
            worst = worst.max((seen - z_b).abs());
        }
    }
    assert!(covisible > 500, "{covisible} co-visible samples");
    assert!(worst < 1e-6);
}

#[test]
fn stored_depth_matches_hit_kinds() {
    let synth = small_scene("flat-lane");
    let (_, depth, kinds) = synth.render_exact(&synth.camera(), &synth.train_poses()[0]);
    for (d, k) in depth.data.iter().zip(&kinds) {
        assert_eq!(*d == 0.0, *k == HitKind::Sky);
    }
    assert!(kinds.contains(&HitKind::Sky) && kinds.contains(&HitKind::Road));
}

#[test]
fn pseudo_lidar_means_lie_on_true_surfaces_under_scale_distortion() {
    let synth = small_scene("crown-lane");
    let data = synth.generate(2).unwrap();
    let train = data.train_poses();
    for distortion in [0.2, 1.0, 5.0] {
        let mut cfg = fast_init();
        cfg.oracle.scale_distortion = distortion;
        let (scene, summary) = initialize_scene(&data, &cfg, 2).unwrap();
        let scale = summary.recovered_scale.unwrap();
        assert!((scale * distortion - 1.0).abs() < 1e-6, "recovered {scale} for distortion {distortion}");
        let dists: Vec<f64> = scene
            .gaussians
            .iter()
            .map(|g| {
                let c = lanesplat::trainer::nearest(&train, &Pose::from_translation(g.mu)).center();
                let ray = lanesplat::geometry::Ray::new(c, g.mu - c);
                let hit = synth.trace(&ray);
                if hit.kind == HitKind::Sky {
                    f64::INFINITY
                } else {
                    (hit.t - (g.mu - c).norm()).abs()
                }
            })
            .collect();
        let med = median(dists);
        assert!(med < 0.05, "median surface distance {med} at distortion {distortion}");
    }
}

#[test]
fn initialization_is_deterministic() {
    let synth = small_scene("flat-lane");
    let data = synth.generate(4).unwrap();
    let (a, sa) = initialize_scene(&data, &fast_init(), 4).unwrap();
    let (b, sb) = initialize_scene(&data, &fast_init(), 4).unwrap();
    assert_eq!(a.gaussians, b.gaussians);
    assert_eq!(sa.cloud.unwrap().points, sb.cloud.unwrap().points);
}

#[test]
fn zero_iterations_leave_the_scene_untouched() {
    let synth = small_scene("flat-lane");
    let data = synth.generate(0).unwrap();
    let (before, _) = initialize_scene(&data, &fast_init(), 0).unwrap();
    let (after, report) = run(&synth, &data, &fast_train(0));
    assert_eq!(before.gaussians, after.gaussians);
    assert_eq!(before.road, after.road);
    assert_eq!(before.sky.texture, after.sky.texture);
    assert!(report.losses.is_empty());
}

#[test]
fn loss_falls_and_pseudo_samples_keep_their_own_weights() {
    let synth = small_scene("flat-lane");
    let data = synth.generate(0).unwrap();
    let mut cfg = fast_train(300);
    cfg.pseudo.enabled = true;
    cfg.pseudo.start = 0.5;
    cfg.pseudo.interval = 0.2;
    let (_, report) = run(&synth, &data, &cfg);
    let n = report.losses.len();
    assert_eq!(n, 300);
    let real: Vec<f64> = report
        .losses
        .iter()
        .zip(&report.kinds)
        .filter(|(_, k)| **k == SampleKind::Real)
        .map(|(l, _)| *l)
        .collect();
    let tenth = real.len() / 10;
    assert!(median(real[real.len() - tenth..].to_vec()) < median(real[..tenth].to_vec()));
    let first_pseudo = report.kinds.iter().position(|k| *k == SampleKind::Pseudo).unwrap();
    assert!(first_pseudo >= 150);
    assert_eq!(report.pseudo_steps, report.kinds.iter().filter(|k| **k == SampleKind::Pseudo).count());
    assert_eq!(report.real_steps + report.pseudo_steps, n);

    // With reconstruction weights zeroed, only pseudo samples carry loss.
    let mut cfg = fast_train(120);
    cfg.pseudo.enabled = true;
    cfg.pseudo.start = 0.25;
    cfg.recon.l1 = 0.0;
    cfg.recon.ssim = 0.0;
    let (_, report) = run(&synth, &data, &cfg);
    for (l, k) in report.losses.iter().zip(&report.kinds) {
        match k {
            SampleKind::Real => assert_eq!(*l, 0.0),
            SampleKind::Pseudo => assert!(*l > 0.0),
        }
    }
    assert!(report.pseudo_steps > 0);
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let synth = small_scene("flat-lane");
    let data = synth.generate(6).unwrap();
    let mut cfg = fast_train(60);
    cfg.eval_interval = 20;
    cfg.seed = 6;
    let (a, ra) = run(&synth, &data, &cfg);
    let (b, rb) = run(&synth, &data, &cfg);
    assert_eq!(ra.to_csv(), rb.to_csv());
    assert_eq!(a.gaussians, b.gaussians);

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let loaded = Scene::load(dir.path()).unwrap();
    let pose = data.test_extrap[0].pose;
    let x = render(&a, &data.camera, &pose, cfg.raster, cfg.road_render).image.quantized();
    let y = render(&loaded, &data.camera, &pose, cfg.raster, cfg.road_render).image.quantized();
    assert_eq!(x, y);
}

#[test]
fn identity_fixer_keeps_the_renders_it_is_given() {
    let synth = small_scene("flat-lane");
    let data = synth.generate(0).unwrap();
    let (mut scene, _) = initialize_scene(&data, &fast_init(), 0).unwrap();
    let mut cfg = fast_train(30);
    cfg.pseudo.enabled = true;
    cfg.pseudo.start = 0.0;
    let perc = MultiScaleSsim::default();
    let report = train(&mut scene, &data, &cfg, &Plugins { fixer: &IdentityFixer, perceptual: &perc }).unwrap();
    assert!(report.pseudo_pool > 0);
}

#[test]
fn pseudo_poses_move_outward_each_round() {
    let synth = small_scene("flat-lane");
    let train = synth.train_poses();
    let targets = synth.extrap_poses();
    let dist = |poses: &[Pose]| -> Vec<f64> {
        poses
            .iter()
            .map(|p| train.iter().map(|t| (t.center() - p.center()).norm()).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let steps = 4;
    let mut prev = dist(&schedule_pseudo_poses(&train, &targets, steps, 0));
    for round in 1..=steps {
        let cur = dist(&schedule_pseudo_poses(&train, &targets, steps, round));
        assert!(cur.iter().zip(&prev).all(|(c, p)| c > p), "round {round}");
        prev = cur;
    }
}

#[test]
fn psnr_falls_with_noise_and_ssim_stays_bounded() {
    let synth = small_scene("bumps-lane");
    let clean: Image = synth.render(&synth.camera(), &synth.train_poses()[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pattern: Vec<[f64; 3]> = clean.data.iter().map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let mut last = f64::INFINITY;
    assert_eq!(psnr(&clean, &clean).unwrap(), f64::INFINITY);
    for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
        let noisy = Image {
            data: clean.data.iter().zip(&pattern).map(|(c, n)| [0, 1, 2].map(|k| c[k] + amp * n[k])).collect(),
            ..clean.clone()
        };
        let p = psnr(&clean, &noisy).unwrap();
        assert!(p < last);
        last = p;
        let s = ssim(&clean, &noisy.map(|c| c.map(|v| v.clamp(0.0, 1.0)))).unwrap();
        assert!((0.0..=1.0).contains(&s));
        let signed = ssim(&clean, &noisy.map(|c| c.map(|v| v - 0.5))).unwrap();
        assert!((-1.0..=1.0).contains(&signed));
    }
}

/// Refuses poses left of the lane center.
struct RightOnly;

impl Fixer for RightOnly {
    fn name(&self) -> &str {
        "right-only"
    }

    fn fix(&self, render: &Image, pose: &Pose) -> Result<Image, FixError> {
        if pose.center().y > 0.0 {
            Err(FixError("left of center".into()))
        } else {
            Ok(render.clone())
        }
    }
}

#[test]
fn pseudo_gt_replaces_per_round_and_skips_failures() {
    let synth = small_scene("flat-lane");
    let data = synth.generate(0).unwrap();
    let (scene, _) = initialize_scene(&data, &fast_init(), 0).unwrap();
    let cfg = fast_train(0);
    let targets: Vec<Pose> = data.test_extrap.iter().map(|v| v.pose).collect();
    let poses = schedule_pseudo_poses(&data.train_poses(), &targets, 4, 4);
    let mut pool = PseudoPool::default();
    let added = generate_pseudo_gt(&scene, &IdentityFixer, &poses, 1, &data.camera, &cfg, &mut pool);
    assert_eq!((added, pool.len()), (targets.len(), targets.len()));
    generate_pseudo_gt(&scene, &IdentityFixer, &poses, 1, &data.camera, &cfg, &mut pool);
    assert_eq!(pool.len(), targets.len());
    for s in pool.iter() {
        let r = render(&scene, &data.camera, &s.pose, cfg.raster, cfg.road_render).image;
        assert_eq!(s.image, r);
    }

    let right = poses.iter().filter(|p| p.center().y <= 0.0).count();
    let mut pool = PseudoPool::default();
    let added = generate_pseudo_gt(&scene, &RightOnly, &poses, 2, &data.camera, &cfg, &mut pool);
    assert!(right > 0 && right < poses.len());
    assert_eq!((added, pool.len()), (right, right));

    // The oracle at a training pose reproduces that view exactly.
    let oracle = OracleFixer {
        ground_truth: synth.ground_truth_fn(),
    };
    let blank = Image::filled(32, 32, [0.0; 3]);
    assert_eq!(oracle.fix(&blank, &data.train[2].pose).unwrap(), data.train[2].image);
}
