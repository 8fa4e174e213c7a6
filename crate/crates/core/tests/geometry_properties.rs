use lanesplat::geometry::{align_similarity, pixel_ray, Camera, Pose, Similarity, Transform, Vec3};
use nalgebra::{UnitQuaternion, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = UnitQuaternion<f64>> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-2)
        .prop_map(|(w, x, y, z)| UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(Vector4::new(x, y, z, w))))
}

fn pose() -> impl Strategy<Value = Pose> {
    (rotation(), vec3(50.0)).prop_map(|(r, t)| Pose::new(r, t))
}

/// Camera centers along a wiggly drive, never collinear.
fn trajectory(rng: &mut ChaCha8Rng, n: usize) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let c = Vec3::new(i as f64, 2.0 * (i as f64 * 0.4).sin(), 1.5 + rng.random_range(-0.3..0.3));
            Pose::look_at(c, c + Vec3::x(), Vec3::z())
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quaternions_stay_unit(p in pose(), q in pose()) {
        for r in [p.compose(&q), p.inverse(), Pose::interpolate(&p, &q, 0.37)] {
            prop_assert!((r.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
            let w = r.wxyz();
            prop_assert!(Pose::from_wxyz(w, r.translation).is_ok());
        }
    }

    #[test]
    fn compose_with_inverse_acts_as_identity(p in pose(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = p.compose(&p.inverse());
        for _ in 0..100 {
            let x = Vec3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            prop_assert!((id.transform_point(&x) - x).norm() < 1e-9);
            prop_assert!((p.inverse().compose(&p).transform_point(&x) - x).norm() < 1e-9);
        }
    }

    #[test]
    fn pixel_rays_are_unit(p in pose(), u in 0.0f64..48.0, v in 0.0f64..32.0) {
        let cam = Camera::centered(40.0, 48, 32, 0.1, 100.0).unwrap();
        let ray = pixel_ray(&cam, &p, [u, v]).unwrap();
        prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
        prop_assert!((ray.origin - p.center()).norm() < 1e-12);
        let back = cam.project(&p.world_to_camera(&ray.at(7.0))).unwrap();
        prop_assert!((back[0] - u).abs() < 1e-9 && (back[1] - v).abs() < 1e-9);
    }

    #[test]
    fn similarity_inverse_round_trips(r in rotation(), t in vec3(10.0), s in 0.2f64..5.0, x in vec3(20.0)) {
        let sim = Similarity::new(s, r, t);
        prop_assert!((sim.inverse().transform_point(&sim.transform_point(&x)) - x).norm() < 1e-9);
        prop_assert!((sim.compose(&sim.inverse()).scale - 1.0).abs() < 1e-12);
    }
}

#[test]
fn noisy_alignment_keeps_translation_rmse_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let noise = Normal::new(0.0, 0.01).unwrap();
    for _ in 0..50 {
        let truth = Similarity::new(
            rng.random_range(0.2..5.0),
            UnitQuaternion::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0)),
            Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-5.0..5.0)),
        );
        let metric = trajectory(&mut rng, 40);
        let provider: Vec<Pose> = metric
            .iter()
            .map(|p| {
                let jitter = Vec3::from_fn(|_, _| noise.sample(&mut rng));
                truth.transform_pose(&Pose::new(p.rotation, p.translation + jitter))
            })
            .collect();
        let est = align_similarity(&provider, &metric).unwrap();
        let mse: f64 = provider
            .iter()
            .zip(&metric)
            .map(|(a, b)| (est.transform_point(&a.translation) - b.translation).norm_squared())
            .sum::<f64>()
            / metric.len() as f64;
        assert!(mse.sqrt() < 0.02, "rmse {}", mse.sqrt());
    }
}

#[test]
fn exact_alignment_recovers_every_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let truth = Similarity::new(
            rng.random_range(0.2..5.0),
            UnitQuaternion::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0)),
            Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-5.0..5.0)),
        );
        let metric = trajectory(&mut rng, 12);
        let moved: Vec<Pose> = metric.iter().map(|p| truth.transform_pose(p)).collect();
        let est = align_similarity(&metric, &moved).unwrap();
        assert!((est.scale - truth.scale).abs() < 1e-9);
        assert!(est.rotation.angle_to(&truth.rotation) < 1e-9);
        assert!((est.translation - truth.translation).norm() < 1e-9);
    }
}
