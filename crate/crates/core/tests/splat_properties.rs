mod common;

use lanesplat::geometry::{Camera, Pose, Vec3};
use lanesplat::splat::{rasterize, Gaussian3D, RasterSettings, SplatLayer};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn scene(seed: u64, n: usize, spread: f64) -> Vec<Gaussian3D> {
    let mut rng = common::rng(seed);
    (0..n).map(|_| common::random_gaussian(&mut rng, (1.0, 9.0), spread)).collect()
}

fn camera() -> Camera {
    Camera::centered(60.0, 64, 64, 0.1, 100.0).unwrap()
}

fn max_diff(a: &SplatLayer, b: &SplatLayer) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..a.opacity.data.len() {
        worst = worst.max((a.opacity.data[k] - b.opacity.data[k]).abs());
        for ch in 0..3 {
            worst = worst.max((a.color.data[k][ch] - b.color.data[k][ch]).abs());
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn opacity_stays_in_unit_interval(seed in any::<u64>(), n in 1usize..120, spread in 0.2f64..4.0) {
        let layer = rasterize(&scene(seed, n, spread), &camera(), &Pose::identity(), &RasterSettings::default());
        prop_assert!(layer.opacity.data.iter().all(|o| (0.0..=1.0).contains(o)));
        prop_assert!(layer.color.data.iter().flatten().all(|c| c.is_finite()));
    }

    #[test]
    fn input_order_does_not_matter(seed in any::<u64>(), n in 2usize..80) {
        let gs = scene(seed, n, 2.0);
        let mut shuffled = gs.clone();
        shuffled.shuffle(&mut common::rng(seed ^ 0x5eed));
        let s = RasterSettings::default();
        let a = rasterize(&gs, &camera(), &Pose::identity(), &s);
        let b = rasterize(&shuffled, &camera(), &Pose::identity(), &s);
        prop_assert_eq!(a.opacity.data, b.opacity.data);
        prop_assert_eq!(a.color.data, b.color.data);
    }

    #[test]
    fn tiled_matches_naive(seed in any::<u64>(), n in 1usize..=100) {
        let mut rng = common::rng(seed);
        let gs: Vec<_> = (0..n).map(|_| common::random_gaussian(&mut rng, (1.0, 9.0), 2.5)).collect();
        let pose = Pose::from_translation(Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0));
        let s = RasterSettings::default();
        let tiled = rasterize(&gs, &camera(), &pose, &s);
        let (color, opacity) = common::naive_splat(&gs, &camera(), &pose, &s);
        let naive = SplatLayer { color, opacity, depth: tiled.depth.clone() };
        prop_assert!(max_diff(&tiled, &naive) < 1e-6);
    }
}

#[test]
fn tied_depths_of_one_color_are_order_independent() {
    let mut gs = scene(3, 30, 1.5);
    for g in &mut gs {
        g.mu.z = 5.0;
        g.color = [0.2, 0.6, 0.9];
        g.sh1 = [[0.0; 3]; 3];
    }
    let s = RasterSettings::default();
    let a = rasterize(&gs, &camera(), &Pose::identity(), &s);
    gs.reverse();
    let b = rasterize(&gs, &camera(), &Pose::identity(), &s);
    assert!(max_diff(&a, &b) < 1e-12);
}

#[test]
fn thread_count_does_not_change_the_image() {
    let gs = scene(9, 100, 2.5);
    let s = RasterSettings::default();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| rasterize(&gs, &camera(), &Pose::identity(), &s));
    let b = four.install(|| rasterize(&gs, &camera(), &Pose::identity(), &s));
    assert_eq!(a.color.data, b.color.data);
    assert_eq!(a.opacity.data, b.opacity.data);
}
