//! Synthetic street scenes with analytic ground truth: a textured road
//! surface with lane markings, box and ellipsoid obstacles, a gradient sky,
//! and camera trajectories with interpolated and laterally offset test views.

mod ablation;
mod oracle;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ablation::{run_ablation, write_ablation, AblationConfig, AblationRow, AblationRun, ABLATION_CSV, ABLATION_MD};
pub use oracle::{Hit, HitKind};

use crate::dataset::{Dataset, View};
use crate::geometry::{Camera, Pose, Vec3};
use crate::img::Image;
use crate::pseudolidar::trajectory_extent;
use crate::roadfield::{Extent2, RoadField};
use crate::trainer::GroundTruthFn;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?} (expected one of: {list})", list = PRESETS.join(", "))]
    UnknownPreset(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeightProfile {
    Flat,
    /// `amplitude · max(0, 1 − (y / half_width)²)`.
    Crown { amplitude: f64, half_width: f64 },
    /// `amplitude · sin(2πx / λx) · sin(2πy / λy)`.
    Bumps {
        amplitude: f64,
        wavelength_x: f64,
        wavelength_y: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneLine {
    pub y: f64,
    pub dashed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Markings {
    pub lines: Vec<LaneLine>,
    pub width: f64,
    pub dash_period: f64,
    pub dash_length: f64,
    /// Half-width of the smooth paint edge.
    pub softness: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadSpec {
    pub height: HeightProfile,
    pub base_color: [f64; 3],
    /// Amplitude of the low-frequency asphalt variation.
    pub texture_amplitude: f64,
    pub markings: Markings,
    /// `[x0, x1, y0, y1]`; otherwise the trajectory bounds grown by
    /// `extent_margin`.
    pub extent: Option<[f64; 4]>,
    pub extent_margin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObstacleShape {
    Box { half_size: [f64; 3], yaw: f64 },
    Ellipsoid { radii: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 3],
    pub shape: ObstacleShape,
    pub color: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkySpec {
    pub zenith: [f64; 3],
    pub horizon: [f64; 3],
    pub nadir: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Route {
    Straight { length: f64 },
    /// Left-turning arc of the given radius and swept angle (radians).
    Arc { radius: f64, angle: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub route: Route,
    pub count: usize,
    pub height: f64,
    pub pitch_deg: f64,
    /// Every this many training intervals gets an interpolated test view at
    /// its midpoint.
    pub interp_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationSpec {
    /// Lateral offsets (meters, positive to the left of travel).
    pub offsets: Vec<f64>,
    /// Offset test views are placed at every this many training stations.
    pub every: usize,
    pub first: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub road: RoadSpec,
    pub obstacles: Vec<Obstacle>,
    pub sky: SkySpec,
    pub trajectory: TrajectorySpec,
    pub extrapolation: ExtrapolationSpec,
    pub camera: CameraSpec,
    pub light_dir: [f64; 3],
    /// Per-pixel Gaussian image noise; zero keeps generation noise-free.
    pub image_noise: f64,
}

pub const PRESETS: [&str; 3] = ["flat-lane", "crown-lane", "bumps-lane"];

fn standard(height: HeightProfile) -> SynthScene {
    let mut s = standard_flat_placed(height);
    for k in 0..s.obstacles.len() {
        let (bottom, pts) = footprint(&s.obstacles[k]);
        let ground = pts.iter().map(|&(x, y)| height.height(x, y)).fold(f64::NEG_INFINITY, f64::max);
        s.obstacles[k].center[2] += (ground - bottom).max(0.0);
    }
    s
}

/// Bottom height and ground-plane sample points under an obstacle.
fn footprint(ob: &Obstacle) -> (f64, Vec<(f64, f64)>) {
    match ob.shape {
        ObstacleShape::Box { half_size, yaw } => {
            let (s, co) = yaw.sin_cos();
            let mut pts = Vec::new();
            for i in 0..=4 {
                for j in 0..=4 {
                    let lx = half_size[0] * (i as f64 / 2.0 - 1.0);
                    let ly = half_size[1] * (j as f64 / 2.0 - 1.0);
                    pts.push((ob.center[0] + co * lx - s * ly, ob.center[1] + s * lx + co * ly));
                }
            }
            (ob.center[2] - half_size[2], pts)
        }
        ObstacleShape::Ellipsoid { radii } => (ob.center[2] - radii[2], vec![(ob.center[0], ob.center[1])]),
    }
}

fn standard_flat_placed(height: HeightProfile) -> SynthScene {
    let dashed = |y| LaneLine { y, dashed: true };
    let solid = |y| LaneLine { y, dashed: false };
    let bx = |x: f64, y: f64, hs: [f64; 3], yaw: f64, color: [f64; 3]| Obstacle {
        center: [x, y, hs[2]],
        shape: ObstacleShape::Box { half_size: hs, yaw },
        color,
    };
    let el = |x: f64, y: f64, r: [f64; 3], color: [f64; 3]| Obstacle {
        center: [x, y, r[2]],
        shape: ObstacleShape::Ellipsoid { radii: r },
        color,
    };
    SynthScene {
        road: RoadSpec {
            height,
            base_color: [0.34, 0.34, 0.36],
            texture_amplitude: 0.06,
            markings: Markings {
                lines: vec![solid(-5.25), dashed(-1.75), dashed(1.75), solid(5.25)],
                width: 0.3,
                dash_period: 8.0,
                dash_length: 4.0,
                softness: 0.06,
                color: [0.92, 0.92, 0.88],
            },
            extent: None,
            extent_margin: 20.0,
        },
        obstacles: vec![
            bx(6.0, 8.5, [1.2, 1.0, 1.0], 0.2, [0.75, 0.25, 0.2]),
            bx(14.0, -8.5, [1.5, 1.2, 0.8], -0.3, [0.2, 0.45, 0.75]),
            el(21.0, 9.5, [1.3, 1.3, 1.6], [0.25, 0.6, 0.25]),
            bx(27.0, -9.0, [1.0, 1.0, 1.4], 0.5, [0.85, 0.7, 0.2]),
            bx(34.0, 8.8, [1.8, 1.0, 0.9], -0.1, [0.55, 0.3, 0.65]),
            el(41.0, -9.5, [1.5, 1.2, 1.2], [0.3, 0.55, 0.3]),
            bx(47.0, 9.0, [1.2, 1.2, 1.2], 0.0, [0.8, 0.5, 0.35]),
        ],
        sky: SkySpec {
            zenith: [0.32, 0.52, 0.88],
            horizon: [0.78, 0.84, 0.92],
            nadir: [0.6, 0.62, 0.6],
        },
        trajectory: TrajectorySpec {
            route: Route::Straight { length: 39.0 },
            count: 40,
            height: 1.5,
            pitch_deg: 10.0,
            interp_every: 4,
        },
        extrapolation: ExtrapolationSpec {
            offsets: vec![-3.0, 3.0],
            every: 4,
            first: 2,
        },
        camera: CameraSpec {
            width: 64,
            height: 64,
            focal: 40.0,
            near: 0.05,
            far: 500.0,
        },
        light_dir: [0.4, 0.3, 0.85],
        image_noise: 0.0,
    }
}

impl SynthScene {
    pub fn preset(name: &str) -> Result<Self, SynthError> {
        Ok(match name {
            "flat-lane" => standard(HeightProfile::Flat),
            "crown-lane" => standard(HeightProfile::Crown {
                amplitude: 0.25,
                half_width: 7.0,
            }),
            "bumps-lane" => standard(HeightProfile::Bumps {
                amplitude: 0.1,
                wavelength_x: 12.0,
                wavelength_y: 9.0,
            }),
            other => return Err(SynthError::UnknownPreset(other.to_string())),
        })
    }

    pub fn camera(&self) -> Camera {
        let c = &self.camera;
        Camera::centered(c.focal, c.width, c.height, c.near, c.far).expect("validated camera")
    }

    /// Station `s ∈ [0, 1]` along the path: position on the ground and unit
    /// heading.
    fn station(&self, s: f64) -> (Vec3, Vec3) {
        match self.trajectory.route {
            Route::Straight { length } => (Vec3::new(s * length, 0.0, 0.0), Vec3::x()),
            Route::Arc { radius, angle } => {
                let a = s * angle;
                (
                    Vec3::new(radius * a.sin(), radius * (1.0 - a.cos()), 0.0),
                    Vec3::new(a.cos(), a.sin(), 0.0),
                )
            }
        }
    }

    fn pose_at(&self, s: f64, lateral: f64) -> Pose {
        let (p, heading) = self.station(s);
        let left = Vec3::z().cross(&heading);
        let eye = p + left * lateral + Vec3::new(0.0, 0.0, self.trajectory.height);
        let pitch = self.trajectory.pitch_deg.to_radians();
        let dir = heading * pitch.cos() - Vec3::z() * pitch.sin();
        Pose::look_at(eye, eye + dir, Vec3::z())
    }

    fn station_fraction(&self, i: f64) -> f64 {
        let n = self.trajectory.count;
        if n <= 1 {
            0.0
        } else {
            i / (n - 1) as f64
        }
    }

    pub fn train_poses(&self) -> Vec<Pose> {
        (0..self.trajectory.count).map(|i| self.pose_at(self.station_fraction(i as f64), 0.0)).collect()
    }

    pub fn interp_poses(&self) -> Vec<Pose> {
        let n = self.trajectory.count;
        let every = self.trajectory.interp_every.max(1);
        (0..n.saturating_sub(1))
            .step_by(every)
            .map(|i| self.pose_at(self.station_fraction(i as f64 + 0.5), 0.0))
            .collect()
    }

    pub fn extrap_poses(&self) -> Vec<Pose> {
        let e = &self.extrapolation;
        let mut out = Vec::new();
        for i in (e.first..self.trajectory.count).step_by(e.every.max(1)) {
            for &o in &e.offsets {
                out.push(self.pose_at(self.station_fraction(i as f64), o));
            }
        }
        out
    }

    pub fn road_extent(&self) -> Extent2 {
        match self.road.extent {
            Some([x0, x1, y0, y1]) => Extent2::new(x0, x1, y0, y1),
            None => trajectory_extent(&self.train_poses(), self.road.extent_margin),
        }
    }

    pub fn ground_height(&self, x: f64, y: f64) -> f64 {
        self.road.height.height(x, y)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.to_string()));
        let c = &self.camera;
        if Camera::centered(c.focal, c.width, c.height, c.near, c.far).is_err() {
            return bad("camera intrinsics are invalid");
        }
        if self.trajectory.count < 3 {
            return bad("trajectory needs at least 3 views");
        }
        if !(self.trajectory.height > 0.0) {
            return bad("camera height must be positive");
        }
        let m = &self.road.markings;
        if !(m.width > 0.0 && m.softness >= 0.0 && m.dash_period > 0.0 && (0.0..=m.dash_period).contains(&m.dash_length)) {
            return bad("lane marking parameters are inconsistent");
        }
        if let HeightProfile::Crown { half_width, .. } = self.road.height {
            if !(half_width > 0.0) {
                return bad("crown half width must be positive");
            }
        }
        if let HeightProfile::Bumps { wavelength_x, wavelength_y, .. } = self.road.height {
            if !(wavelength_x > 0.0 && wavelength_y > 0.0) {
                return bad("bump wavelengths must be positive");
            }
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            let sizes = match ob.shape {
                ObstacleShape::Box { half_size, .. } => half_size,
                ObstacleShape::Ellipsoid { radii } => radii,
            };
            if sizes.iter().any(|h| !(*h > 0.0)) {
                return Err(SynthError::Invalid(format!("obstacle {i} has a non-positive size")));
            }
            let (bottom, footprint) = footprint(ob);
            let ground = footprint.iter().map(|&(x, y)| self.ground_height(x, y)).fold(f64::NEG_INFINITY, f64::max);
            if bottom < ground - 1e-6 {
                return Err(SynthError::Invalid(format!("obstacle {i} dips below the road surface")));
            }
        }
        let train = self.train_poses();
        for p in self.extrap_poses() {
            let d = train.iter().map(|t| (t.translation - p.translation).norm()).fold(f64::INFINITY, f64::min);
            if d < 0.5 {
                return bad("extrapolated test views must lie off the training lane");
            }
        }
        if !(self.image_noise >= 0.0) {
            return bad("image noise must be non-negative");
        }
        Ok(())
    }

    /// 8-bit quantized oracle render, as stored in a dataset.
    pub fn render(&self, camera: &Camera, pose: &Pose) -> Image {
        self.render_exact(camera, pose).0.quantized()
    }

    /// Renders every view. Images are quantized to 8 bits and depths rounded
    /// to single precision, so the in-memory dataset equals its on-disk form.
    pub fn generate(&self, seed: u64) -> Result<Dataset, SynthError> {
        self.validate()?;
        let camera = self.camera();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.image_noise).map_err(|e| SynthError::Invalid(e.to_string()))?;
        let mut make = |prefix: &str, poses: Vec<Pose>| -> Vec<View> {
            poses
                .into_iter()
                .enumerate()
                .map(|(i, pose)| {
                    let (mut image, mut depth, _) = self.render_exact(&camera, &pose);
                    if self.image_noise > 0.0 {
                        for p in image.data.iter_mut() {
                            for v in p.iter_mut() {
                                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                            }
                        }
                    }
                    depth.data.iter_mut().for_each(|d| *d = *d as f32 as f64);
                    View {
                        id: format!("{prefix}_{i:03}"),
                        pose,
                        image: image.quantized(),
                        depth: Some(depth),
                    }
                })
                .collect()
        };
        let train = make("train", self.train_poses());
        let test_interp = make("interp", self.interp_poses());
        let test_extrap = make("extrap", self.extrap_poses());
        Ok(Dataset {
            camera,
            train,
            test_interp,
            test_extrap,
        })
    }

    /// Ground-truth renderer for oracle fixers.
    pub fn ground_truth_fn(self: &Arc<Self>) -> GroundTruthFn {
        let scene = Arc::clone(self);
        let camera = scene.camera();
        Arc::new(move |pose: &Pose| scene.render(&camera, pose))
    }

    /// RMSE between a road field's elevation and the true height along the
    /// line at `lateral` meters left of the path, sampled every `step`
    /// meters of arc length between the first and last stations.
    pub fn elevation_rmse(&self, field: &RoadField, lateral: f64, step: f64) -> f64 {
        let len = match self.trajectory.route {
            Route::Straight { length } => length,
            Route::Arc { radius, angle } => radius * angle.abs(),
        };
        let n = ((len / step).floor() as usize).max(1);
        let mut se = 0.0;
        for k in 0..=n {
            let (p, heading) = self.station(k as f64 / n as f64);
            let q = p + Vec3::z().cross(&heading) * lateral;
            se += (field.height(q.x, q.y) - self.ground_height(q.x, q.y)).powi(2);
        }
        (se / (n + 1) as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nadir_scene() -> (SynthScene, Camera, Pose) {
        let mut s = SynthScene::preset("flat-lane").unwrap();
        s.obstacles.clear();
        s.road.texture_amplitude = 0.0;
        s.road.markings.lines.clear();
        let cam = Camera::centered(20.0, 16, 16, 0.05, 100.0).unwrap();
        let pose = Pose::look_at(Vec3::new(10.0, 0.0, 5.0), Vec3::new(10.0, 0.0, 0.0), Vec3::x());
        (s, cam, pose)
    }

    #[test]
    fn nadir_view_of_plain_road_is_uniform() {
        let (s, cam, pose) = nadir_scene();
        let (img, depth, _) = s.render_exact(&cam, &pose);
        for p in &img.data {
            assert_eq!(*p, s.road.base_color);
        }
        assert!(depth.data.iter().all(|d| (d - 5.0).abs() < 1e-9));
    }

    #[test]
    fn generation_is_seed_independent_without_noise() {
        let mut s = SynthScene::preset("flat-lane").unwrap();
        s.trajectory.count = 4;
        s.extrapolation.first = 0;
        s.camera.width = 16;
        s.camera.height = 16;
        let a = s.generate(1).unwrap();
        let b = s.generate(2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            SynthScene::preset(p).unwrap().validate().unwrap();
        }
        assert!(matches!(SynthScene::preset("nope"), Err(SynthError::UnknownPreset(_))));
    }

    #[test]
    fn sunken_obstacle_is_rejected() {
        let mut s = SynthScene::preset("flat-lane").unwrap();
        s.obstacles[0].center[2] = 0.2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn dashes_alternate_along_the_lane() {
        let s = SynthScene::preset("flat-lane").unwrap();
        assert!((s.road.marking(2.0, 1.75) - 1.0).abs() < 1e-12);
        assert!(s.road.marking(6.0, 1.75).abs() < 1e-12);
        assert!((s.road.marking(6.0, 5.25) - 1.0).abs() < 1e-12);
        assert!(s.road.marking(2.0, 0.0).abs() < 1e-12);
    }

    #[test]
    fn offset_views_keep_heading() {
        let s = SynthScene::preset("flat-lane").unwrap();
        let train = s.train_poses();
        let ex = s.extrap_poses();
        let t = &train[s.extrapolation.first];
        for p in &ex[..2] {
            assert!((p.forward() - t.forward()).norm() < 1e-12);
            assert!(((p.translation - t.translation).norm() - 3.0).abs() < 1e-12);
        }
    }
}
