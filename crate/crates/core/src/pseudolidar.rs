//! Scene initialization from per-view depth: scale recovery by pose
//! alignment, unprojection with the true poses, voxel aggregation, and one
//! Gaussian per aggregated point.

use std::collections::BTreeMap;
use std::num::NonZero;
use std::path::{Path, PathBuf};

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::geometry::{fit_similarity, read_pose_file, Camera, GeometryError, Pose, Similarity, Transform, Vec3};
use crate::img::{Image, Plane};
use crate::io::{read_pfm_gray, IoError, PlyTable, PlyType};
use crate::roadfield::{fit_ground_plane, Extent2, RoadConfig, RoadField};
use crate::scene::Scene;
use crate::sky::{SkyMap, DEFAULT_HEIGHT, DEFAULT_WIDTH};
use crate::splat::Gaussian3D;

#[derive(Debug, Error)]
pub enum InitError {
    #[error("pose alignment failed: {0}")]
    Alignment(#[from] GeometryError),
    #[error("no valid depth in any view")]
    NoValidDepth,
    #[error("point cloud has {have} points, need at least {need}")]
    TooFewPoints { have: usize, need: usize },
    #[error("depth provider: {0}")]
    Provider(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Per-view depth (camera z, provider units) and a pose estimate in the
/// provider's own frame.
pub trait DepthProvider: Send + Sync {
    fn view_count(&self) -> usize;
    fn depth(&self, view: usize) -> Result<Plane, InitError>;
    fn pose(&self, view: usize) -> Pose;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    /// Global scale applied to depths and pose translations.
    pub scale_distortion: f64,
    /// Additive Gaussian depth noise (meters, before distortion).
    pub noise_sigma: f64,
    /// Additive Gaussian noise on reported camera centers (meters).
    pub pose_noise_sigma: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            scale_distortion: 1.0,
            noise_sigma: 0.0,
            pose_noise_sigma: 0.0,
        }
    }
}

/// Wraps true depth and poses, reported in a scaled and rotated frame.
pub struct OracleDepth {
    depths: Vec<Plane>,
    poses: Vec<Pose>,
}

impl OracleDepth {
    pub fn new(depths: Vec<Plane>, gt_poses: &[Pose], settings: &OracleSettings, seed: u64) -> Self {
        assert_eq!(depths.len(), gt_poses.len());
        let s = settings.scale_distortion;
        let frame = Similarity::new(
            s,
            nalgebra::UnitQuaternion::from_euler_angles(0.1, -0.2, 0.7),
            Vec3::new(3.0, -1.0, 0.5),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, settings.noise_sigma.max(0.0)).unwrap();
        let pose_noise = Normal::new(0.0, settings.pose_noise_sigma.max(0.0)).unwrap();
        let depths = depths
            .into_iter()
            .map(|mut d| {
                for v in d.data.iter_mut() {
                    if *v > 0.0 && v.is_finite() {
                        let n = if settings.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        *v = (*v + n) * s;
                    }
                }
                d
            })
            .collect();
        let poses = gt_poses
            .iter()
            .map(|p| {
                let mut q = *p;
                if settings.pose_noise_sigma > 0.0 {
                    q.translation += Vec3::from_fn(|_, _| pose_noise.sample(&mut rng));
                }
                frame.transform_pose(&q)
            })
            .collect();
        Self { depths, poses }
    }

    /// Oracle over the training views of a dataset with stored depth.
    pub fn from_dataset(data: &Dataset, settings: &OracleSettings, seed: u64) -> Result<Self, InitError> {
        let depths = data
            .train
            .iter()
            .map(|v| v.depth.clone().ok_or_else(|| InitError::Provider(format!("view {} has no depth map", v.id))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(depths, &data.train_poses(), settings, seed))
    }
}

impl DepthProvider for OracleDepth {
    fn view_count(&self) -> usize {
        self.depths.len()
    }

    fn depth(&self, view: usize) -> Result<Plane, InitError> {
        Ok(self.depths[view].clone())
    }

    fn pose(&self, view: usize) -> Pose {
        self.poses[view]
    }
}

/// Precomputed maps: `<dir>/depth/<id>.pfm` plus `<dir>/poses.txt` in the
/// provider frame.
pub struct FileDepth {
    dir: PathBuf,
    ids: Vec<String>,
    poses: Vec<Pose>,
}

impl FileDepth {
    pub fn open(dir: &Path, ids: &[String]) -> Result<Self, InitError> {
        let records = read_pose_file(&dir.join("poses.txt"))?;
        let poses = ids
            .iter()
            .map(|id| {
                records
                    .iter()
                    .find(|r| &r.id == id)
                    .map(|r| r.pose)
                    .ok_or_else(|| InitError::Provider(format!("no provider pose for view {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            ids: ids.to_vec(),
            poses,
        })
    }
}

impl DepthProvider for FileDepth {
    fn view_count(&self) -> usize {
        self.ids.len()
    }

    fn depth(&self, view: usize) -> Result<Plane, InitError> {
        Ok(read_pfm_gray(&self.dir.join("depth").join(format!("{}.pfm", self.ids[view])))?)
    }

    fn pose(&self, view: usize) -> Pose {
        self.poses[view]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_ply(&self, path: &Path) -> Result<(), IoError> {
        let mut columns: Vec<(String, PlyType)> = ["x", "y", "z"].iter().map(|n| (n.to_string(), PlyType::Float)).collect();
        columns.extend(["red", "green", "blue"].iter().map(|n| (n.to_string(), PlyType::UChar)));
        let rows = self
            .points
            .iter()
            .zip(&self.colors)
            .map(|(p, c)| {
                let mut r = vec![p.x, p.y, p.z];
                r.extend(c.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round()));
                r
            })
            .collect();
        PlyTable { columns, rows }.write(path)
    }
}

/// Scale of the similarity taking provider poses onto true poses. Unlike a
/// full alignment this accepts collinear camera centers.
pub fn recover_scale(provider: &[Pose], gt: &[Pose]) -> Result<f64, InitError> {
    if provider.len() < 2 || provider.len() != gt.len() {
        return Err(GeometryError::Alignment(format!(
            "need at least 2 matched pose pairs, got {} and {}",
            provider.len(),
            gt.len()
        ))
        .into());
    }
    let src: Vec<Vec3> = provider.iter().map(|p| p.translation).collect();
    let dst: Vec<Vec3> = gt.iter().map(|p| p.translation).collect();
    Ok(fit_similarity(&src, &dst)?.sim.scale)
}

/// Depth validity window, in meters after scale correction.
pub const MAX_DEPTH: f64 = 200.0;

/// Unprojects every `stride`-th pixel of every view with scale-corrected
/// depth and the true pose, then voxel-averages (`voxel <= 0` keeps all
/// points).
pub fn build_point_cloud(
    provider: &dyn DepthProvider,
    camera: &Camera,
    gt_poses: &[Pose],
    images: &[&Image],
    stride: usize,
    voxel: f64,
) -> Result<PointCloud, InitError> {
    let n = provider.view_count();
    if n == 0 || gt_poses.len() != n || images.len() != n {
        return Err(InitError::Provider(format!(
            "provider has {n} views, {} poses and {} images were given",
            gt_poses.len(),
            images.len()
        )));
    }
    let provider_poses: Vec<Pose> = (0..n).map(|i| provider.pose(i)).collect();
    let scale = if n >= 2 { recover_scale(&provider_poses, gt_poses)? } else { 1.0 };
    let stride = stride.max(1);
    let per_view: Vec<Result<PointCloud, InitError>> = (0..n)
        .into_par_iter()
        .map(|v| {
            let depth = provider.depth(v)?;
            let mut pc = PointCloud::default();
            for y in (0..camera.height as usize).step_by(stride) {
                for x in (0..camera.width as usize).step_by(stride) {
                    let d = depth.at(x, y) * scale;
                    if !(d > camera.near && d < MAX_DEPTH) {
                        continue;
                    }
                    let p_cam = camera.unproject_dir([x as f64 + 0.5, y as f64 + 0.5]) * d;
                    pc.points.push(gt_poses[v].transform_point(&p_cam));
                    pc.colors.push(images[v].at(x, y));
                }
            }
            Ok(pc)
        })
        .collect();
    let mut all = PointCloud::default();
    for pc in per_view {
        let pc = pc?;
        all.points.extend(pc.points);
        all.colors.extend(pc.colors);
    }
    if all.is_empty() {
        return Err(InitError::NoValidDepth);
    }
    Ok(if voxel > 0.0 { voxel_downsample(&all, voxel) } else { all })
}

/// Centroid and mean color per occupied voxel, in voxel-key order.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    let mut cells: BTreeMap<[i64; 3], (Vec3, [f64; 3], usize)> = BTreeMap::new();
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let key = [0, 1, 2].map(|k| (p[k] / voxel).floor() as i64);
        let e = cells.entry(key).or_insert((Vec3::zeros(), [0.0; 3], 0));
        e.0 += p;
        for ch in 0..3 {
            e.1[ch] += c[ch];
        }
        e.2 += 1;
    }
    let mut out = PointCloud::default();
    for (_, (p, c, n)) in cells {
        let n = n as f64;
        out.points.push(p / n);
        out.colors.push(c.map(|v| v / n));
    }
    out
}

pub const SCALE_FLOOR: f64 = 1e-4;
pub const INIT_OPACITY: f64 = 0.1;

/// One isotropic Gaussian per point, sized by the mean distance to its `k`
/// nearest neighbors.
pub fn init_gaussians(cloud: &PointCloud, k: usize) -> Result<Vec<Gaussian3D>, InitError> {
    let k = k.max(1);
    if cloud.len() < k + 1 {
        return Err(InitError::TooFewPoints {
            have: cloud.len(),
            need: k + 1,
        });
    }
    let entries: Vec<[f64; 3]> = cloud.points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&entries).expect("finite points");
    let q = NonZero::new(k + 1).unwrap();
    Ok(cloud
        .points
        .par_iter()
        .zip(&cloud.colors)
        .map(|(p, c)| {
            let nn = tree.query(&[p.x, p.y, p.z]).nearest_n::<SquaredEuclidean<f64>>(q).execute();
            // The query point itself is among the results at distance zero.
            let mut d: Vec<f64> = nn.iter().map(|r| r.distance.max(0.0).sqrt()).collect();
            d.sort_by(f64::total_cmp);
            let mean = d.iter().skip(1).sum::<f64>() / k as f64;
            Gaussian3D::isotropic(*p, mean.max(SCALE_FLOOR), INIT_OPACITY, *c)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Oracle,
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplatInit {
    /// Gaussians from the pseudo-LiDAR cloud.
    Lidar,
    /// Uniformly random Gaussians in the scene bounds.
    Random,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadInit {
    pub enabled: bool,
    pub field: RoadConfig,
    /// Explicit `[x0, x1, y0, y1]`; otherwise the trajectory bounds grown by
    /// `extent_margin`.
    pub extent: Option<[f64; 4]>,
    pub extent_margin: f64,
    /// Ground height prior below the cameras when no points are available.
    pub camera_height: f64,
    /// Points within this height of the ground plane count as road.
    pub ground_tolerance: f64,
    /// Fraction of lowest points used for the initial plane.
    pub ground_fraction: f64,
}

impl Default for RoadInit {
    fn default() -> Self {
        Self {
            enabled: true,
            field: RoadConfig::default(),
            extent: None,
            extent_margin: 20.0,
            camera_height: 1.5,
            ground_tolerance: 0.5,
            ground_fraction: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub provider: ProviderKind,
    pub oracle: OracleSettings,
    /// Directory for the `file` provider.
    pub depth_dir: Option<PathBuf>,
    pub splats: SplatInit,
    pub stride: usize,
    pub voxel: f64,
    pub k_neighbors: usize,
    pub random_count: usize,
    pub road: RoadInit,
    pub sky_width: usize,
    pub sky_height: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Oracle,
            oracle: OracleSettings::default(),
            depth_dir: None,
            splats: SplatInit::Lidar,
            stride: 1,
            voxel: 0.1,
            k_neighbors: 3,
            random_count: 4000,
            road: RoadInit::default(),
            sky_width: DEFAULT_WIDTH,
            sky_height: DEFAULT_HEIGHT,
        }
    }
}

/// What initialization produced besides the scene.
#[derive(Clone, Debug, Default)]
pub struct InitSummary {
    pub cloud: Option<PointCloud>,
    pub recovered_scale: Option<f64>,
    pub road_points: usize,
}

pub fn trajectory_extent(poses: &[Pose], margin: f64) -> Extent2 {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in poses {
        x0 = x0.min(p.translation.x);
        x1 = x1.max(p.translation.x);
        y0 = y0.min(p.translation.y);
        y1 = y1.max(p.translation.y);
    }
    Extent2::new(x0 - margin, x1 + margin, y0 - margin, y1 + margin)
}

fn mean_camera_z(poses: &[Pose]) -> f64 {
    poses.iter().map(|p| p.translation.z).sum::<f64>() / poses.len().max(1) as f64
}

/// Mean color over training pixels without valid depth; `None` if every
/// pixel had depth.
fn background_color(provider: &dyn DepthProvider, images: &[&Image], scale: f64, near: f64) -> Result<Option<[f64; 3]>, InitError> {
    let mut acc = [0.0; 3];
    let mut n = 0usize;
    for (v, img) in images.iter().enumerate() {
        let d = provider.depth(v)?;
        for (k, &z) in d.data.iter().enumerate() {
            let z = z * scale;
            if !(z > near && z < MAX_DEPTH) {
                for ch in 0..3 {
                    acc[ch] += img.data[k][ch];
                }
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| acc.map(|v| v / n as f64)))
}

/// Uniform random Gaussians inside an axis-aligned box.
pub fn random_gaussians(lo: Vec3, hi: Vec3, count: usize, k: usize, seed: u64) -> Result<Vec<Gaussian3D>, InitError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = PointCloud::default();
    for _ in 0..count {
        cloud.points.push(Vec3::from_fn(|i, _| rng.random_range(lo[i]..=hi[i])));
        cloud.colors.push([rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]);
    }
    init_gaussians(&cloud, k)
}

fn make_provider(data: &Dataset, cfg: &InitConfig, seed: u64) -> Result<Box<dyn DepthProvider>, InitError> {
    Ok(match cfg.provider {
        ProviderKind::Oracle => Box::new(OracleDepth::from_dataset(data, &cfg.oracle, seed)?),
        ProviderKind::File => {
            let dir = cfg
                .depth_dir
                .as_ref()
                .ok_or_else(|| InitError::Provider("the file provider needs init.depth_dir".into()))?;
            let ids: Vec<String> = data.train.iter().map(|v| v.id.clone()).collect();
            Box::new(FileDepth::open(dir, &ids)?)
        }
    })
}

/// Builds the initial scene: splats (from the cloud, random, or none), the
/// road field fitted to ground points or placed below the cameras, and a
/// uniform sky from background pixels.
pub fn initialize_scene(data: &Dataset, cfg: &InitConfig, seed: u64) -> Result<(Scene, InitSummary), InitError> {
    let poses = data.train_poses();
    let images: Vec<&Image> = data.train.iter().map(|v| &v.image).collect();
    let mut summary = InitSummary::default();

    let needs_cloud = cfg.splats == SplatInit::Lidar;
    let provider = if needs_cloud { Some(make_provider(data, cfg, seed)?) } else { None };
    let mut cloud = None;
    let mut scale = 1.0;
    if let Some(p) = provider.as_deref() {
        let provider_poses: Vec<Pose> = (0..p.view_count()).map(|i| p.pose(i)).collect();
        scale = recover_scale(&provider_poses, &poses)?;
        summary.recovered_scale = Some(scale);
        cloud = Some(build_point_cloud(p, &data.camera, &poses, &images, cfg.stride, cfg.voxel)?);
    }

    let extent = match cfg.road.extent {
        Some([x0, x1, y0, y1]) => Extent2::new(x0, x1, y0, y1),
        None => trajectory_extent(&poses, cfg.road.extent_margin),
    };
    let ground_z = mean_camera_z(&poses) - cfg.road.camera_height;

    let mut road = None;
    let mut splat_cloud = cloud.clone();
    if cfg.road.enabled {
        let mut field = RoadField::new(extent, &cfg.road.field);
        field.set_plane([ground_z, 0.0, 0.0]);
        let mut road_color = [0.35; 3];
        if let Some(c) = &cloud {
            let inside: Vec<usize> = (0..c.len()).filter(|&i| extent.contains(c.points[i].x, c.points[i].y)).collect();
            let pts: Vec<Vec3> = inside.iter().map(|&i| c.points[i]).collect();
            if let Some(plane) = fit_ground_plane(&pts, cfg.road.ground_fraction) {
                let near_plane = |p: &Vec3| (p.z - (plane[0] + plane[1] * p.x + plane[2] * p.y)).abs() < cfg.road.ground_tolerance;
                let ground: Vec<Vec3> = pts.iter().filter(|p| near_plane(p)).copied().collect();
                field.fit_elevation(&ground, 1.0);
                // Second pass against the fitted surface drops obstacle bases.
                let tight = cfg.road.ground_tolerance.min(0.15);
                let is_road = |p: &Vec3| (p.z - field.height(p.x, p.y)).abs() < tight;
                let ground: Vec<Vec3> = ground.iter().filter(|p| is_road(p)).copied().collect();
                field.fit_elevation(&ground, 1.0);
                let mut keep = PointCloud::default();
                let mut acc = [0.0; 3];
                let mut n_road = 0usize;
                for i in 0..c.len() {
                    let p = c.points[i];
                    let on_road = extent.contains(p.x, p.y) && (p.z - field.height(p.x, p.y)).abs() < tight;
                    if on_road {
                        for ch in 0..3 {
                            acc[ch] += c.colors[i][ch];
                        }
                        n_road += 1;
                    } else {
                        keep.points.push(p);
                        keep.colors.push(c.colors[i]);
                    }
                }
                if n_road > 0 {
                    road_color = acc.map(|v| v / n_road as f64);
                }
                summary.road_points = n_road;
                splat_cloud = Some(keep);
            }
        }
        field.set_uniform_color(road_color);
        road = Some(field);
    }

    let gaussians = match cfg.splats {
        SplatInit::None => Vec::new(),
        SplatInit::Lidar => {
            let c = splat_cloud.as_ref().expect("cloud built for lidar init");
            if c.len() > cfg.k_neighbors {
                init_gaussians(c, cfg.k_neighbors)?
            } else {
                Vec::new()
            }
        }
        SplatInit::Random => {
            let lo = Vec3::new(extent.x0, extent.y0, ground_z - 0.5);
            let hi = Vec3::new(extent.x1, extent.y1, mean_camera_z(&poses) + 3.0);
            random_gaussians(lo, hi, cfg.random_count, cfg.k_neighbors, seed ^ 0x5eed)?
        }
    };

    let sky_color = match provider.as_deref() {
        Some(p) => background_color(p, &images, scale, data.camera.near)?,
        None => None,
    };
    let sky = match sky_color {
        Some(c) => SkyMap::new(cfg.sky_width, cfg.sky_height, c),
        None => SkyMap::init_from_top_rows(cfg.sky_width, cfg.sky_height, &images, 4),
    };
    summary.cloud = cloud;
    Ok((Scene { gaussians, road, sky }, summary))
}
