//! Optimization loop: photometric reconstruction on real views, pseudo
//! ground truth at progressively extrapolated poses, pruning and periodic
//! held-out evaluation.

mod adam;
mod loss;
mod plugins;
mod schedule;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{AdamParams, Moments};
pub use loss::{pseudo_loss, reconstruction_loss, PseudoWeights, ReconWeights};
pub use plugins::{
    apply_post_process, box_blur, BlurOracleFixer, FixError, Fixer, GroundTruthFn, HistogramMatch, IdentityFixer,
    IdentityPost, OracleFixer, PostProcess,
};
pub use schedule::{injection_iterations, nearest, schedule_pseudo_poses};

use crate::dataset::{Dataset, View};
use crate::geometry::{Camera, Pose};
use crate::img::Image;
use crate::metrics::{evaluate, PerceptualDistance, ShapeMismatch};
use crate::roadfield::RoadSettings;
use crate::scene::{Scene, SceneError, SceneRenderer};
use crate::splat::{layout, prune_by_opacity, Gaussian3D, RasterSettings, PARAM_COUNT};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration} on view {view}{}", dump.as_ref().map(|d| format!(" (dump: {})", d.display())).unwrap_or_default())]
    NonFinite {
        iteration: usize,
        view: String,
        dump: Option<PathBuf>,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the trajectory radius.
    pub position: f64,
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub sh: f64,
    /// Road color grid and head.
    pub road_grid: f64,
    /// Road elevation and slope grids and heads.
    pub road_geometry: f64,
    /// Iterations during which the road elevation and slope stay fixed.
    pub road_geometry_warmup: usize,
    pub road_s: f64,
    pub sky: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            sh: 2.5e-3 / 20.0,
            road_grid: 1e-2,
            road_geometry: 1e-4,
            road_geometry_warmup: 1000,
            road_s: 1e-3,
            sky: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    pub enabled: bool,
    /// First injection as a fraction of the total iterations.
    pub start: f64,
    /// Spacing between injections as a fraction of the total iterations.
    pub interval: f64,
    /// Interpolation rounds from the nearest training pose to the target.
    pub steps: usize,
    /// Real samples drawn per pseudo sample once the pool is nonempty.
    pub real_per_pseudo: usize,
    pub weights: PseudoWeights,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            start: 0.4,
            interval: 0.1,
            steps: 4,
            real_per_pseudo: 2,
            weights: PseudoWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub lr: LearningRates,
    pub adam: AdamParams,
    pub recon: ReconWeights,
    pub pseudo: PseudoConfig,
    pub prune_interval: usize,
    pub prune_opacity: f64,
    /// Held-out evaluation every this many iterations (0: only at the end).
    pub eval_interval: usize,
    pub raster: RasterSettings,
    pub road_render: RoadSettings,
    /// Where to write the offending view when the loss goes non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            seed: 0,
            lr: LearningRates::default(),
            adam: AdamParams::default(),
            recon: ReconWeights::default(),
            pseudo: PseudoConfig::default(),
            prune_interval: 100,
            prune_opacity: 0.005,
            eval_interval: 500,
            raster: RasterSettings::default(),
            road_render: RoadSettings::default(),
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let lr = &self.lr;
        let rates = [
            lr.position,
            lr.position_final,
            lr.scale,
            lr.rotation,
            lr.opacity,
            lr.color,
            lr.sh,
            lr.road_grid,
            lr.road_geometry,
            lr.road_s,
            lr.sky,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(TrainError::Config("learning rates must be finite and non-negative".into()));
        }
        let w = [self.recon.l1, self.recon.ssim, self.pseudo.weights.perceptual, self.pseudo.weights.l1];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(TrainError::Config("loss weights must be finite and non-negative".into()));
        }
        if self.pseudo.weights.l1 >= self.pseudo.weights.perceptual {
            return Err(TrainError::Config("pseudo-GT L1 weight must stay below the perceptual weight".into()));
        }
        if self.pseudo.steps == 0 {
            return Err(TrainError::Config("pseudo.steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pseudo.start) || !(self.pseudo.interval > 0.0) {
            return Err(TrainError::Config("pseudo.start must lie in [0, 1] and pseudo.interval be positive".into()));
        }
        if !(0.0..1.0).contains(&self.prune_opacity) {
            return Err(TrainError::Config("prune_opacity must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Real,
    Pseudo,
}

/// A refined render at a schedule pose, used with the pseudo-GT loss.
#[derive(Clone, Debug)]
pub struct PseudoSample {
    pub pose: Pose,
    pub image: Image,
    pub round: usize,
    pub target: usize,
}

impl PseudoSample {
    pub fn kind(&self) -> SampleKind {
        SampleKind::Pseudo
    }
}

/// Pseudo samples keyed by `(round, target)`; inserting an existing key
/// replaces it.
#[derive(Clone, Debug, Default)]
pub struct PseudoPool {
    samples: BTreeMap<(usize, usize), PseudoSample>,
}

impl PseudoPool {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn insert(&mut self, s: PseudoSample) {
        self.samples.insert((s.round, s.target), s);
    }

    pub fn get(&self, k: usize) -> Option<&PseudoSample> {
        self.samples.values().nth(k)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PseudoSample> {
        self.samples.values()
    }
}

/// Renders `poses` and refines each render with `fixer`. Fixer failures
/// skip the sample.
pub fn generate_pseudo_gt(
    scene: &Scene,
    fixer: &dyn Fixer,
    poses: &[Pose],
    round: usize,
    camera: &Camera,
    cfg: &TrainConfig,
    pool: &mut PseudoPool,
) -> usize {
    let mut added = 0;
    for (target, pose) in poses.iter().enumerate() {
        let render = crate::scene::render(scene, camera, pose, cfg.raster, cfg.road_render).image;
        match fixer.fix(&render, pose) {
            Ok(image) => {
                pool.insert(PseudoSample {
                    pose: *pose,
                    image,
                    round,
                    target,
                });
                added += 1;
            }
            Err(e) => warn!("pseudo-GT round {round} target {target} skipped: {e}"),
        }
    }
    added
}

/// Pluggable pieces of the loop.
pub struct Plugins<'a> {
    pub fixer: &'a dyn Fixer,
    pub perceptual: &'a dyn PerceptualDistance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub loss: f64,
    pub psnr_interp: f64,
    pub psnr_extrap: f64,
    pub d_perc_extrap: f64,
    pub gaussian_count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub rows: Vec<MetricRow>,
    pub losses: Vec<f64>,
    pub kinds: Vec<SampleKind>,
    pub real_steps: usize,
    pub pseudo_steps: usize,
    pub pseudo_pool: usize,
}

pub const CSV_HEADER: [&str; 6] = ["iteration", "loss", "psnr_interp", "psnr_extrap", "d_perc_extrap", "gaussian_count"];

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).unwrap();
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                r.loss.to_string(),
                r.psnr_interp.to_string(),
                r.psnr_extrap.to_string(),
                r.d_perc_extrap.to_string(),
                r.gaussian_count.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), crate::io::IoError> {
        std::fs::write(path, self.to_csv()).map_err(crate::io::fs_err(path))
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }
}

/// Mean metrics of the scene over a set of views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub d_perc: f64,
}

pub fn evaluate_views(
    scene: &Scene,
    data: &Dataset,
    views: &[View],
    raster: RasterSettings,
    road: RoadSettings,
    post: Option<&dyn PostProcess>,
) -> Result<Option<SetMetrics>, ShapeMismatch> {
    if views.is_empty() {
        return Ok(None);
    }
    let mut acc = [0.0; 3];
    for v in views {
        let mut img = crate::scene::render(scene, &data.camera, &v.pose, raster, road).image;
        if let Some(p) = post {
            img = p.apply(&img);
        }
        let m = evaluate(&img, &v.image)?;
        acc[0] += m.psnr.min(100.0);
        acc[1] += m.ssim;
        acc[2] += m.d_perc;
    }
    let n = views.len() as f64;
    Ok(Some(SetMetrics {
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        d_perc: acc[2] / n,
    }))
}

/// Radius of the training trajectory around its centroid, used to scale
/// position learning rates.
pub fn trajectory_radius(poses: &[Pose]) -> f64 {
    if poses.is_empty() {
        return 1.0;
    }
    let c = poses.iter().map(|p| p.translation).sum::<crate::geometry::Vec3>() / poses.len() as f64;
    let r = poses.iter().map(|p| (p.translation - c).norm()).fold(0.0, f64::max);
    (r * 1.1).max(1.0)
}

fn gaussian_lr(lr: &LearningRates, pos: f64, k: usize) -> f64 {
    match k {
        k if k < layout::LOG_SCALE => pos,
        k if k < layout::ROTATION => lr.scale,
        k if k < layout::OPACITY => lr.rotation,
        layout::OPACITY => lr.opacity,
        k if k < layout::SH1 => lr.color,
        _ => lr.sh,
    }
}

fn flatten_gaussians(gs: &[Gaussian3D]) -> Vec<f64> {
    gs.iter().flat_map(|g| g.to_params()).collect()
}

fn assign_gaussians(gs: &mut [Gaussian3D], flat: &[f64]) {
    for (g, p) in gs.iter_mut().zip(flat.chunks_exact(PARAM_COUNT)) {
        *g = Gaussian3D::from_params(p.try_into().unwrap());
        g.normalize_rotation();
    }
}

/// Optimizer state that survives across [`train`] calls on the same scene.
struct Optim {
    gaussians: Moments,
    road: Moments,
    sky: Moments,
    t: u64,
}

impl Optim {
    fn new(scene: &Scene) -> Self {
        Self {
            gaussians: Moments::new(scene.gaussians.len() * PARAM_COUNT),
            road: Moments::new(scene.road.as_ref().map_or(0, |r| r.param_count())),
            sky: Moments::new(scene.sky.texture.len() * 3),
            t: 0,
        }
    }
}

fn dump_view(dir: &Path, iteration: usize, view: &str, out: &crate::compositor::RenderOutput) -> Option<PathBuf> {
    let stem = format!("nonfinite_{iteration:06}_{view}");
    match out.dump_layers(dir, &stem) {
        Ok(()) => Some(dir.join(stem)),
        Err(e) => {
            warn!("could not write diagnostic dump: {e}");
            None
        }
    }
}

/// Optimizes `scene` on `data`. Real views use the reconstruction loss,
/// pseudo samples the pseudo-GT loss; pseudo-GT is injected at the
/// scheduled iterations when enabled, targeting the extrapolated test poses.
pub fn train(scene: &mut Scene, data: &Dataset, cfg: &TrainConfig, plugins: &Plugins) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::Config("dataset has no training views".into()));
    }
    let mut report = TrainReport::default();
    let n_iter = cfg.iterations;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optim = Optim::new(scene);
    let mut renderer = SceneRenderer::new(cfg.raster, cfg.road_render);
    let radius = trajectory_radius(&data.train_poses());
    let train_poses = data.train_poses();
    let targets: Vec<Pose> = data.test_extrap.iter().map(|v| v.pose).collect();
    let injections = if cfg.pseudo.enabled && !targets.is_empty() {
        injection_iterations(n_iter, cfg.pseudo.start, cfg.pseudo.interval)
    } else {
        Vec::new()
    };
    let mut pool = PseudoPool::default();
    let mut order: Vec<usize> = Vec::new();
    let mut pseudo_cursor = 0usize;
    let mut interval_loss = (0.0, 0usize);
    let cycle = cfg.pseudo.real_per_pseudo + 1;

    for it in 0..n_iter {
        if let Some(k) = injections.iter().position(|&i| i == it) {
            let round = (k + 1).min(cfg.pseudo.steps);
            let poses = schedule_pseudo_poses(&train_poses, &targets, cfg.pseudo.steps, round);
            let added = generate_pseudo_gt(scene, plugins.fixer, &poses, round, &data.camera, cfg, &mut pool);
            info!("iteration {it}: pseudo-GT round {round} added {added} samples (pool {})", pool.len());
        }

        let kind = if !pool.is_empty() && it % cycle == cycle - 1 {
            SampleKind::Pseudo
        } else {
            SampleKind::Real
        };
        let (pose, target, name) = match kind {
            SampleKind::Real => {
                if order.is_empty() {
                    order = (0..data.train.len()).collect();
                    order.shuffle(&mut rng);
                }
                let v = &data.train[order.pop().unwrap()];
                (v.pose, &v.image, v.id.clone())
            }
            SampleKind::Pseudo => {
                let s = pool.get(pseudo_cursor % pool.len()).unwrap();
                pseudo_cursor += 1;
                (s.pose, &s.image, format!("pseudo_r{}_t{}", s.round, s.target))
            }
        };

        let out = renderer.forward(scene, &data.camera, &pose);
        let (loss, upstream) = match kind {
            SampleKind::Real => reconstruction_loss(&out.image, target, &cfg.recon)?,
            SampleKind::Pseudo => pseudo_loss(&out.image, target, &cfg.pseudo.weights, plugins.perceptual)?,
        };
        if !loss.is_finite() {
            let dump = cfg.dump_dir.as_deref().and_then(|d| dump_view(d, it, &name, &out));
            return Err(TrainError::NonFinite {
                iteration: it,
                view: name,
                dump,
            });
        }
        match kind {
            SampleKind::Real => report.real_steps += 1,
            SampleKind::Pseudo => report.pseudo_steps += 1,
        }
        report.kinds.push(kind);
        report.losses.push(loss);
        interval_loss.0 += loss;
        interval_loss.1 += 1;

        let grad = renderer.backward(scene, &upstream)?;
        optim.t += 1;
        let t = optim.t;
        let progress = if n_iter > 1 { it as f64 / (n_iter - 1) as f64 } else { 0.0 };
        let pos_lr = radius * (cfg.lr.position.ln() * (1.0 - progress) + cfg.lr.position_final.max(1e-30).ln() * progress).exp();
        let pos_lr = if cfg.lr.position == 0.0 { 0.0 } else { pos_lr };

        if !scene.gaussians.is_empty() {
            let mut p = flatten_gaussians(&scene.gaussians);
            let g: Vec<f64> = grad.gaussians.iter().flatten().copied().collect();
            let lr = &cfg.lr;
            optim.gaussians.step(&cfg.adam, t, &mut p, &g, |i| gaussian_lr(lr, pos_lr, i % PARAM_COUNT));
            assign_gaussians(&mut scene.gaussians, &p);
        }
        if let (Some(field), Some(rg)) = (scene.road.as_mut(), grad.road.as_ref()) {
            let lr = &cfg.lr;
            let geo = if it < lr.road_geometry_warmup { 0.0 } else { lr.road_geometry };
            let mut offset = 0;
            let grids = [
                (&mut field.elevation, &rg.elevation, geo),
                (&mut field.slope, &rg.slope, geo),
                (&mut field.color, &rg.color, lr.road_grid),
            ];
            for (grid, g, rate) in grids {
                for (p, gp) in grid.params_mut().into_iter().zip(g.params()) {
                    if rate > 0.0 {
                        optim.road.step_range(&cfg.adam, t, offset, p, gp, rate);
                    }
                    offset += p.len();
                }
            }
            let mut log_s = [field.log_s];
            optim.road.step_range(&cfg.adam, t, offset, &mut log_s, &[rg.log_s], lr.road_s);
            field.log_s = log_s[0];
        }
        {
            let mut p: Vec<f64> = scene.sky.texture.data.iter().flatten().copied().collect();
            let g: Vec<f64> = grad.sky.iter().flatten().copied().collect();
            let ls = cfg.lr.sky;
            optim.sky.step(&cfg.adam, t, &mut p, &g, |_| ls);
            for (texel, c) in scene.sky.texture.data.iter_mut().zip(p.chunks_exact(3)) {
                *texel = [c[0], c[1], c[2]];
            }
        }

        if cfg.prune_interval > 0 && (it + 1) % cfg.prune_interval == 0 && !scene.gaussians.is_empty() {
            let keep = prune_by_opacity(&mut scene.gaussians, cfg.prune_opacity);
            optim.gaussians.retain_blocks(PARAM_COUNT, &keep);
        }

        let last = it + 1 == n_iter;
        if last || (cfg.eval_interval > 0 && (it + 1) % cfg.eval_interval == 0) {
            let row = eval_row(scene, data, cfg, it + 1, interval_loss.0 / interval_loss.1.max(1) as f64)?;
            info!(
                "iteration {}: loss {:.5} psnr interp {:.2} extrap {:.2} d_perc {:.4} gaussians {}",
                row.iteration, row.loss, row.psnr_interp, row.psnr_extrap, row.d_perc_extrap, row.gaussian_count
            );
            report.rows.push(row);
            interval_loss = (0.0, 0);
        }
    }
    if n_iter == 0 {
        report.rows.push(eval_row(scene, data, cfg, 0, f64::NAN)?);
    }
    report.pseudo_pool = pool.len();
    Ok(report)
}

fn eval_row(scene: &Scene, data: &Dataset, cfg: &TrainConfig, iteration: usize, loss: f64) -> Result<MetricRow, TrainError> {
    let interp = evaluate_views(scene, data, &data.test_interp, cfg.raster, cfg.road_render, None)?;
    let extrap = evaluate_views(scene, data, &data.test_extrap, cfg.raster, cfg.road_render, None)?;
    Ok(MetricRow {
        iteration,
        loss,
        psnr_interp: interp.map_or(f64::NAN, |m| m.psnr),
        psnr_extrap: extrap.map_or(f64::NAN, |m| m.psnr),
        d_perc_extrap: extrap.map_or(f64::NAN, |m| m.d_perc),
        gaussian_count: scene.gaussians.len(),
    })
}
