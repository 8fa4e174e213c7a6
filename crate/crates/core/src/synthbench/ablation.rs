//! Step-by-step ablation on a synthetic benchmark scene.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::SynthScene;
use crate::dataset::{Dataset, View};
use crate::img::Image;
use crate::io::IoError;
use crate::metrics::MultiScaleSsim;
use crate::pseudolidar::{initialize_scene, InitConfig, SplatInit};
use crate::scene::Scene;
use crate::trainer::{evaluate_views, train, HistogramMatch, OracleFixer, Plugins, PostProcess, TrainConfig, TrainReport};

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_MD: &str = "ablation.md";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub init: InitConfig,
    pub seed: u64,
    /// Appearance change of the shifted test log: `gain · I + offset`.
    pub shift_gain: f64,
    pub shift_offset: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            init: InitConfig::default(),
            seed: 0,
            shift_gain: 1.2,
            shift_offset: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub d_perc: f64,
    pub psnr_interp: f64,
    pub seconds: f64,
    pub note: String,
    pub failed: Option<String>,
}

/// One ablation row plus what produced it.
pub struct AblationRun {
    pub row: AblationRow,
    pub scene: Option<Scene>,
    pub report: Option<TrainReport>,
}

struct Variant {
    name: &'static str,
    splats: SplatInit,
    road: bool,
    pseudo: bool,
}

const VARIANTS: [Variant; 4] = [
    Variant {
        name: "baseline",
        splats: SplatInit::Random,
        road: false,
        pseudo: false,
    },
    Variant {
        name: "+2D-SDF road",
        splats: SplatInit::Random,
        road: true,
        pseudo: false,
    },
    Variant {
        name: "+pseudo-LiDAR",
        splats: SplatInit::Lidar,
        road: true,
        pseudo: false,
    },
    Variant {
        name: "+pseudo-GT (oracle fixer)",
        splats: SplatInit::Lidar,
        road: true,
        pseudo: true,
    },
];

fn failed_row(name: &str, msg: String, seconds: f64) -> AblationRow {
    AblationRow {
        name: name.to_string(),
        psnr: f64::NAN,
        ssim: f64::NAN,
        d_perc: f64::NAN,
        psnr_interp: f64::NAN,
        seconds,
        note: String::new(),
        failed: Some(msg),
    }
}

fn shifted(img: &Image, gain: f64, offset: f64) -> Image {
    img.map(|c| c.map(|v| (gain * v + offset).clamp(0.0, 1.0))).quantized()
}

/// Runs the four cumulative configurations, then the appearance-adaptation
/// row on a brightness-shifted copy of the extrapolated test log using the
/// last configuration's scene. Failed runs produce a failed row.
pub fn run_ablation(synth: &Arc<SynthScene>, data: &Dataset, cfg: &AblationConfig) -> Vec<AblationRun> {
    let fixer = OracleFixer {
        ground_truth: synth.ground_truth_fn(),
    };
    let perceptual = MultiScaleSsim::default();
    let plugins = Plugins {
        fixer: &fixer,
        perceptual: &perceptual,
    };
    let mut runs: Vec<AblationRun> = Vec::new();
    for v in &VARIANTS {
        let start = Instant::now();
        let mut init = cfg.init.clone();
        init.splats = v.splats;
        init.road.enabled = v.road;
        let mut tc = cfg.train.clone();
        tc.pseudo.enabled = v.pseudo;
        tc.seed = cfg.seed;
        info!("ablation: {}", v.name);
        let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<(Scene, TrainReport, AblationRow), String> {
            let (mut scene, _) = initialize_scene(data, &init, cfg.seed).map_err(|e| e.to_string())?;
            let report = train(&mut scene, data, &tc, &plugins).map_err(|e| e.to_string())?;
            let ex = evaluate_views(&scene, data, &data.test_extrap, tc.raster, tc.road_render, None)
                .map_err(|e| e.to_string())?
                .ok_or("no extrapolated test views")?;
            let ip = evaluate_views(&scene, data, &data.test_interp, tc.raster, tc.road_render, None)
                .map_err(|e| e.to_string())?;
            let row = AblationRow {
                name: v.name.to_string(),
                psnr: ex.psnr,
                ssim: ex.ssim,
                d_perc: ex.d_perc,
                psnr_interp: ip.map_or(f64::NAN, |m| m.psnr),
                seconds: start.elapsed().as_secs_f64(),
                note: format!("{} gaussians", scene.gaussians.len()),
                failed: None,
            };
            Ok((scene, report, row))
        }));
        let secs = start.elapsed().as_secs_f64();
        let run = match outcome {
            Ok(Ok((scene, report, row))) => AblationRun {
                row,
                scene: Some(scene),
                report: Some(report),
            },
            Ok(Err(msg)) => {
                warn!("ablation row {} failed: {msg}", v.name);
                AblationRun {
                    row: failed_row(v.name, msg, secs),
                    scene: None,
                    report: None,
                }
            }
            Err(_) => {
                warn!("ablation row {} panicked", v.name);
                AblationRun {
                    row: failed_row(v.name, "panicked".into(), secs),
                    scene: None,
                    report: None,
                }
            }
        };
        runs.push(run);
    }

    let name = "+appearance adaptation (histogram match)";
    let start = Instant::now();
    let row = match runs.last().and_then(|r| r.scene.as_ref()) {
        None => failed_row(name, "no trained scene from the previous row".into(), 0.0),
        Some(scene) => {
            let shifted_views: Vec<View> = data
                .test_extrap
                .iter()
                .map(|v| View {
                    image: shifted(&v.image, cfg.shift_gain, cfg.shift_offset),
                    ..v.clone()
                })
                .collect();
            let style = shifted(&data.train[0].image, cfg.shift_gain, cfg.shift_offset);
            let post = HistogramMatch::new(&style);
            let tc = &cfg.train;
            let plain = evaluate_views(scene, data, &shifted_views, tc.raster, tc.road_render, None);
            let adapted = evaluate_views(scene, data, &shifted_views, tc.raster, tc.road_render, Some(&post as &dyn PostProcess));
            match (plain, adapted) {
                (Ok(Some(p)), Ok(Some(a))) => AblationRow {
                    name: name.to_string(),
                    psnr: a.psnr,
                    ssim: a.ssim,
                    d_perc: a.d_perc,
                    psnr_interp: f64::NAN,
                    seconds: start.elapsed().as_secs_f64(),
                    note: format!("shifted log without adaptation: PSNR {:.3}, d_perc {:.4}", p.psnr, p.d_perc),
                    failed: None,
                },
                _ => failed_row(name, "evaluation failed".into(), start.elapsed().as_secs_f64()),
            }
        }
    };
    runs.push(AblationRun {
        row,
        scene: None,
        report: None,
    });
    runs
}

fn fmt(v: f64, prec: usize) -> String {
    if v.is_finite() {
        format!("{v:.prec$}")
    } else {
        "-".to_string()
    }
}

/// Writes `ablation.csv` and `ablation.md` into `dir`.
pub fn write_ablation(dir: &Path, rows: &[AblationRow]) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(crate::io::fs_err(dir))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "psnr_extrap", "ssim_extrap", "d_perc_extrap", "psnr_interp", "seconds", "status", "note"])
        .unwrap();
    let mut md = String::from(
        "| # | config | PSNR extrap ↑ | SSIM extrap ↑ | d_perc extrap ↓ | PSNR interp ↑ | time (s) | status |\n|---|---|---|---|---|---|---|---|\n",
    );
    for (i, r) in rows.iter().enumerate() {
        let status = r.failed.as_deref().map_or("ok".to_string(), |m| format!("failed: {m}"));
        w.write_record([
            r.name.clone(),
            r.psnr.to_string(),
            r.ssim.to_string(),
            r.d_perc.to_string(),
            r.psnr_interp.to_string(),
            format!("{:.1}", r.seconds),
            status.clone(),
            r.note.clone(),
        ])
        .unwrap();
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {:.1} | {} |\n",
            i + 1,
            r.name,
            fmt(r.psnr, 3),
            fmt(r.ssim, 4),
            fmt(r.d_perc, 4),
            fmt(r.psnr_interp, 3),
            r.seconds,
            status
        ));
    }
    let notes: Vec<String> = rows.iter().filter(|r| !r.note.is_empty()).map(|r| format!("- {}: {}", r.name, r.note)).collect();
    if !notes.is_empty() {
        md.push('\n');
        md.push_str(&notes.join("\n"));
        md.push('\n');
    }
    let csv_path = dir.join(ABLATION_CSV);
    std::fs::write(&csv_path, w.into_inner().unwrap()).map_err(crate::io::fs_err(&csv_path))?;
    let md_path = dir.join(ABLATION_MD);
    std::fs::write(&md_path, md).map_err(crate::io::fs_err(&md_path))?;
    Ok(())
}
