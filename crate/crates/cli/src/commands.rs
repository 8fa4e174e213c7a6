use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::Serialize;

use lanesplat::dataset::{Dataset, View};
use lanesplat::geometry::{read_pose_file, Camera};
use lanesplat::io::{read_png, read_toml, write_png, write_toml};
use lanesplat::metrics::MultiScaleSsim;
use lanesplat::pseudolidar::initialize_scene;
use lanesplat::scene::Scene;
use lanesplat::synthbench::{run_ablation, write_ablation, AblationConfig, SynthScene};
use lanesplat::trainer::{
    apply_post_process, evaluate_views, train, BlurOracleFixer, Fixer, HistogramMatch, IdentityFixer, IdentityPost,
    OracleFixer, Plugins, PostProcess, SetMetrics,
};

use crate::config::{self, FixerKind, PipelineConfig, PostKind};
use crate::error::CliError;
use crate::manifest::Run;
use crate::{Cli, Command, Split};

/// Scene description stored next to a generated dataset.
pub const SYNTH_FILE: &str = "synth.toml";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const POINTS_FILE: &str = "points.ply";
pub const EVAL_FILE: &str = "eval.json";

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    require(dir, "dataset")?;
    Ok(Dataset::load(dir)?)
}

fn load_scene(dir: &Path) -> Result<Scene, CliError> {
    require(dir, "checkpoint")?;
    Ok(Scene::load(dir)?)
}

fn load_synth(data: &Path) -> Result<Arc<SynthScene>, CliError> {
    let path = data.join(SYNTH_FILE);
    require(&path, "benchmark scene description")?;
    let synth: SynthScene = read_toml(&path)?;
    synth.validate()?;
    Ok(Arc::new(synth))
}

/// Writes the checkpoint and its config snapshot.
fn save_checkpoint(scene: &Scene, cfg: &PipelineConfig, dir: &Path, run: &mut Run) -> Result<(), CliError> {
    scene.save(dir)?;
    write_toml(&dir.join(CONFIG_SNAPSHOT), cfg)?;
    for f in [lanesplat::scene::GAUSSIANS_FILE, lanesplat::scene::ROAD_FILE, CONFIG_SNAPSHOT] {
        if dir.join(f).exists() {
            run.output(dir.join(f));
        }
    }
    Ok(())
}

fn make_fixer(cfg: &PipelineConfig, data_dir: &Path) -> Result<Box<dyn Fixer>, CliError> {
    if !cfg.train.pseudo.enabled || cfg.fixer.kind == FixerKind::Identity {
        return Ok(Box::new(IdentityFixer));
    }
    let ground_truth = load_synth(data_dir)?.ground_truth_fn();
    Ok(match cfg.fixer.kind {
        FixerKind::Identity => unreachable!(),
        FixerKind::Oracle => Box::new(OracleFixer { ground_truth }),
        FixerKind::BlurOracle => Box::new(BlurOracleFixer {
            ground_truth,
            radius: cfg.fixer.blur_radius,
            noise_sigma: cfg.fixer.noise_sigma,
            seed: cfg.seed,
        }),
    })
}

fn make_post(cfg: &PipelineConfig) -> Result<Box<dyn PostProcess>, CliError> {
    Ok(match cfg.render.post {
        PostKind::None => Box::new(IdentityPost),
        PostKind::Histogram => {
            let path = cfg
                .render
                .reference
                .as_ref()
                .ok_or_else(|| CliError::Config("render.post = histogram needs render.reference".into()))?;
            require(path, "reference image")?;
            Box::new(HistogramMatch::new(&read_png(path)?))
        }
    })
}

fn apply_overrides(cli: &Cli, cfg: &mut PipelineConfig) {
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(t) = cli.common.threads {
        cfg.threads = t;
    }
    match &cli.command {
        Command::Train { iters: Some(n), .. } => cfg.train.iterations = *n,
        Command::Ablate { iters: Some(n), .. } => cfg.train.iterations = *n,
        Command::Render { post, reference, .. } | Command::Eval { post, reference, .. } => {
            if let Some(p) = post {
                cfg.render.post = (*p).into();
            }
            if let Some(r) = reference {
                cfg.render.reference = Some(r.clone());
            }
        }
        _ => {}
    }
}

fn init_threads(n: usize) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(p) = &cli.common.config {
        require(p, "config file")?;
    }
    let mut cfg = config::load(cli.common.config.as_deref(), &cli.common.set)?;
    apply_overrides(&cli, &mut cfg);
    cfg.validate()?;
    init_threads(cfg.threads)?;
    match &cli.command {
        Command::GenScene { preset, spec, out } => gen_scene(&cfg, preset, spec.as_deref(), out),
        Command::Init { data, out } => init(&cfg, data, out),
        Command::Train {
            data,
            out,
            from,
            dump_layers,
            ..
        } => train_cmd(&cfg, data, out, from.as_deref(), dump_layers.as_deref()),
        Command::Render {
            scene,
            poses,
            out,
            camera,
            data,
            dump_layers,
            ..
        } => render(&cfg, scene, poses, out, camera.as_deref(), data.as_deref(), dump_layers.as_deref()),
        Command::Eval { scene, data, split, out, .. } => eval(&cfg, scene, data, *split, out.as_deref()),
        Command::Ablate { data, out, .. } => ablate(&cfg, data, out),
    }
}

fn gen_scene(cfg: &PipelineConfig, preset: &str, spec: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let synth = match spec {
        Some(p) => {
            require(p, "scene description")?;
            read_toml::<SynthScene>(p)?
        }
        None => SynthScene::preset(preset)?,
    };
    let inputs = spec.map(|p| vec![p.to_path_buf()]).unwrap_or_default();
    let mut run = Run::new("gen-scene", inputs, cfg);
    run.stage("generate");
    let data = synth.generate(cfg.seed)?;
    run.stage("write");
    data.save(out)?;
    write_toml(&out.join(SYNTH_FILE), &synth)?;
    run.output(out.to_path_buf());
    info!(
        "wrote {} train, {} interpolated and {} extrapolated views to {}",
        data.train.len(),
        data.test_interp.len(),
        data.test_extrap.len(),
        out.display()
    );
    run.write(out)?;
    Ok(())
}

fn init(cfg: &PipelineConfig, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let data = load_dataset(data_dir)?;
    let mut run = Run::new("init", vec![data_dir.to_path_buf()], cfg);
    run.stage("initialize");
    let (scene, summary) = initialize_scene(&data, &cfg.init, cfg.seed)?;
    run.stage("write");
    create_dir(out)?;
    save_checkpoint(&scene, cfg, out, &mut run)?;
    if let Some(cloud) = &summary.cloud {
        cloud.write_ply(&out.join(POINTS_FILE))?;
        run.output(out.join(POINTS_FILE));
    }
    info!(
        "{} gaussians, {} road points, scale {}",
        scene.gaussians.len(),
        summary.road_points,
        summary.recovered_scale.map_or("n/a".to_string(), |s| format!("{s:.6}"))
    );
    run.write(out)?;
    Ok(())
}

fn train_cmd(
    cfg: &PipelineConfig,
    data_dir: &Path,
    out: &Path,
    from: Option<&Path>,
    dump: Option<&Path>,
) -> Result<(), CliError> {
    let data = load_dataset(data_dir)?;
    let mut inputs = vec![data_dir.to_path_buf()];
    inputs.extend(from.map(Path::to_path_buf));
    let mut run = Run::new("train", inputs, cfg);
    run.stage("initialize");
    let mut scene = match from {
        Some(dir) => load_scene(dir)?,
        None => initialize_scene(&data, &cfg.init, cfg.seed)?.0,
    };
    let fixer = make_fixer(cfg, data_dir)?;
    let perceptual = MultiScaleSsim::default();
    let mut tc = cfg.train.clone();
    if let Some(d) = dump {
        tc.dump_dir = Some(d.to_path_buf());
    }
    run.stage("train");
    let report = train(
        &mut scene,
        &data,
        &tc,
        &Plugins {
            fixer: fixer.as_ref(),
            perceptual: &perceptual,
        },
    )?;
    run.stage("write");
    create_dir(out)?;
    save_checkpoint(&scene, cfg, out, &mut run)?;
    report.write_csv(&out.join(METRICS_FILE))?;
    run.output(out.join(METRICS_FILE));
    if let Some(d) = dump {
        let views = data.train.iter().take(1).chain(data.test_extrap.iter().take(1));
        for v in views {
            let r = lanesplat::scene::render(&scene, &data.camera, &v.pose, tc.raster, tc.road_render);
            r.dump_layers(d, &v.id)?;
        }
        run.output(d.to_path_buf());
    }
    if let Some(last) = report.last() {
        info!(
            "iteration {}: loss {:.5}, interpolated PSNR {:.2}, extrapolated PSNR {:.2}",
            last.iteration, last.loss, last.psnr_interp, last.psnr_extrap
        );
    }
    run.write(out)?;
    Ok(())
}

fn render(
    cfg: &PipelineConfig,
    scene_dir: &Path,
    poses: &Path,
    out: &Path,
    camera: Option<&Path>,
    data: Option<&Path>,
    dump: Option<&Path>,
) -> Result<(), CliError> {
    let scene = load_scene(scene_dir)?;
    require(poses, "pose file")?;
    let cam_path = match (camera, data) {
        (Some(c), _) => c.to_path_buf(),
        (None, Some(d)) => d.join("camera.cfg"),
        (None, None) => return Err(CliError::MissingInput("render needs --camera or --data".into())),
    };
    require(&cam_path, "camera file")?;
    let camera = Camera::load(&cam_path)?;
    camera.validate()?;
    let records = read_pose_file(poses)?;
    let post = make_post(cfg)?;
    let mut run = Run::new("render", vec![scene_dir.to_path_buf(), poses.to_path_buf(), cam_path], cfg);
    run.stage("render");
    create_dir(out)?;
    let tc = &cfg.train;
    for r in &records {
        let rendered = lanesplat::scene::render(&scene, &camera, &r.pose, tc.raster, tc.road_render);
        let img = apply_post_process(post.as_ref(), &rendered.image);
        if !img.data.iter().flatten().all(|v| v.is_finite()) {
            return Err(CliError::NonFinite(format!("render of {} is not finite", r.id)));
        }
        let path = out.join(format!("{}.png", r.id));
        write_png(&path, &img)?;
        run.output(path);
        if let Some(d) = dump {
            rendered.dump_layers(d, &r.id)?;
        }
    }
    if let Some(d) = dump {
        run.output(d.to_path_buf());
    }
    info!("rendered {} views into {}", records.len(), out.display());
    run.write(out)?;
    Ok(())
}

#[derive(Serialize)]
struct SplitMetrics {
    split: &'static str,
    views: usize,
    psnr: f64,
    ssim: f64,
    d_perc: f64,
}

fn eval(cfg: &PipelineConfig, scene_dir: &Path, data_dir: &Path, split: Split, out: Option<&Path>) -> Result<(), CliError> {
    let scene = load_scene(scene_dir)?;
    let data = load_dataset(data_dir)?;
    let post = make_post(cfg)?;
    let mut run = Run::new("eval", vec![scene_dir.to_path_buf(), data_dir.to_path_buf()], cfg);
    run.stage("evaluate");
    let sets: Vec<(&'static str, &[View])> = [
        ("train", &data.train[..]),
        ("interp", &data.test_interp[..]),
        ("extrap", &data.test_extrap[..]),
    ]
    .into_iter()
    .filter(|(name, _)| match split {
        Split::All => true,
        Split::Train => *name == "train",
        Split::Interp => *name == "interp",
        Split::Extrap => *name == "extrap",
    })
    .collect();
    let post_ref: Option<&dyn PostProcess> = (cfg.render.post != PostKind::None).then_some(post.as_ref());
    let mut results = Vec::new();
    for (name, views) in sets {
        let m: Option<SetMetrics> = evaluate_views(&scene, &data, views, cfg.train.raster, cfg.train.road_render, post_ref)?;
        if let Some(m) = m {
            if !(m.psnr.is_finite() && m.ssim.is_finite() && m.d_perc.is_finite()) {
                return Err(CliError::NonFinite(format!("metrics on the {name} split are not finite")));
            }
            results.push(SplitMetrics {
                split: name,
                views: views.len(),
                psnr: m.psnr,
                ssim: m.ssim,
                d_perc: m.d_perc,
            });
        }
    }
    let json = serde_json::to_string_pretty(&results).expect("metrics serialize");
    println!("{json}");
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join(EVAL_FILE);
        std::fs::write(&path, &json).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        run.output(path);
        run.write(dir)?;
    }
    Ok(())
}

fn ablate(cfg: &PipelineConfig, data_dir: &Path, out: &Path) -> Result<(), CliError> {
    let data = load_dataset(data_dir)?;
    let synth = load_synth(data_dir)?;
    let mut run = Run::new("ablate", vec![data_dir.to_path_buf()], cfg);
    let acfg = AblationConfig {
        train: cfg.train.clone(),
        init: cfg.init.clone(),
        seed: cfg.seed,
        shift_gain: cfg.ablation.shift_gain,
        shift_offset: cfg.ablation.shift_offset,
    };
    run.stage("ablation");
    let runs = run_ablation(&synth, &data, &acfg);
    run.stage("write");
    let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
    write_ablation(out, &rows)?;
    for f in [lanesplat::synthbench::ABLATION_CSV, lanesplat::synthbench::ABLATION_MD] {
        run.output(out.join(f));
    }
    for (k, r) in runs.iter().enumerate() {
        if let Some(rep) = &r.report {
            let path: PathBuf = out.join(format!("metrics_{k}.csv"));
            rep.write_csv(&path)?;
            run.output(path);
        }
    }
    for row in &rows {
        match &row.failed {
            None => info!("{}: extrapolated PSNR {:.2}, d_perc {:.4}", row.name, row.psnr, row.d_perc),
            Some(msg) => info!("{}: failed ({msg})", row.name),
        }
    }
    run.write(out)?;
    Ok(())
}
