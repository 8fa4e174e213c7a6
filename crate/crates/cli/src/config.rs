//! Pipeline configuration: one TOML file, `--set key=value` overrides, then
//! dedicated flags. Later sources win.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use lanesplat::pseudolidar::InitConfig;
use lanesplat::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use toml::Value;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixerKind {
    Identity,
    Oracle,
    BlurOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixerConfig {
    pub kind: FixerKind,
    pub blur_radius: usize,
    pub noise_sigma: f64,
}

impl Default for FixerConfig {
    fn default() -> Self {
        Self {
            kind: FixerKind::Oracle,
            blur_radius: 1,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostKind {
    None,
    Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub post: PostKind,
    /// Style image for the histogram plugin.
    pub reference: Option<PathBuf>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            post: PostKind::None,
            reference: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationKnobs {
    pub shift_gain: f64,
    pub shift_offset: f64,
}

impl Default for AblationKnobs {
    fn default() -> Self {
        let d = lanesplat::synthbench::AblationConfig::default();
        Self {
            shift_gain: d.shift_gain,
            shift_offset: d.shift_offset,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub fixer: FixerConfig,
    pub render: RenderConfig,
    pub ablation: AblationKnobs,
}

/// Every config key with a one-line description, as printed by `--help`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "seed for every random choice"),
    ("threads", "worker threads, 0 = all cores"),
    ("init.provider", "depth source: oracle | file"),
    ("init.oracle.scale_distortion", "global scale the oracle depth provider applies"),
    ("init.oracle.noise_sigma", "oracle depth noise (m)"),
    ("init.oracle.pose_noise_sigma", "oracle camera-center noise (m)"),
    ("init.depth_dir", "directory with poses.txt and depth/<id>.pfm for the file provider"),
    ("init.splats", "initial splats: lidar | random | none"),
    ("init.stride", "pixel stride when unprojecting depth"),
    ("init.voxel", "voxel size of the point-cloud downsample (m)"),
    ("init.k_neighbors", "neighbors for the initial splat scale"),
    ("init.random_count", "splat count for random initialization"),
    ("init.road.enabled", "build the road field"),
    ("init.road.field.levels", "road grid levels"),
    ("init.road.field.base_cells", "cells along the long side of the coarsest level"),
    ("init.road.field.finest_cells", "cells along the long side of the finest elevation/slope level"),
    ("init.road.field.color_finest_cells", "cells along the long side of the finest color level"),
    ("init.road.field.color_channels", "color features per vertex"),
    ("init.road.field.margin", "vertical padding of the sampling slab (m)"),
    ("init.road.field.init_s", "initial sharpness"),
    ("init.road.field.init_slope", "initial slope factor"),
    ("init.road.extent", "explicit road extent [x0, x1, y0, y1]"),
    ("init.road.extent_margin", "margin around the trajectory when no extent is given (m)"),
    ("init.road.camera_height", "ground prior below the cameras without points (m)"),
    ("init.road.ground_tolerance", "height band around the ground plane counted as road (m)"),
    ("init.road.ground_fraction", "lowest fraction of points for the ground plane"),
    ("init.sky_width", "sky texture width"),
    ("init.sky_height", "sky texture height"),
    ("train.iterations", "optimization steps"),
    ("train.seed", "replaced by the top-level seed"),
    ("train.lr.position", "initial position rate (times trajectory radius)"),
    ("train.lr.position_final", "final position rate (times trajectory radius)"),
    ("train.lr.scale", "log-scale rate"),
    ("train.lr.rotation", "rotation rate"),
    ("train.lr.opacity", "opacity rate"),
    ("train.lr.color", "base color rate"),
    ("train.lr.sh", "first-order color rate"),
    ("train.lr.road_grid", "road color grid rate"),
    ("train.lr.road_geometry", "road elevation and slope rate"),
    ("train.lr.road_geometry_warmup", "iterations before road elevation and slope start to move"),
    ("train.lr.road_s", "road log-sharpness rate"),
    ("train.lr.sky", "sky texel rate"),
    ("train.adam.beta1", "first-moment decay"),
    ("train.adam.beta2", "second-moment decay"),
    ("train.adam.eps", "denominator epsilon"),
    ("train.recon.l1", "L1 weight on real views"),
    ("train.recon.ssim", "SSIM weight on real views"),
    ("train.pseudo.enabled", "inject pseudo ground truth"),
    ("train.pseudo.start", "first injection as a fraction of the iterations"),
    ("train.pseudo.interval", "injection spacing as a fraction of the iterations"),
    ("train.pseudo.steps", "interpolation rounds toward the target poses"),
    ("train.pseudo.real_per_pseudo", "real samples per pseudo sample"),
    ("train.pseudo.weights.perceptual", "perceptual weight of the pseudo-GT loss"),
    ("train.pseudo.weights.l1", "L1 weight of the pseudo-GT loss"),
    ("train.prune_interval", "iterations between opacity pruning, 0 = never"),
    ("train.prune_opacity", "opacity below which splats are pruned"),
    ("train.eval_interval", "iterations between held-out evaluations, 0 = end only"),
    ("train.raster.alpha_min", "splat contributions below this are skipped"),
    ("train.raster.transmittance_min", "splat blending stops below this transmittance"),
    ("train.raster.cov_blur", "low-pass added to 2D covariances (px^2)"),
    ("train.raster.tile_size", "raster tile size (px)"),
    ("train.raster.cull_offscreen", "cull splats outside the image"),
    ("train.raster.frustum_guard", "frustum widening factor for center culling"),
    ("train.road_render.n_coarse", "uniform samples per road ray"),
    ("train.road_render.n_fine", "samples around the road crossing"),
    ("train.road_render.color_weight_min", "road intervals below this weight get no color"),
    ("train.road_render.transmittance_min", "road marching stops below this transmittance"),
    ("train.dump_dir", "where non-finite losses dump their layers"),
    ("fixer.kind", "pseudo-GT fixer: identity | oracle | blur-oracle"),
    ("fixer.blur_radius", "box radius of the blur-oracle fixer"),
    ("fixer.noise_sigma", "noise of the blur-oracle fixer"),
    ("render.post", "post-process plugin: none | histogram"),
    ("render.reference", "style image for the histogram plugin"),
    ("ablation.shift_gain", "gain of the appearance-shifted test log"),
    ("ablation.shift_offset", "offset of the appearance-shifted test log"),
];

pub fn keys_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (TOML file via --config, override with --set key=value):\n");
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<width$}  {d}\n"));
    }
    s
}

/// Dotted paths of every leaf in a JSON value; arrays and nulls are leaves.
pub fn leaf_keys(v: &Json) -> BTreeSet<String> {
    fn walk(prefix: &str, v: &Json, out: &mut BTreeSet<String>) {
        match v {
            Json::Object(map) => {
                for (k, child) in map {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string());
            }
        }
    }
    let mut out = BTreeSet::new();
    walk("", v, &mut out);
    out
}

fn toml_leaf_keys(v: &Value) -> BTreeSet<String> {
    leaf_keys(&serde_json::to_value(v).unwrap_or(Json::Null))
}

/// Every valid key of [`PipelineConfig`].
pub fn known_keys() -> BTreeSet<String> {
    leaf_keys(&serde_json::to_value(PipelineConfig::default()).expect("config serializes"))
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Loads `file` (if any), applies `key=value` overrides and returns the
/// config. Unknown keys are errors.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig, CliError> {
    let mut root: toml::Table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::MissingInput(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
        set_path(&mut root, k.trim(), parse_value(v.trim()))?;
    }
    let known = known_keys();
    let given = toml_leaf_keys(&Value::Table(root.clone()));
    let unknown: Vec<&String> = given
        .iter()
        .filter(|k| !known.contains(*k) && !known.iter().any(|kk| k.starts_with(&format!("{kk}."))))
        .collect();
    if let Some(k) = unknown.first() {
        return Err(CliError::Config(format!("unknown config key {k}")));
    }
    let mut cfg: PipelineConfig =
        Value::Table(root).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.init.stride == 0 || !(self.init.voxel >= 0.0) || self.init.k_neighbors == 0 {
            return Err(CliError::Config("init.stride and init.k_neighbors must be positive, init.voxel non-negative".into()));
        }
        if self.init.sky_width < 2 || self.init.sky_height < 2 {
            return Err(CliError::Config("sky texture must be at least 2x2".into()));
        }
        if self.render.post == PostKind::Histogram && self.render.reference.is_none() {
            return Err(CliError::Config("render.post = histogram needs render.reference".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_lists_exactly_the_config_keys() {
        let documented: BTreeSet<String> = CONFIG_KEYS.iter().map(|(k, _)| k.to_string()).collect();
        assert_eq!(documented, known_keys());
    }

    #[test]
    fn overrides_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\n[train]\niterations = 10\n").unwrap();
        let cfg = load(Some(&path), &["train.iterations=20".into(), "fixer.kind=identity".into()]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.train.iterations, 20);
        assert_eq!(cfg.fixer.kind, FixerKind::Identity);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_config_errors() {
        assert!(matches!(load(None, &["train.iteratons=5".into()]), Err(CliError::Config(_))));
        assert!(matches!(load(None, &["train.iterations=\"many\"".into()]), Err(CliError::Config(_))));
        assert!(matches!(load(None, &["seed".into()]), Err(CliError::Config(_))));
    }

    #[test]
    fn list_valued_keys_accept_arrays() {
        let cfg = load(None, &["init.road.extent=[0.0, 10.0, -5.0, 5.0]".into()]).unwrap();
        assert_eq!(cfg.init.road.extent, Some([0.0, 10.0, -5.0, 5.0]));
    }
}
