use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub versions: BTreeMap<String, String>,
    /// Seconds per stage, in execution order.
    pub stage_timings: Vec<(String, f64)>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// An earlier manifest in the same directory had the same hash.
    pub rerun: bool,
    pub config: PipelineConfig,
}

/// Hash of the command, its inputs and the effective config.
pub fn config_hash(command: &str, inputs: &[PathBuf], cfg: &PipelineConfig) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    for i in inputs {
        h.update([0]);
        h.update(i.to_string_lossy().as_bytes());
    }
    h.update([0]);
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects stage timings for one command and writes the manifest.
pub struct Run {
    manifest: RunManifest,
    stage: Option<(String, Instant)>,
}

impl Run {
    pub fn new(command: &str, inputs: Vec<PathBuf>, cfg: &PipelineConfig) -> Self {
        let versions = BTreeMap::from([
            ("lanesplat".to_string(), lanesplat::VERSION.to_string()),
            ("lanesplat-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]);
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                config_hash: config_hash(command, &inputs, cfg),
                seed: cfg.seed,
                threads: rayon::current_num_threads(),
                versions,
                stage_timings: Vec::new(),
                inputs,
                outputs: Vec::new(),
                rerun: false,
                config: cfg.clone(),
            },
            stage: None,
        }
    }

    pub fn stage(&mut self, name: &str) {
        self.finish_stage();
        self.stage = Some((name.to_string(), Instant::now()));
    }

    fn finish_stage(&mut self) {
        if let Some((name, t)) = self.stage.take() {
            self.manifest.stage_timings.push((name, t.elapsed().as_secs_f64()));
        }
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.manifest.outputs.push(p.into());
    }

    /// Writes `manifest.json` into `dir`, flagging a rerun when the previous
    /// manifest there carries the same config hash.
    pub fn write(mut self, dir: &Path) -> Result<RunManifest, CliError> {
        self.finish_stage();
        let path = dir.join(MANIFEST_FILE);
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(prev) = serde_json::from_str::<RunManifest>(&text) {
                if prev.config_hash == self.manifest.config_hash {
                    warn!("rerun of an identical config in {}", dir.display());
                    self.manifest.rerun = true;
                }
            }
        }
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(self.manifest)
    }
}
