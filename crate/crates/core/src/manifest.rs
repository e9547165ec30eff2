//! On-disk layout of a training run.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/config.json
//! <dir>/logs/{train,validation,test}.kfpl
//! <dir>/weights/epoch_0000.{json,bin} ...
//! ```
//!
//! Every path in the manifest is relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ManifestError;
use crate::fusion::FusionPlan;
use crate::log::PredictionLog;
use crate::models::ModelWeights;
use crate::trainer::{ExperimentConfig, RunArtifacts};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogPaths {
    pub train: String,
    pub validation: String,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub tool_version: String,
    pub config_hash: String,
    pub config: String,
    pub logs: LogPaths,
    /// Weight stems, one per epoch.
    pub snapshots: Vec<String>,
    #[serde(default)]
    pub ema: Option<String>,
    #[serde(default)]
    pub plans: Vec<String>,
    #[serde(default)]
    pub reports: Vec<String>,
}

/// A manifest whose referenced files have all been read and validated.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub config: ExperimentConfig,
    pub train_log: PredictionLog,
    pub validation_log: PredictionLog,
    pub test_log: PredictionLog,
    pub snapshots: Vec<ModelWeights>,
    pub plans: Vec<FusionPlan>,
}

/// Hex SHA-256 of the config's canonical JSON.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(serde_json::to_vec(cfg).expect("config serializes"));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io { path: path.display().to_string(), source }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), ManifestError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

impl Manifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn save(&self, dir: &Path) -> Result<(), ManifestError> {
        write(&Self::path_in(dir), serde_json::to_string_pretty(self)?)
    }

    /// Reads `manifest.json` and every file it references.
    pub fn load(path: &Path) -> Result<LoadedRun, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let config_path = dir.join(&manifest.config);
        let config = ExperimentConfig::load(&config_path)
            .map_err(|e| ManifestError::Invalid(format!("{}: {e}", config_path.display())))?;
        if config_hash(&config) != manifest.config_hash {
            return Err(ManifestError::Invalid("config hash does not match config file".into()));
        }
        let log = |rel: &str| {
            let p = dir.join(rel);
            PredictionLog::load(&p).map_err(|source| ManifestError::Log { path: p.display().to_string(), source })
        };
        let train_log = log(&manifest.logs.train)?;
        let validation_log = log(&manifest.logs.validation)?;
        let test_log = log(&manifest.logs.test)?;
        let snapshots = manifest
            .snapshots
            .iter()
            .map(|rel| {
                let p = dir.join(rel);
                ModelWeights::load(&p).map_err(|source| ManifestError::Model { path: p.display().to_string(), source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let epochs = train_log.epochs();
        if validation_log.epochs() != epochs || test_log.epochs() != epochs || snapshots.len() != epochs {
            return Err(ManifestError::Invalid(format!(
                "epoch counts disagree: train {epochs}, validation {}, test {}, snapshots {}",
                validation_log.epochs(),
                test_log.epochs(),
                snapshots.len()
            )));
        }
        let plans = manifest
            .plans
            .iter()
            .map(|rel| {
                let p = dir.join(rel);
                let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
                FusionPlan::from_json(&text)
                    .map_err(|source| ManifestError::Plan { path: p.display().to_string(), source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        for rel in &manifest.reports {
            let p = dir.join(rel);
            if !p.exists() {
                return Err(ManifestError::Io {
                    path: p.display().to_string(),
                    source: std::io::ErrorKind::NotFound.into(),
                });
            }
        }
        Ok(LoadedRun { dir, manifest, config, train_log, validation_log, test_log, snapshots, plans })
    }
}

/// Writes a run's logs, weights and config under `dir` and returns the
/// manifest (also saved as `dir/manifest.json`).
pub fn write_run(run: &RunArtifacts, dir: &Path) -> Result<Manifest, ManifestError> {
    let hash = config_hash(&run.config);
    write(&dir.join("config.json"), run.config.to_json())?;
    let logs = LogPaths {
        train: "logs/train.kfpl".into(),
        validation: "logs/validation.kfpl".into(),
        test: "logs/test.kfpl".into(),
    };
    for (rel, log) in
        [(&logs.train, &run.train_log), (&logs.validation, &run.validation_log), (&logs.test, &run.test_log)]
    {
        write(&dir.join(rel), log.to_bytes())?;
    }
    let mut snapshots = Vec::with_capacity(run.snapshots.len());
    for (epoch, w) in run.snapshots.iter().enumerate() {
        let rel = format!("weights/epoch_{epoch:04}");
        write_weights(dir, &rel, w)?;
        snapshots.push(rel);
    }
    let ema = match &run.ema {
        Some(w) => {
            write_weights(dir, "weights/ema", w)?;
            Some("weights/ema".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        run_id: format!("run-{}", &hash[..12]),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hash,
        config: "config.json".into(),
        logs,
        snapshots,
        ema,
        plans: Vec::new(),
        reports: Vec::new(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}

pub fn write_weights(dir: &Path, stem: &str, w: &ModelWeights) -> Result<(), ManifestError> {
    let base = dir.join(stem);
    write(&base.with_extension("json"), w.header_json())?;
    write(&base.with_extension("bin"), w.params_bytes())
}
