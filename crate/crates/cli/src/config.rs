//! Run configuration: one JSON file, with command-line flags taking precedence.
//!
//! Relative paths in the file resolve against the file's directory.

use std::path::{Path, PathBuf};

use psol_core::boxreg::TrainConfig;
use psol_core::pseudoboxes::Method;
use psol_core::tensor_io::Split;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    /// Root holding `<split>/class_<label>.psol` feature maps.
    pub features_dir: Option<PathBuf>,
    /// Pooled features, one `1x1xd` record per image.
    pub pooled_features: Option<PathBuf>,
    pub classifier_weights: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub method: Option<Method>,
    /// Number of classes for the classification head; defaults to max label + 1.
    pub classes: Option<usize>,
    pub train: TrainSection,
    pub eval: EvalOptions,
}

/// Per-command training settings; each falls back to [`TrainConfig::default`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub regressor: Option<TrainConfig>,
    pub classifier: Option<TrainConfig>,
    pub joint: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub split: Split,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { split: Split::Test }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.manifest,
            &mut cfg.features_dir,
            &mut cfg.pooled_features,
            &mut cfg.classifier_weights,
            &mut cfg.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }
}

/// An input path that must exist when the command starts.
pub fn require_input(value: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    let p = value
        .clone()
        .ok_or_else(|| CliError::Config(format!("missing `{name}` (config field or flag)")))?;
    if !p.exists() {
        return Err(CliError::Config(format!(
            "`{name}` path {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

pub fn optional_input(value: &Option<PathBuf>, name: &str) -> Result<Option<PathBuf>, CliError> {
    match value {
        Some(_) => require_input(value, name).map(Some),
        None => Ok(None),
    }
}

/// The output directory, created if absent.
pub fn output_dir(value: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = value
        .clone()
        .ok_or_else(|| CliError::Config("missing `output_dir` (config field or --output-dir)".into()))?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Config(format!("cannot create output dir {}: {e}", dir.display())))?;
    Ok(dir)
}
