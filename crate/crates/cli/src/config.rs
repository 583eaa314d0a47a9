//! The JSON run configuration: one file with a section per component. Flags
//! override file values, and every command writes the resolved result as
//! `config.json` beside its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fanet::data::{to_sorted_json, SceneSpec};
use fanet::enhance::EnhanceParams;
use fanet::train::TrainConfig;
use fanet::{FANetConfig, Variant};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 200,
            val: 40,
            test: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root (the directory holding `manifest.json`).
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scene: SceneSpec,
    pub splits: SplitCounts,
    pub model: FANetConfig,
    pub train: TrainConfig,
    pub ablation: AblationSettings,
    pub enhance: EnhanceParams,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(fanet::Error::from)
            .map_err(|e| fanet::Error::Validation(format!("config {}: {e}", path.display())))
            .map_err(Into::into)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, to_sorted_json(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Resolves a path from a flag or the config, naming it in the error.
pub fn require(
    flag: &Option<PathBuf>,
    from_config: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| from_config.clone())
        .ok_or_else(|| fanet::Error::Validation(format!("--{what} is required")).into())
}
