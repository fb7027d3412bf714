//! TOML configuration: [model], [train] and [corruption] tables mirroring
//! the library config structs. Precedence is flags > config file > defaults;
//! the STSX_SEED environment variable slots in below explicit --seed flags.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;
use stsx_core::data::CorruptionConfig;
use stsx_core::model::ModelConfig;
use stsx_core::train::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corruption: CorruptionConfig,
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Explicit --seed flag, or STSX_SEED from the environment.
pub fn global_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("STSX_SEED") {
        Ok(v) => {
            let parsed =
                v.parse::<u64>().with_context(|| format!("STSX_SEED is not a u64: {v:?}"))?;
            Ok(Some(parsed))
        }
        Err(_) => Ok(None),
    }
}

/// Serializes the merged configuration next to a command's outputs.
pub fn echo_config(cfg: &FileConfig, dir: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg).context("serializing effective config")?;
    let path = dir.join("effective_config.toml");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
