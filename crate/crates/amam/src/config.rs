//! AMAM configuration documents.

use std::fs;
use std::path::{Path, PathBuf};

use amam_core::AmamConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        source: amam_core::Error,
    },
}

/// Parses and validates a config document.
pub fn parse_config(text: &str, path: &Path) -> Result<AmamConfig, ConfigError> {
    let cfg: AmamConfig = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    cfg.validate().map_err(|source| ConfigError::Invalid {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<AmamConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, path)
}

pub fn config_to_json(cfg: &AmamConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}
