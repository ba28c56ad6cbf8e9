//! Service configuration: one TOML file, with environment overrides for
//! the bind address, data directory and backend mode.

use std::path::{Path, PathBuf};

use positioner_core::backend::{AxesConfig, FaultInjection, SimBackendConfig, TimeMode};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_BIND: &str = "POSITIONER_BIND";
pub const ENV_DATA_DIR: &str = "POSITIONER_DATA_DIR";
pub const ENV_BACKEND: &str = "POSITIONER_BACKEND";
pub const ENV_SETTLE_MS: &str = "POSITIONER_SETTLE_MS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for {var}: {value}")]
    Env { var: &'static str, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    pub backend: TimeMode,
    /// Dwell at each scan position before acquiring, in milliseconds.
    pub settle_ms: u64,
    /// Directory of static web UI assets served at `/`.
    pub ui_dir: Option<PathBuf>,
    pub fail_after_n_moves: Option<u64>,
    pub axes: AxesConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            backend: TimeMode::Instant,
            settle_ms: 0,
            ui_dir: None,
            fail_after_n_moves: None,
            axes: AxesConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` (if given) and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get(ENV_BIND) {
            self.bind = v;
        }
        if let Some(v) = get(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_BACKEND) {
            self.backend = match v.to_ascii_lowercase().as_str() {
                "instant" => TimeMode::Instant,
                "realtime" => TimeMode::Realtime,
                _ => {
                    return Err(ConfigError::Env {
                        var: ENV_BACKEND,
                        value: v,
                    })
                }
            };
        }
        if let Some(v) = get(ENV_SETTLE_MS) {
            self.settle_ms = v.parse().map_err(|_| ConfigError::Env {
                var: ENV_SETTLE_MS,
                value: v,
            })?;
        }
        Ok(())
    }

    pub fn backend_config(&self) -> SimBackendConfig {
        SimBackendConfig {
            time_mode: self.backend,
            fault_injection: self.fail_after_n_moves.map(|n| FaultInjection {
                fail_after_n_moves: n,
            }),
        }
    }
}
