//! Service configuration: defaults, then a TOML file, then command-line flags.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! store = "/var/lib/raad/fp.store"
//! retention = 1024
//! anchors = 8
//!
//! [adjustment]
//! tau = 0.95
//! alpha = 70
//! delta = 1.0
//! score_kind = "probability"
//! alert_threshold = 0.5
//! ```

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use raad_core::pipeline::DEFAULT_RETENTION;
use raad_core::{AdjustmentConfig, ScoreKind};
use serde::{Deserialize, Serialize};

pub const TOKEN_ENV: &str = "RAAD_TOKEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_BODY_LIMIT: usize = 512 * 1024 * 1024;

/// Partial [`AdjustmentConfig`]: every field optional, applied over a base.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjustmentOverrides {
    pub tau: Option<f64>,
    pub alpha: Option<f64>,
    pub delta: Option<f64>,
    pub score_kind: Option<ScoreKind>,
    pub alert_threshold: Option<f64>,
}

impl AdjustmentOverrides {
    /// Applies the set fields over `base` and validates the result.
    pub fn apply(&self, base: AdjustmentConfig) -> Result<AdjustmentConfig, String> {
        let cfg = AdjustmentConfig {
            tau: self.tau.unwrap_or(base.tau),
            alpha: self.alpha.unwrap_or(base.alpha),
            delta: self.delta.or(base.delta),
            score_kind: self.score_kind.unwrap_or(base.score_kind),
            alert_threshold: self.alert_threshold.unwrap_or(base.alert_threshold),
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    listen: Option<SocketAddr>,
    store: Option<PathBuf>,
    retention: Option<usize>,
    anchors: Option<usize>,
    token: Option<String>,
    body_limit: Option<usize>,
    #[serde(default)]
    adjustment: AdjustmentOverrides,
}

/// Fully resolved settings for the service and the CLI verbs.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    /// Snapshot file. `None` keeps annotations in memory only.
    pub store: Option<PathBuf>,
    pub adjustment: AdjustmentConfig,
    pub retention: usize,
    /// Anchor count for diagnostics; `None` means four per class.
    pub anchors: Option<usize>,
    /// Static bearer token. `None` disables authentication.
    pub token: Option<String>,
    /// Largest accepted request body, in bytes.
    pub body_limit: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: DEFAULT_LISTEN.parse().expect("valid default address"),
            store: None,
            adjustment: AdjustmentConfig::default(),
            retention: DEFAULT_RETENTION,
            anchors: None,
            token: None,
            body_limit: DEFAULT_BODY_LIMIT,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub listen: Option<SocketAddr>,
    pub store: Option<PathBuf>,
    pub adjustment: AdjustmentOverrides,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, #[source] std::io::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ServiceConfig {
    /// Parses a TOML document over the defaults.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let file: FileConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let defaults = Self::default();
        let cfg = Self {
            listen: file.listen.unwrap_or(defaults.listen),
            store: file.store,
            adjustment: file
                .adjustment
                .apply(defaults.adjustment)
                .map_err(ConfigError::Invalid)?,
            retention: file.retention.unwrap_or(defaults.retention),
            anchors: file.anchors,
            token: file.token,
            body_limit: file.body_limit.unwrap_or(defaults.body_limit),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then `path` if given, then `flags`, then `RAAD_TOKEN`.
    pub fn resolve(path: Option<&Path>, flags: &FlagOverrides, env_token: Option<String>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.into(), e))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Some(listen) = flags.listen {
            cfg.listen = listen;
        }
        if let Some(store) = &flags.store {
            cfg.store = Some(store.clone());
        }
        cfg.adjustment = flags.adjustment.apply(cfg.adjustment).map_err(ConfigError::Invalid)?;
        if let Some(token) = env_token.filter(|t| !t.is_empty()) {
            cfg.token = Some(token);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.adjustment
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.retention < 1 {
            return Err(ConfigError::Invalid("retention must be at least 1".into()));
        }
        if self.anchors.is_some_and(|m| m < 2) {
            return Err(ConfigError::Invalid("anchors must be at least 2".into()));
        }
        if self.token.as_deref() == Some("") {
            return Err(ConfigError::Invalid("token must not be empty".into()));
        }
        Ok(())
    }
}
