//! `agent.toml`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const DEFAULT_LOCAL_BIND: &str = "127.0.0.1:47820";
pub const DEFAULT_SCAN_INTERVAL: Duration = Duration::from_secs(2);

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid agent config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub server_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    /// Read the token from this file instead of `token`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_file: Option<PathBuf>,
    pub data_dir: PathBuf,
    /// Protocol watch directories are resolved against this.
    pub watch_root: PathBuf,
    #[serde(default = "default_scan_interval")]
    pub scan_interval_secs: f64,
    #[serde(default = "default_sync_interval")]
    pub sync_interval_secs: f64,
    /// Generated and persisted in the data directory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<String>,
    #[serde(default = "default_local_bind")]
    pub local_bind: String,
    /// Static files served at `/` by the local API.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ui_dir: Option<PathBuf>,
}

fn default_scan_interval() -> f64 {
    DEFAULT_SCAN_INTERVAL.as_secs_f64()
}

fn default_sync_interval() -> f64 {
    1.0
}

fn default_local_bind() -> String {
    DEFAULT_LOCAL_BIND.to_string()
}

impl AgentConfig {
    pub fn new(server_url: &str, data_dir: impl Into<PathBuf>, watch_root: impl Into<PathBuf>) -> Self {
        Self {
            server_url: server_url.to_string(),
            token: None,
            token_file: None,
            data_dir: data_dir.into(),
            watch_root: watch_root.into(),
            scan_interval_secs: default_scan_interval(),
            sync_interval_secs: default_sync_interval(),
            agent_id: None,
            local_bind: default_local_bind(),
            ui_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Self = toml::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.scan_interval_secs > 0.0) || !(self.sync_interval_secs > 0.0) {
            return Err(ConfigError::Invalid("intervals must be positive".into()));
        }
        let addr: SocketAddr = self
            .local_bind
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("local_bind '{}' is not an address", self.local_bind)))?;
        if !addr.ip().is_loopback() {
            return Err(ConfigError::Invalid(format!(
                "local_bind must be a loopback address, got {}",
                addr.ip()
            )));
        }
        Ok(())
    }

    pub fn scan_interval(&self) -> Duration {
        Duration::from_secs_f64(self.scan_interval_secs)
    }

    pub fn sync_interval(&self) -> Duration {
        Duration::from_secs_f64(self.sync_interval_secs)
    }

    /// The bearer secret from `token` or `token_file`.
    pub fn resolve_token(&self) -> Result<Option<String>, ConfigError> {
        if let Some(t) = &self.token {
            return Ok(Some(t.clone()));
        }
        match &self.token_file {
            None => Ok(None),
            Some(path) => std::fs::read_to_string(path)
                .map(|s| Some(s.trim().to_string()))
                .map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_file() {
        let c: AgentConfig = toml::from_str(
            r#"
            server_url = "http://lab:8080"
            token = "lp_x"
            data_dir = "/var/lib/lp"
            watch_root = "/data"
            "#,
        )
        .unwrap();
        assert_eq!(c.local_bind, DEFAULT_LOCAL_BIND);
        assert_eq!(c.scan_interval(), Duration::from_secs(2));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_non_loopback_bind() {
        let mut c = AgentConfig::new("http://x", "/d", "/w");
        c.local_bind = "0.0.0.0:47820".into();
        assert!(c.validate().is_err());
    }
}
