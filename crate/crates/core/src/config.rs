//! Server configuration file.
//!
//! ```json
//! {
//!   "gateway": { "bind_port": 8080, "base_url": "http://localhost:8080" },
//!   "scaler": { "max_instances": 8 },
//!   "snapshot_path": "registry.json",
//!   "manifests": ["manifests/los-predictor.json"]
//! }
//! ```
//!
//! Relative paths resolve against the config file's directory.
//! `FHIRFN_PORT` and `FHIRFN_BASE_URL` override the gateway settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayConfig};
use crate::model::ManifestFile;
use crate::registry::RegistryError;
use crate::scaler::ScalerConfig;

pub const PORT_ENV: &str = "FHIRFN_PORT";
pub const BASE_URL_ENV: &str = "FHIRFN_BASE_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Register { path: PathBuf, source: RegistryError },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub gateway: GatewayConfig,
    pub scaler: ScalerConfig,
    pub snapshot_path: Option<PathBuf>,
    /// Manifests registered at boot, in order.
    pub manifests: Vec<PathBuf>,
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.to_owned(), message: e.to_string() })
}

impl ServerConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut config: ServerConfig = serde_json::from_str(&read(path)?)
            .map_err(|e| ConfigError::Read { path: path.to_owned(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.snapshot_path = config.snapshot_path.map(|p| base.join(p));
        config.manifests = config.manifests.iter().map(|p| base.join(p)).collect();
        Ok(config)
    }

    /// Applies environment overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(port) = var(PORT_ENV) {
            self.gateway.bind_port =
                port.parse().map_err(|_| ConfigError::Invalid(format!("{PORT_ENV}={port:?} is not a port")))?;
        }
        if let Some(url) = var(BASE_URL_ENV) {
            self.gateway.base_url = url;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.gateway.validate().map_err(ConfigError::Invalid)?;
        self.scaler.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Builds a gateway, restores the snapshot and registers the boot
    /// manifests. Manifests already restored from the snapshot are skipped.
    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        self.validate()?;
        let mut builder = Gateway::builder(self.gateway.clone()).scaler(self.scaler.clone());
        if let Some(path) = &self.snapshot_path {
            builder = builder.snapshot_path(path);
        }
        let gateway = builder.build();
        let snapshot = self.snapshot_path.clone().unwrap_or_default();
        gateway.load_snapshot().map_err(|source| ConfigError::Register { path: snapshot, source })?;
        for path in &self.manifests {
            let file = ManifestFile::from_json(&read(path)?)
                .map_err(|e| ConfigError::Read { path: path.clone(), message: e.to_string() })?;
            match gateway.register_file(&file) {
                Ok(_) | Err(RegistryError::DuplicateVersion { .. }) => {}
                Err(source) => return Err(ConfigError::Register { path: path.clone(), source }),
            }
        }
        Ok(gateway)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn env_overrides_port_and_base_url() {
        let mut c = ServerConfig::default();
        let env: HashMap<&str, &str> = [(PORT_ENV, "9090"), (BASE_URL_ENV, "http://gw.example:9090")].into();
        c.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(c.gateway.bind_port, 9090);
        assert_eq!(c.gateway.base_url, "http://gw.example:9090");
        assert!(c.apply_env(|k| (k == PORT_ENV).then(|| "99999".into())).is_err());
    }

    #[test]
    fn boots_manifests_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let manifests = dir.path().join("m");
        std::fs::create_dir(&manifests).unwrap();
        for (name, text) in [("a.json", crate::reference::LOS_PREDICTOR), ("b.json", crate::reference::LOS_FOLLOWUP)] {
            std::fs::write(manifests.join(name), text).unwrap();
        }
        let cfg = dir.path().join("fhirfn.json");
        std::fs::write(
            &cfg,
            r#"{"scaler":{"max_instances":2},"snapshot_path":"snap.json","manifests":["m/a.json","m/b.json"]}"#,
        )
        .unwrap();
        let config = ServerConfig::from_file(&cfg).unwrap();
        assert_eq!(config.scaler.max_instances, 2);
        assert_eq!(config.scaler.queue_capacity, ScalerConfig::default().queue_capacity);
        let gw = config.build_gateway().unwrap();
        assert_eq!(gw.registry().active_entries().count(), 2);
        drop(gw);
        // Second boot restores from the snapshot and skips the duplicates.
        let gw = config.build_gateway().unwrap();
        assert_eq!(gw.registry().active_entries().count(), 2);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut c = ServerConfig::default();
        c.gateway.max_body_bytes = 0;
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<ServerConfig>(r#"{"gatway":{}}"#).is_err());
    }
}
