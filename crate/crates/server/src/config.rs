use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServerError;

pub const ENV_LISTEN: &str = "ADAPTRIAL_LISTEN";
pub const ENV_DATA_DIR: &str = "ADAPTRIAL_DATA_DIR";
pub const ENV_TOKEN: &str = "ADAPTRIAL_TOKEN";
pub const ENV_SEED: &str = "ADAPTRIAL_SEED";

/// Service settings. File values are overridden by `ADAPTRIAL_*` variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Event logs live here; `None` keeps everything in memory.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Static bearer token; `None` disables authentication.
    #[serde(default)]
    pub token: Option<String>,
    /// Fixes the assignment RNG of every experiment, for reproducible runs.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: default_listen(),
            data_dir: None,
            token: None,
            seed: None,
        }
    }
}

impl ServerConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ServerError> {
        toml::from_str(text).map_err(|e| ServerError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ServerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServerError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Apply overrides from `lookup` (normally `std::env::var`).
    pub fn with_overrides(mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ServerError> {
        if let Some(v) = lookup(ENV_LISTEN) {
            self.listen = v;
        }
        if let Some(v) = lookup(ENV_DATA_DIR) {
            self.data_dir = Some(v.into());
        }
        if let Some(v) = lookup(ENV_TOKEN) {
            self.token = Some(v);
        }
        if let Some(v) = lookup(ENV_SEED) {
            let seed = v
                .parse()
                .map_err(|_| ServerError::Config(format!("{ENV_SEED} must be an unsigned integer, got `{v}`")))?;
            self.seed = Some(seed);
        }
        self.token = self.token.filter(|t| !t.is_empty());
        Ok(self)
    }

    pub fn with_env(self) -> Result<Self, ServerError> {
        self.with_overrides(|k| std::env::var(k).ok())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_file() {
        let cfg = ServerConfig::from_toml_str("listen = \"0.0.0.0:1\"\ntoken = \"a\"\n").unwrap();
        let cfg = cfg
            .with_overrides(|k| match k {
                ENV_TOKEN => Some("b".into()),
                ENV_DATA_DIR => Some("/tmp/x".into()),
                _ => None,
            })
            .unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:1");
        assert_eq!(cfg.token.as_deref(), Some("b"));
        assert_eq!(cfg.data_dir, Some(PathBuf::from("/tmp/x")));
    }

    #[test]
    fn unknown_keys_and_bad_seed_rejected() {
        assert!(ServerConfig::from_toml_str("port = 1\n").is_err());
        let err = ServerConfig::default()
            .with_overrides(|k| (k == ENV_SEED).then(|| "x".into()))
            .unwrap_err();
        assert!(err.to_string().contains(ENV_SEED));
    }

    #[test]
    fn empty_token_means_no_auth() {
        let cfg = ServerConfig::default()
            .with_overrides(|k| (k == ENV_TOKEN).then(String::new))
            .unwrap();
        assert_eq!(cfg.token, None);
    }
}
