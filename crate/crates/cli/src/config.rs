//! TOML run configuration.
//!
//! ```toml
//! [training]          # any TrainingConfig field
//! lambda = 1.0
//! seed = 3
//!
//! [backend]
//! kind = "http"       # or "mock"
//! base_url = "http://localhost:8000/v1"
//! model = "llama-3.1-8b"
//! endpoint = "chat"   # or "completions"
//! top_k = 20
//! rules = "rules.json"  # mock only
//!
//! [encode]
//! parallel = 4
//! checkpoint_every = 1000
//! max_attempts = 3
//! ```
//!
//! Precedence is flags, then this file, then the environment
//! (`SCBM_BASE_URL`). API keys come only from `SCBM_API_KEY`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use scbm_core::gateway::Endpoint;
use scbm_core::training::TrainingConfig;
use serde::{Deserialize, Serialize};

pub const ENV_API_KEY: &str = "SCBM_API_KEY";
pub const ENV_BASE_URL: &str = "SCBM_BASE_URL";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub training: TrainingConfig,
    pub backend: BackendSection,
    pub encode: EncodeSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<String>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub endpoint: Option<Endpoint>,
    pub top_k: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub yes_table: Option<String>,
    pub rules: Option<PathBuf>,
    pub noise: Option<f64>,
    pub noise_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeSection {
    pub parallel: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub max_attempts: Option<u32>,
}

impl FileConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                FileConfig::parse(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

/// First of flag, file value, environment variable.
pub fn resolve(flag: Option<String>, file: Option<String>, env_var: &str) -> Option<String> {
    flag.or(file)
        .or_else(|| std::env::var(env_var).ok().filter(|v| !v.is_empty()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_training_section_keeps_defaults() {
        let c = FileConfig::parse("[training]\nlambda = 0.5\nseed = 4\n").unwrap();
        assert_eq!(c.training.lambda, 0.5);
        assert_eq!(c.training.seed, 4);
        assert_eq!(c.training.learning_rate, 2e-3);
        assert_eq!(c.training.epochs, 300);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(FileConfig::parse("[training]\nlamda = 0.5\n").is_err());
        assert!(FileConfig::parse("[backend]\napi_key = \"x\"\n").is_err());
    }

    #[test]
    fn flag_beats_file_beats_env() {
        assert_eq!(
            resolve(Some("a".into()), Some("b".into()), "SCBM_TEST_UNSET_VAR"),
            Some("a".into())
        );
        assert_eq!(resolve(None, Some("b".into()), "SCBM_TEST_UNSET_VAR"), Some("b".into()));
        assert_eq!(resolve(None, None, "SCBM_TEST_UNSET_VAR"), None);
    }
}
