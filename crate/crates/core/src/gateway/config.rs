//! Backend configuration, loaded from TOML.
//!
//! ```toml
//! dialect = "openai"            # openai | anthropic | mock
//! endpoint = "https://api.openai.com/v1"
//! api_key_env = "OPENAI_API_KEY"
//! model = "gpt-4o-2024-05-13"
//! embedding_model = "text-embedding-3-large"
//! timeout_secs = 60
//! requests_per_second = 5.0
//! max_in_flight = 8
//! cache_dir = ".cache/llm"
//! temperature = 0.0
//! max_tokens = 512
//!
//! [retry]
//! max_attempts = 3
//! backoff_ms = 500
//! max_backoff_ms = 8000
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dialect {
    Openai,
    Anthropic,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: 500,
            max_backoff_ms: 8_000,
        }
    }
}

/// One scripted rule of the mock backend. At most one matcher field is set;
/// none means "match everything".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockRuleConfig {
    pub contains: Option<String>,
    pub system_contains: Option<String>,
    pub user_contains: Option<String>,
    pub model: Option<String>,
    /// Single reply. `!transient`, `!timeout`, `!auth` and `!fatal` script failures.
    pub reply: Option<String>,
    /// Replies served in order; the last one repeats.
    pub replies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSettings {
    pub default: String,
    pub embedding_dim: usize,
    pub latency_ms: u64,
    pub seed: u64,
    pub rules: Vec<MockRuleConfig>,
}

impl Default for MockSettings {
    fn default() -> Self {
        MockSettings {
            default: "Neutral".into(),
            embedding_dim: 32,
            latency_ms: 0,
            seed: 0,
            rules: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub dialect: Dialect,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the credential.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub model: String,
    #[serde(default)]
    pub embedding_model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub mock: Option<MockSettings>,
}

fn default_timeout() -> u64 {
    60
}

fn default_in_flight() -> usize {
    4
}

fn default_max_tokens() -> u32 {
    512
}

impl BackendConfig {
    pub fn mock(model: impl Into<String>) -> Self {
        BackendConfig {
            dialect: Dialect::Mock,
            endpoint: None,
            api_key_env: None,
            model: model.into(),
            embedding_model: None,
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
            requests_per_second: None,
            max_in_flight: default_in_flight(),
            cache_dir: None,
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            mock: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, GatewayError> {
        let cfg: BackendConfig =
            toml::from_str(s).map_err(|e| GatewayError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; a relative `cache_dir` resolves against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&s)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        if let (Some(dir), Some(base)) = (cfg.cache_dir.as_mut(), path.parent()) {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_string()));
        if self.model.trim().is_empty() {
            return bad("model must be non-empty");
        }
        if self.retry.max_attempts < 1 {
            return bad("retry.max_attempts must be >= 1");
        }
        if let Some(r) = self.requests_per_second {
            if !r.is_finite() || r <= 0.0 {
                return bad("requests_per_second must be > 0");
            }
        }
        if self.max_in_flight < 1 {
            return bad("max_in_flight must be >= 1");
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.timeout_secs == 0 {
            return bad("timeout_secs must be positive");
        }
        if self.dialect != Dialect::Mock && self.api_key_env.as_deref().is_none_or(str::is_empty) {
            return bad("api_key_env is required for remote dialects");
        }
        Ok(())
    }

    /// Serializable view for manifests: settings only, never credentials.
    pub fn redacted(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("mock");
            if let Some(env) = obj.get_mut("api_key_env") {
                if !env.is_null() {
                    *env = serde_json::Value::String("<redacted>".into());
                }
            }
        }
        v
    }
}
