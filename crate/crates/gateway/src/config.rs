//! Platform configuration, read from TOML with command-line and environment
//! overrides applied on top.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use advqa_core::adversary::{AdversaryDescriptor, AdversaryError, AdversaryRegistry};
use advqa_core::engine::{EligibilityRules, EngineConfig, DEFAULT_HIT_PAY_CENTS, DEFAULT_MAX_QUESTIONS, DEFAULT_REVIEW_BATCH};
use advqa_core::metrics::AdjudicationPolicy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Worker,
    Validator,
    Admin,
}

/// A bearer token issued out of band. `subject` is the worker or validator
/// id the token acts as.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenConfig {
    pub token: String,
    pub role: Role,
    pub subject: String,
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_batch() -> u64 {
    DEFAULT_REVIEW_BATCH
}

fn default_max_questions() -> usize {
    DEFAULT_MAX_QUESTIONS
}

fn default_pay() -> u64 {
    DEFAULT_HIT_PAY_CENTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub review_batch_size: u64,
    #[serde(default = "default_max_questions")]
    pub max_questions: usize,
    #[serde(default = "default_pay")]
    pub hit_pay_cents: u64,
    #[serde(default)]
    pub policy: AdjudicationPolicy,
    #[serde(default)]
    pub eligibility: EligibilityRules,
    /// Adversary used when a HIT request names none; the first listed otherwise.
    #[serde(default)]
    pub default_adversary: Option<String>,
    #[serde(default)]
    pub adversaries: Vec<AdversaryDescriptor>,
    #[serde(default)]
    pub tokens: Vec<TokenConfig>,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            data_dir: default_data_dir(),
            seed: 0,
            review_batch_size: DEFAULT_REVIEW_BATCH,
            max_questions: DEFAULT_MAX_QUESTIONS,
            hit_pay_cents: DEFAULT_HIT_PAY_CENTS,
            policy: AdjudicationPolicy::default(),
            eligibility: EligibilityRules::default(),
            default_adversary: None,
            adversaries: Vec::new(),
            tokens: Vec::new(),
        }
    }
}

/// Values given on the command line or through `ADVQA_*` variables.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub listen: Option<SocketAddr>,
    pub data_dir: Option<PathBuf>,
    pub policy_threshold: Option<f64>,
    pub seed: Option<u64>,
    pub admin_token: Option<String>,
}

impl PlatformConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(listen) = o.listen {
            self.listen = listen;
        }
        if let Some(dir) = &o.data_dir {
            self.data_dir = dir.clone();
        }
        if let Some(t) = o.policy_threshold {
            self.policy.win_threshold = t;
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(token) = &o.admin_token {
            self.tokens.push(TokenConfig {
                token: token.clone(),
                role: Role::Admin,
                subject: "admin".into(),
            });
        }
    }

    /// Checks everything except the adversary count.
    pub fn validate_offline(&self) -> Result<(), ConfigError> {
        self.policy.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let rate = self.eligibility.min_approval_rate;
        if !(0.0..=1.0).contains(&rate) {
            return Err(ConfigError::Invalid(format!("min_approval_rate {rate} is outside [0, 1]")));
        }
        if self.review_batch_size == 0 {
            return Err(ConfigError::Invalid("review_batch_size must be at least 1".into()));
        }
        if self.max_questions == 0 {
            return Err(ConfigError::Invalid("max_questions must be at least 1".into()));
        }
        let mut ids = BTreeSet::new();
        for d in &self.adversaries {
            d.validate()?;
            if !ids.insert(d.id.as_str()) {
                return Err(ConfigError::Invalid(format!("adversary {} listed twice", d.id)));
            }
        }
        if let Some(id) = &self.default_adversary {
            if !ids.contains(id.as_str()) {
                return Err(ConfigError::Invalid(format!("default adversary {id} is not configured")));
            }
        }
        let mut tokens = BTreeSet::new();
        for t in &self.tokens {
            if t.token.is_empty() || t.subject.is_empty() {
                return Err(ConfigError::Invalid("tokens need a non-empty token and subject".into()));
            }
            if !tokens.insert(t.token.as_str()) {
                return Err(ConfigError::Invalid(format!("token for {} is not unique", t.subject)));
            }
        }
        Ok(())
    }

    /// Full validation for serving: at least one adversary is required.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_offline()?;
        if self.adversaries.is_empty() {
            return Err(ConfigError::Invalid("at least one adversary must be registered".into()));
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            policy: self.policy,
            review_batch_size: self.review_batch_size,
            max_questions: self.max_questions,
            hit_pay_cents: self.hit_pay_cents,
            seed: self.seed,
            eligibility: self.eligibility.clone(),
        }
    }

    pub fn registry(&self) -> Result<AdversaryRegistry, ConfigError> {
        Ok(AdversaryRegistry::from_descriptors(&self.adversaries)?)
    }

    pub fn default_adversary_id(&self) -> Option<&str> {
        self.default_adversary
            .as_deref()
            .or_else(|| self.adversaries.first().map(|d| d.id.as_str()))
    }

    pub fn event_log_path(&self) -> PathBuf {
        self.data_dir.join("events.ndjson")
    }

    pub fn export_dir(&self) -> PathBuf {
        self.data_dir.join("exports")
    }
}
