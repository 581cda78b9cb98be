//! The `lmkex.json` configuration file.
//!
//! Relative paths are resolved against the directory holding the config.

use std::path::{Path, PathBuf};

use lmkex_core::backend::{Backends, RetryPolicy};
use lmkex_core::controller::{ExtractionConfig, DEFAULT_MAX_ATTEMPTS};
use lmkex_core::model::Timestamp;
use lmkex_core::prompt::AnalogicalCase;
use lmkex_core::store::DEFAULT_VERIFICATION_THRESHOLD;
use lmkex_core::usage::LmProfile;
use lmkex_core::verify::VerificationPolicy;
use serde::Deserialize;

use crate::files::{load_script, load_template_set, parse_time, FileError, ProfileRecord};
use crate::http::{HttpBackend, API_KEY_ENV, DEFAULT_TIMEOUT_MS};

pub const DEFAULT_CONFIG: &str = "lmkex.json";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
    #[error(transparent)]
    File(#[from] FileError),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Recorded responses from a script file.
    Scripted { path: String },
    /// A live endpoint; the URL defaults to the profile's `endpoint_ref`.
    Http {
        #[serde(default)]
        url: Option<String>,
        #[serde(default)]
        timeout_ms: Option<u64>,
        #[serde(default)]
        mask_token: Option<String>,
    },
}

#[derive(Debug, Clone, Deserialize)]
struct ProfileEntry {
    #[serde(flatten)]
    profile: ProfileRecord,
    backend: BackendSpec,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRecord {
    n_samples: Option<u32>,
    agreement_threshold: Option<f64>,
    require_human: Option<bool>,
    auto_promote_min_samples: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseRecord {
    stimulus: String,
    response: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetryRecord {
    max_attempts: u32,
    initial_backoff_ms: u64,
    multiplier: u64,
}

fn default_store() -> String {
    "lmkex-store.jsonl".into()
}

fn default_usage() -> String {
    "lmkex-usage.jsonl".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    profiles: Vec<ProfileEntry>,
    #[serde(default = "default_store")]
    store_path: String,
    #[serde(default = "default_usage")]
    usage_model_path: String,
    #[serde(default)]
    policy: PolicyRecord,
    max_attempts: Option<u32>,
    retry: Option<RetryRecord>,
    /// RFC-3339 instant used instead of the wall clock.
    fixed_time: Option<String>,
    verification_threshold: Option<f64>,
    #[serde(default)]
    analogical_cases: Vec<CaseRecord>,
    templates_path: Option<String>,
    /// Environment variable holding the API key for HTTP backends.
    api_key_env: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub path: PathBuf,
    pub profiles: Vec<LmProfile>,
    pub backends: Vec<(String, BackendSpec)>,
    pub store_path: PathBuf,
    pub usage_model_path: PathBuf,
    pub extraction: ExtractionConfig,
    pub fixed_time: Option<Timestamp>,
    pub verification_threshold: f64,
    pub api_key_env: String,
    dir: PathBuf,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.into(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Config, ConfigError> {
        let invalid = |message: String| ConfigError::Invalid {
            path: path.into(),
            message,
        };
        let raw: ConfigFile = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let resolve = |p: &str| dir.join(p);

        let mut profiles = Vec::new();
        let mut backends = Vec::new();
        for entry in &raw.profiles {
            let p = entry.profile.to_profile().map_err(&invalid)?;
            if profiles.iter().any(|q: &LmProfile| q.lm_id == p.lm_id) {
                return Err(invalid(format!("duplicate profile {}", p.lm_id)));
            }
            backends.push((p.lm_id.clone(), entry.backend.clone()));
            profiles.push(p);
        }

        let defaults = VerificationPolicy::default();
        let policy = VerificationPolicy {
            n_samples: raw.policy.n_samples.unwrap_or(defaults.n_samples),
            agreement_threshold: raw.policy.agreement_threshold.unwrap_or(defaults.agreement_threshold),
            require_human: raw.policy.require_human.unwrap_or(defaults.require_human),
            auto_promote_min_samples: raw
                .policy
                .auto_promote_min_samples
                .unwrap_or(defaults.auto_promote_min_samples),
        };
        if policy.n_samples == 0 {
            return Err(invalid("policy.n_samples must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&policy.agreement_threshold) {
            return Err(invalid("policy.agreement_threshold must lie in [0, 1]".into()));
        }
        let threshold = raw.verification_threshold.unwrap_or(DEFAULT_VERIFICATION_THRESHOLD);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(invalid("verification_threshold must lie in [0, 1]".into()));
        }
        let max_attempts = raw.max_attempts.unwrap_or(DEFAULT_MAX_ATTEMPTS);
        if max_attempts == 0 {
            return Err(invalid("max_attempts must be at least 1".into()));
        }
        let fixed_time = raw.fixed_time.as_deref().map(parse_time).transpose().map_err(&invalid)?;
        let templates_path = raw.templates_path.as_deref().map(resolve);
        let templates = load_template_set(templates_path.as_deref())?;

        Ok(Config {
            path: path.into(),
            profiles: profiles.clone(),
            backends,
            store_path: resolve(&raw.store_path),
            usage_model_path: resolve(&raw.usage_model_path),
            extraction: ExtractionConfig {
                profiles,
                templates,
                policy,
                max_attempts,
                retry: raw
                    .retry
                    .map(|r| RetryPolicy {
                        max_attempts: r.max_attempts,
                        initial_backoff_ms: r.initial_backoff_ms,
                        multiplier: r.multiplier,
                    })
                    .unwrap_or_default(),
                analogical_cases: raw
                    .analogical_cases
                    .into_iter()
                    .map(|c| AnalogicalCase::new(c.stimulus, c.response))
                    .collect(),
            },
            fixed_time,
            verification_threshold: threshold,
            api_key_env: raw.api_key_env.unwrap_or_else(|| API_KEY_ENV.into()),
            dir,
        })
    }

    /// Keep only the profile for `lm_id`.
    pub fn restrict_to(&mut self, lm_id: &str) -> Result<(), ConfigError> {
        if !self.profiles.iter().any(|p| p.lm_id == lm_id) {
            return Err(ConfigError::Invalid {
                path: self.path.clone(),
                message: format!("no profile for LM {lm_id}"),
            });
        }
        self.profiles.retain(|p| p.lm_id == lm_id);
        self.extraction.profiles.retain(|p| p.lm_id == lm_id);
        self.backends.retain(|(id, _)| id == lm_id);
        Ok(())
    }

    /// Instantiate every configured backend.
    pub fn build_backends(&self) -> Result<Backends, ConfigError> {
        let api_key = std::env::var(&self.api_key_env).ok();
        let mut out = Backends::new();
        for (lm_id, spec) in &self.backends {
            let profile = self
                .profiles
                .iter()
                .find(|p| &p.lm_id == lm_id)
                .expect("backend and profile lists match");
            match spec {
                BackendSpec::Scripted { path } => {
                    out.insert(Box::new(load_script(lm_id, &self.dir.join(path))?));
                }
                BackendSpec::Http {
                    url,
                    timeout_ms,
                    mask_token,
                } => {
                    let url = url.clone().unwrap_or_else(|| profile.endpoint_ref.clone());
                    if url.is_empty() {
                        return Err(ConfigError::Invalid {
                            path: self.path.clone(),
                            message: format!("LM {lm_id} has no endpoint URL"),
                        });
                    }
                    let mut b = HttpBackend::with_timeout(
                        lm_id.clone(),
                        url,
                        profile.model_class,
                        timeout_ms.unwrap_or(DEFAULT_TIMEOUT_MS),
                    )
                    .with_api_key(api_key.clone());
                    if let Some(t) = mask_token {
                        b = b.with_mask_token(t.clone());
                    }
                    out.insert(Box::new(b));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lmkex_core::model::ModelClass;

    const MINIMAL: &str = r#"{
        "profiles": [
            {"lm_id": "gpt3", "model_class": "generative", "training_cutoff": "2019-10-01",
             "backend": {"kind": "scripted", "path": "script.json"}},
            {"lm_id": "roberta", "model_class": "masked", "training_cutoff": "2019-07-01",
             "latency_class": "local", "endpoint_ref": "http://localhost:9/fill",
             "backend": {"kind": "http", "mask_token": "<mask>"}}
        ],
        "policy": {"n_samples": 4},
        "fixed_time": "2022-04-15T00:00:00Z"
    }"#;

    #[test]
    fn parses_and_resolves() {
        let c = Config::parse(MINIMAL, Path::new("/tmp/x/lmkex.json")).unwrap();
        assert_eq!(c.profiles.len(), 2);
        assert_eq!(c.profiles[1].model_class, ModelClass::Masked);
        assert_eq!(c.store_path, Path::new("/tmp/x/lmkex-store.jsonl"));
        assert_eq!(c.extraction.policy.n_samples, 4);
        assert_eq!(c.extraction.policy.agreement_threshold, 0.6);
        assert_eq!(c.extraction.max_attempts, 5);
        assert_eq!(c.verification_threshold, 0.7);
        assert!(c.fixed_time.is_some());
        assert_eq!(c.api_key_env, "LMKEX_API_KEY");
    }

    #[test]
    fn rejects_bad_configs() {
        let p = Path::new("lmkex.json");
        assert!(Config::parse("{}", p).is_err());
        assert!(Config::parse(&MINIMAL.replace("\"n_samples\": 4", "\"n_samples\": 0"), p).is_err());
        assert!(Config::parse(&MINIMAL.replace("\"roberta\"", "\"gpt3\""), p).is_err());
        assert!(Config::parse(&MINIMAL.replace("\"policy\"", "\"polcy\""), p).is_err());
        assert!(matches!(Config::load(Path::new("/nonexistent/lmkex.json")), Err(ConfigError::Read { .. })));
    }

    #[test]
    fn restrict() {
        let mut c = Config::parse(MINIMAL, Path::new("lmkex.json")).unwrap();
        assert!(c.restrict_to("bert").is_err());
        c.restrict_to("roberta").unwrap();
        assert_eq!(c.extraction.profiles.len(), 1);
        assert!(c.build_backends().unwrap().get("roberta").is_some());
    }
}
