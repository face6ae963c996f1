//! Service configuration: a TOML file with `WORKSHEET_*` environment overrides.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use worksheet::eval::Thresholds;
use worksheet::llm::LlmConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BusyPolicy {
    /// A second turn on a busy session waits for the first.
    #[default]
    Wait,
    /// A second turn on a busy session gets 409.
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub bind: String,
    pub data_dir: PathBuf,
    /// Spec `name` resolves to `name.json`, else `name.csv`, in this directory.
    pub specs_dir: PathBuf,
    /// Tables for spec `name` live in `kb_root/name/`, with an optional `translations.json`.
    pub kb_root: PathBuf,
    pub busy: BusyPolicy,
    /// Field names whose values are masked in event logs.
    pub redact_fields: Vec<String>,
    pub seed: u64,
    /// Fixed date for the parser prompt; today when unset.
    pub clock: Option<NaiveDate>,
    pub llm: LlmConfig,
    pub thresholds: Thresholds,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            bind: "127.0.0.1:8080".into(),
            data_dir: "data".into(),
            specs_dir: "specs".into(),
            kb_root: "kb".into(),
            busy: BusyPolicy::Wait,
            redact_fields: vec![],
            seed: 0,
            clock: None,
            llm: LlmConfig::default(),
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
}

fn parse_env<T: std::str::FromStr>(var: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.trim().parse().map_err(|e: T::Err| ConfigError::Env { var: var.into(), message: e.to_string() })
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, toml::de::Error> {
        toml::from_str(text)
    }

    /// File (if given) then environment, looked up through `env`.
    pub fn load_with(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Config, ConfigError> {
        let mut c = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::File { path: p.display().to_string(), message: e.to_string() })?;
                Config::from_toml(&text).map_err(|e| ConfigError::File { path: p.display().to_string(), message: e.to_string() })?
            }
            None => Config::default(),
        };
        c.apply_env(env)?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
        Config::load_with(path, |k| std::env::var(k).ok())
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |k: &str| env(k).filter(|v| !v.trim().is_empty());
        if let Some(v) = get("WORKSHEET_BIND") {
            self.bind = v;
        }
        if let Some(v) = get("WORKSHEET_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = get("WORKSHEET_SPECS_DIR") {
            self.specs_dir = v.into();
        }
        if let Some(v) = get("WORKSHEET_KB_ROOT") {
            self.kb_root = v.into();
        }
        if let Some(v) = get("WORKSHEET_BUSY") {
            self.busy = match v.trim() {
                "wait" => BusyPolicy::Wait,
                "reject" => BusyPolicy::Reject,
                other => return Err(ConfigError::Env { var: "WORKSHEET_BUSY".into(), message: format!("expected wait or reject, got `{other}`") }),
            };
        }
        if let Some(v) = get("WORKSHEET_REDACT_FIELDS") {
            self.redact_fields = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect();
        }
        if let Some(v) = get("WORKSHEET_SEED") {
            self.seed = parse_env("WORKSHEET_SEED", &v)?;
        }
        if let Some(v) = get("WORKSHEET_CLOCK") {
            self.clock = Some(parse_env("WORKSHEET_CLOCK", &v)?);
        }
        if let Some(v) = get("WORKSHEET_LLM_BASE_URL") {
            self.llm.base_url = v;
        }
        if let Some(v) = get("WORKSHEET_LLM_MODEL") {
            self.llm.model = v;
        }
        if let Some(v) = get("WORKSHEET_LLM_API_KEY_ENV") {
            self.llm.api_key_env = v;
        }
        for (var, slot) in [
            ("WORKSHEET_THRESHOLD_SP", &mut self.thresholds.sp),
            ("WORKSHEET_THRESHOLD_EX", &mut self.thresholds.ex),
            ("WORKSHEET_THRESHOLD_DA", &mut self.thresholds.da),
            ("WORKSHEET_THRESHOLD_GOAL", &mut self.thresholds.goal),
        ] {
            if let Some(v) = get(var) {
                *slot = Some(parse_env(var, &v)?);
            }
        }
        Ok(())
    }
}
