//! Run configuration: TOML with `${VAR}` interpolation, and the backends
//! and agents it describes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::DEFAULT_GRID;
use crate::backends::{
    token_env_var, BackendId, CoordinateSpace, RemoteBackend, RemoteConfig, RetryPolicy, Role, Script,
    ScriptedBackend, SharedBackend,
};
use crate::model::ViewLabel;
use crate::router::RouterConfig;
use crate::scoring::DEFAULT_JUDGE_RUNS;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Parse(String),
    #[error("environment variable `{0}` referenced by the config is not set")]
    MissingVar(String),
    #[error("backend `{backend}` needs a token in `{var}`, which is not set")]
    MissingToken { backend: String, var: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Remote,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub name: String,
    pub roles: Vec<Role>,
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinate_space: Option<CoordinateSpace>,
    /// Variable holding the bearer token; defaults to `EDABENCH_TOKEN_<NAME>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
    /// Endpoint accepts unauthenticated requests.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub no_auth: bool,
    /// Reply script, relative to the config file. Required for scripted
    /// backends and used for remote ones under a dry run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

impl BackendConfig {
    pub fn id(&self) -> Result<BackendId, ConfigError> {
        BackendId::new(self.name.clone(), self.roles.iter().copied(), self.coordinate_space)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn token_var(&self) -> String {
        self.token_env.clone().unwrap_or_else(|| token_env_var(&self.name))
    }
}

/// How an evaluated agent turns a view into an answer and a click.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentKind {
    /// Comprehender + grounder + validator router.
    Edagent {
        comprehender: String,
        grounder: String,
        /// Defaults to the comprehender.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        validator: Option<String>,
    },
    /// A single grounding model driven by the raw question; no answer text.
    Grounder { grounder: String },
    /// One multimodal model that both answers and grounds the question.
    Mllm { model: String },
}

impl AgentKind {
    pub fn produces_answer(&self) -> bool {
        !matches!(self, AgentKind::Grounder { .. })
    }

    fn uses(&self) -> Vec<(&str, Role)> {
        match self {
            AgentKind::Edagent {
                comprehender,
                grounder,
                validator,
            } => vec![
                (comprehender.as_str(), Role::Comprehend),
                (grounder.as_str(), Role::Ground),
                (validator.as_deref().unwrap_or(comprehender), Role::Validate),
            ],
            AgentKind::Grounder { grounder } => vec![(grounder.as_str(), Role::Ground)],
            AgentKind::Mllm { model } => vec![(model.as_str(), Role::Comprehend), (model.as_str(), Role::Ground)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: AgentKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Manifest path, relative to the config file.
    pub dataset: String,
    #[serde(default = "default_out")]
    pub out: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_views")]
    pub views: Vec<ViewLabel>,
    /// Backend that grades answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<String>,
    #[serde(default = "default_judge_runs")]
    pub judge_runs: u32,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_heat_grid")]
    pub heat_grid: [usize; 2],
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default)]
    pub backends: Vec<BackendConfig>,
    #[serde(default)]
    pub agents: Vec<AgentConfig>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> String {
    "runs".into()
}

fn default_views() -> Vec<ViewLabel> {
    ViewLabel::ALL.to_vec()
}

fn default_judge_runs() -> u32 {
    DEFAULT_JUDGE_RUNS
}

fn default_top_k() -> usize {
    6
}

fn default_heat_grid() -> [usize; 2] {
    [DEFAULT_GRID.0, DEFAULT_GRID.1]
}

/// Replaces every `${NAME}` with the variable's value from `lookup`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let re = Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static pattern");
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for cap in re.captures_iter(text) {
        let whole = cap.get(0).expect("match");
        let name = &cap[1];
        let value = lookup(name).ok_or_else(|| ConfigError::MissingVar(name.to_string()))?;
        out.push_str(&text[last..whole.start()]);
        out.push_str(&value);
        last = whole.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

fn interpolate_value(v: &mut toml::Value, lookup: &dyn Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
    match v {
        toml::Value::String(s) => *s = interpolate(s, lookup)?,
        toml::Value::Array(items) => {
            for item in items {
                interpolate_value(item, lookup)?;
            }
        }
        toml::Value::Table(t) => {
            for (_, item) in t.iter_mut() {
                interpolate_value(item, lookup)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::parse(&text, &base, |k| std::env::var(k).ok())
    }

    /// Parses TOML text, interpolating string values (comments are left alone).
    pub fn parse(text: &str, base_dir: &Path, lookup: impl Fn(&str) -> Option<String>) -> Result<Config, ConfigError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        interpolate_value(&mut value, &lookup)?;
        let mut cfg: Config = value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.resolve(&self.dataset)
    }

    pub fn backend(&self, name: &str) -> Option<&BackendConfig> {
        self.backends.iter().find(|b| b.name == name)
    }

    pub fn any_answers(&self) -> bool {
        self.agents.iter().any(|a| a.kind.produces_answer())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.judge_runs < 1 {
            return invalid("judge_runs must be at least 1".into());
        }
        if self.views.is_empty() {
            return invalid("no views selected".into());
        }
        if self.heat_grid.contains(&0) {
            return invalid("heat_grid dimensions must be positive".into());
        }
        self.retry.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.router.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut seen = BTreeMap::new();
        for b in &self.backends {
            if seen.insert(b.name.as_str(), ()).is_some() {
                return invalid(format!("duplicate backend `{}`", b.name));
            }
            b.id()?;
            match b.kind {
                BackendKind::Scripted if b.script.is_none() => {
                    return invalid(format!("scripted backend `{}` has no script", b.name))
                }
                BackendKind::Remote if b.endpoint.is_none() || b.model.is_none() => {
                    return invalid(format!("remote backend `{}` needs endpoint and model", b.name))
                }
                _ => {}
            }
        }
        if self.agents.is_empty() {
            return invalid("no agents configured".into());
        }
        let mut names = BTreeMap::new();
        for a in &self.agents {
            if a.name.is_empty() || a.name.contains(['/', '\\']) || names.insert(a.name.as_str(), ()).is_some() {
                return invalid(format!("agent name `{}` is empty, duplicated or contains a path separator", a.name));
            }
            for (backend, role) in a.kind.uses() {
                let b = self
                    .backend(backend)
                    .ok_or_else(|| ConfigError::Invalid(format!("agent `{}` uses unknown backend `{backend}`", a.name)))?;
                if !b.roles.contains(&role) {
                    return invalid(format!("agent `{}` needs `{backend}` to have the {role} role", a.name));
                }
            }
        }
        if self.any_answers() {
            let judge = self
                .judge
                .as_deref()
                .ok_or_else(|| ConfigError::Invalid("agents produce answers but no judge is configured".into()))?;
            match self.backend(judge) {
                Some(b) if b.roles.contains(&Role::Judge) => {}
                _ => return invalid(format!("judge `{judge}` is not a backend with the judge role")),
            }
        }
        Ok(())
    }

    /// Keeps only the named agents, in config order.
    pub fn select_agents(&mut self, names: &[String]) -> Result<(), ConfigError> {
        if let Some(missing) = names.iter().find(|n| !self.agents.iter().any(|a| &a.name == *n)) {
            return Err(ConfigError::Invalid(format!("unknown agent `{missing}`")));
        }
        self.agents.retain(|a| names.contains(&a.name));
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, leaving out the output root so
    /// the same evaluation hashes the same wherever it is written.
    pub fn digest(&self) -> String {
        let mut snapshot = serde_json::to_value(self).expect("config serializes");
        snapshot.as_object_mut().expect("object").remove("out");
        hex::encode(Sha256::digest(snapshot.to_string().as_bytes()))
    }

    /// Instantiates every backend. Remote backends need their token unless
    /// `dry_run` swaps them for their scripts.
    pub fn build_backends(&self, dry_run: bool) -> Result<BTreeMap<String, SharedBackend>, ConfigError> {
        let mut out: BTreeMap<String, SharedBackend> = BTreeMap::new();
        for b in &self.backends {
            let id = b.id()?;
            let scripted = dry_run || b.kind == BackendKind::Scripted;
            let backend: SharedBackend = if scripted {
                let rel = b.script.as_deref().ok_or_else(|| {
                    ConfigError::Invalid(format!("dry run needs a script for backend `{}`", b.name))
                })?;
                let script = Script::load(&self.resolve(rel)).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Arc::new(ScriptedBackend::new(id, script))
            } else {
                let token = if b.no_auth {
                    None
                } else {
                    let var = b.token_var();
                    Some(std::env::var(&var).map_err(|_| ConfigError::MissingToken {
                        backend: b.name.clone(),
                        var,
                    })?)
                };
                let cfg = RemoteConfig {
                    endpoint: b.endpoint.clone().unwrap_or_default(),
                    model: b.model.clone().unwrap_or_default(),
                    token,
                    timeout: Duration::from_secs(b.timeout_secs),
                };
                Arc::new(RemoteBackend::new(id, cfg).map_err(|e| ConfigError::Invalid(e.to_string()))?)
            };
            out.insert(b.name.clone(), backend);
        }
        Ok(out)
    }

    /// Stable identity of a backend's behavior: the endpoint and model for
    /// remote backends, the script bytes for scripted ones.
    pub fn fingerprint(&self, b: &BackendConfig, dry_run: bool) -> String {
        let mut h = Sha256::new();
        if dry_run || b.kind == BackendKind::Scripted {
            let bytes = b
                .script
                .as_deref()
                .and_then(|s| std::fs::read(self.resolve(s)).ok())
                .unwrap_or_default();
            h.update(b"script\n");
            h.update(&bytes);
        } else {
            h.update(b"remote\n");
            h.update(b.endpoint.as_deref().unwrap_or_default().as_bytes());
            h.update(b"\n");
            h.update(b.model.as_deref().unwrap_or_default().as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}
