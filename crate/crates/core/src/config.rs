//! Application configuration: one TOML file plus environment overrides.
//!
//! ```toml
//! session_dir = "sessions"
//! cache_dir = "cache"          # optional; caches HTTP backends only
//!
//! [session]
//! max_iterations = 5
//!
//! [navigator]
//! kind = "http"
//! url = "http://localhost:8000/v1"
//! model = "plip"
//!
//! [perceptor]
//! kind = "scripted"
//! rules = [{ response = "tile {image} shows glands" }]
//! ```
//!
//! `SLIDE_AGENT_{NAVIGATOR|PERCEPTOR|EXECUTOR}_{URL|MODEL|KEY}` override
//! the matching role; a URL turns a role into an HTTP role. Relative paths
//! resolve against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    Cached, ChatScript, DecodingParams, EmbeddingBackend, EmbeddingScript, EndpointConfig, HttpBackend, ScriptedChat,
    ScriptedEmbedder, TextChatBackend, VisionChatBackend,
};
use crate::orchestrator::{Backends, SessionConfig};

pub const ENV_PREFIX: &str = "SLIDE_AGENT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("building {role} backend: {message}")]
    Backend { role: &'static str, message: String },
}

/// One model role: an OpenAI-compatible endpoint or a canned script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoleConfig<S> {
    Http(EndpointConfig),
    Scripted(S),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub session_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    /// Default slide directory for `serve` and `eval`.
    pub slides_dir: Option<PathBuf>,
    pub max_sessions: usize,
    pub embed_workers: usize,
    pub session: SessionConfig,
    pub decoding: DecodingParams,
    pub navigator: Option<RoleConfig<EmbeddingScript>>,
    pub perceptor: Option<RoleConfig<ChatScript>>,
    pub executor: Option<RoleConfig<ChatScript>>,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            session_dir: PathBuf::from("sessions"),
            cache_dir: None,
            slides_dir: None,
            max_sessions: 8,
            embed_workers: 4,
            session: SessionConfig::default(),
            decoding: DecodingParams::default(),
            navigator: None,
            perceptor: None,
            executor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Navigator,
    Perceptor,
    Executor,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Navigator => "navigator",
            Role::Perceptor => "perceptor",
            Role::Executor => "executor",
        }
    }
}

/// Applies `{PREFIX}_{ROLE}_{URL|MODEL|KEY}` from `env` to one role.
fn override_role<S>(
    role: Role,
    current: Option<RoleConfig<S>>,
    env: &BTreeMap<String, String>,
) -> Result<Option<RoleConfig<S>>, ConfigError> {
    let var = |field: &str| env.get(&format!("{ENV_PREFIX}_{}_{field}", role.as_str().to_uppercase())).cloned();
    let (url, model, key) = (var("URL"), var("MODEL"), var("KEY"));
    if url.is_none() && model.is_none() && key.is_none() {
        return Ok(current);
    }
    let mut endpoint = match (current, url) {
        (Some(RoleConfig::Http(e)), url) => EndpointConfig {
            url: url.unwrap_or(e.url.clone()),
            ..e
        },
        (_, Some(url)) => EndpointConfig::new(url, ""),
        (other, None) => {
            tracing::warn!(role = role.as_str(), "model/key override ignored: role has no HTTP endpoint");
            return Ok(other);
        }
    };
    if let Some(m) = model {
        endpoint.model = m;
    }
    if let Some(k) = key {
        endpoint.api_key = Some(k);
    }
    if endpoint.model.is_empty() {
        return Err(ConfigError::Invalid(format!(
            "{} endpoint has no model; set {ENV_PREFIX}_{}_MODEL",
            role.as_str(),
            role.as_str().to_uppercase()
        )));
    }
    Ok(Some(RoleConfig::Http(endpoint)))
}

impl AppConfig {
    /// Reads `path` (or defaults when `None`), applies the process
    /// environment and resolves relative paths.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        Self::load_with_env(path, &env)
    }

    pub fn load_with_env(path: Option<&Path>, env: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let (mut cfg, base) = match path {
            None => (AppConfig::default(), PathBuf::from(".")),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                let cfg = Self::from_toml(&text).map_err(|message| ConfigError::Parse {
                    path: p.to_path_buf(),
                    message,
                })?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (cfg, base)
            }
        };
        cfg.navigator = override_role(Role::Navigator, cfg.navigator.take(), env)?;
        cfg.perceptor = override_role(Role::Perceptor, cfg.perceptor.take(), env)?;
        cfg.executor = override_role(Role::Executor, cfg.executor.take(), env)?;
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.session_dir);
        if let Some(p) = &mut self.cache_dir {
            fix(p);
        }
        if let Some(p) = &mut self.slides_dir {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.session.validate().map_err(ConfigError::Invalid)?;
        if self.max_sessions == 0 {
            return Err(ConfigError::Invalid("max_sessions must be positive".into()));
        }
        if self.embed_workers == 0 {
            return Err(ConfigError::Invalid("embed_workers must be positive".into()));
        }
        if self.decoding.temperature < 0.0 || self.decoding.max_tokens == 0 {
            return Err(ConfigError::Invalid(
                "decoding needs temperature >= 0 and max_tokens > 0".into(),
            ));
        }
        Ok(())
    }

    fn cache_for(&self, role: Role) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(role.as_str()))
    }

    pub fn embedder(&self) -> Result<Arc<dyn EmbeddingBackend>, ConfigError> {
        let role = Role::Navigator;
        match &self.navigator {
            None => Err(missing(role)),
            Some(RoleConfig::Scripted(s)) => Ok(Arc::new(ScriptedEmbedder::new(s.clone()))),
            Some(RoleConfig::Http(e)) => {
                let http = HttpBackend::new(e.clone()).map_err(|err| backend_err(role, err))?;
                match self.cache_for(role) {
                    Some(dir) => Ok(Arc::new(Cached::new(http, dir).map_err(|err| backend_err(role, err))?)),
                    None => Ok(Arc::new(http)),
                }
            }
        }
    }

    pub fn perceptor(&self) -> Result<Arc<dyn VisionChatBackend>, ConfigError> {
        let role = Role::Perceptor;
        match &self.perceptor {
            None => Err(missing(role)),
            Some(RoleConfig::Scripted(s)) => Ok(Arc::new(ScriptedChat::from_script(s.clone()))),
            Some(RoleConfig::Http(e)) => {
                let http = HttpBackend::new(e.clone()).map_err(|err| backend_err(role, err))?;
                match self.cache_for(role) {
                    Some(dir) => Ok(Arc::new(Cached::new(http, dir).map_err(|err| backend_err(role, err))?)),
                    None => Ok(Arc::new(http)),
                }
            }
        }
    }

    pub fn executor(&self) -> Result<Arc<dyn TextChatBackend>, ConfigError> {
        let role = Role::Executor;
        match &self.executor {
            None => Err(missing(role)),
            Some(RoleConfig::Scripted(s)) => Ok(Arc::new(ScriptedChat::from_script(s.clone()))),
            Some(RoleConfig::Http(e)) => {
                let http = HttpBackend::new(e.clone()).map_err(|err| backend_err(role, err))?;
                match self.cache_for(role) {
                    Some(dir) => Ok(Arc::new(Cached::new(http, dir).map_err(|err| backend_err(role, err))?)),
                    None => Ok(Arc::new(http)),
                }
            }
        }
    }

    /// Fresh backend instances for every role. Scripted roles start from
    /// the top of their script on each call.
    pub fn backends(&self) -> Result<Backends, ConfigError> {
        Ok(Backends {
            embedder: self.embedder()?,
            perceptor: self.perceptor()?,
            executor: self.executor()?,
        })
    }
}

fn missing(role: Role) -> ConfigError {
    ConfigError::Invalid(format!(
        "no {} backend configured; add a [{}] table or set {ENV_PREFIX}_{}_URL",
        role.as_str(),
        role.as_str(),
        role.as_str().to_uppercase()
    ))
}

fn backend_err(role: Role, err: impl std::fmt::Display) -> ConfigError {
    ConfigError::Backend {
        role: role.as_str(),
        message: err.to_string(),
    }
}
