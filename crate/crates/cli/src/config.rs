//! Audit configuration: a `key = value` file plus command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use mmbias_core::{AgentSet, BiasSource};

pub const BACKEND_URL_ENV: &str = "MMBIAS_BACKEND_URL";
pub const DEFAULT_OUT_DIR: &str = "mmbias-out";
pub const CACHE_FILE: &str = "cache.jsonl";

#[derive(Debug)]
pub enum ConfigError {
    /// A problem at a specific line of a config file.
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Line {
                path,
                line,
                message,
            } => write!(f, "{}:{line}: {message}", path.display()),
            ConfigError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            ConfigError::Invalid(message) => f.write_str(message),
        }
    }
}

impl std::error::Error for ConfigError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ConfigError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// Settings as written in a config file or given as flags; every field is
/// optional until the two layers are merged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigLayer {
    pub backend_url: Option<String>,
    pub synthetic_table: Option<PathBuf>,
    pub entities: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub survey: Option<PathBuf>,
    pub sources: Option<Vec<BiasSource>>,
    pub out: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub cache: Option<PathBuf>,
    pub no_cache: bool,
    pub agent_male: Option<String>,
    pub agent_female: Option<String>,
    pub agent_neutral: Option<String>,
}

/// Parses a comma-separated source list. `none` or an empty string selects
/// no sources.
pub fn parse_sources(value: &str) -> Result<Vec<BiasSource>, String> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in value.split(',') {
        let source: BiasSource = part.parse()?;
        if !out.contains(&source) {
            out.push(source);
        }
    }
    Ok(out)
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected true or false, got `{other}`")),
    }
}

impl ConfigLayer {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    /// Parses config text. Relative paths are resolved against the
    /// directory containing `origin`.
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let base = origin.parent().unwrap_or(Path::new(""));
        let resolve = |v: &str| base.join(v);
        let mut layer = Self::default();
        let mut seen = std::collections::HashSet::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let fail = |message: String| ConfigError::Line {
                path: origin.to_path_buf(),
                line,
                message,
            };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(fail(format!("expected `key = value`, got `{trimmed}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(fail(format!("`{key}` is set more than once")));
            }
            if value.is_empty() && key != "sources" {
                return Err(fail(format!("`{key}` has an empty value")));
            }
            match key {
                "backend_url" => layer.backend_url = Some(value.to_owned()),
                "synthetic_table" => layer.synthetic_table = Some(resolve(value)),
                "entities" => layer.entities = Some(resolve(value)),
                "manifest" => layer.manifest = Some(resolve(value)),
                "survey" => layer.survey = Some(resolve(value)),
                "out" => layer.out = Some(resolve(value)),
                "cache" => layer.cache = Some(resolve(value)),
                "sources" => layer.sources = Some(parse_sources(value).map_err(fail)?),
                "parallelism" => {
                    let n = value.parse().map_err(|_| {
                        fail(format!(
                            "parallelism must be a positive integer, got `{value}`"
                        ))
                    })?;
                    layer.parallelism = Some(n);
                }
                "no_cache" => layer.no_cache = parse_bool(value).map_err(fail)?,
                "agent_male" => layer.agent_male = Some(value.to_owned()),
                "agent_female" => layer.agent_female = Some(value.to_owned()),
                "agent_neutral" => layer.agent_neutral = Some(value.to_owned()),
                other => return Err(fail(format!("unknown key `{other}`"))),
            }
        }
        Ok(layer)
    }

    /// Field-wise merge where `self` (the flags) wins over `file`. The two
    /// backend settings move together: a backend chosen on the command line
    /// replaces whichever backend the file names.
    pub fn over(self, file: ConfigLayer) -> ConfigLayer {
        let flag_backend = self.backend_url.is_some() || self.synthetic_table.is_some();
        let (backend_url, synthetic_table) = if flag_backend {
            (self.backend_url, self.synthetic_table)
        } else {
            (file.backend_url, file.synthetic_table)
        };
        ConfigLayer {
            backend_url,
            synthetic_table,
            entities: self.entities.or(file.entities),
            manifest: self.manifest.or(file.manifest),
            survey: self.survey.or(file.survey),
            sources: self.sources.or(file.sources),
            out: self.out.or(file.out),
            parallelism: self.parallelism.or(file.parallelism),
            cache: self.cache.or(file.cache),
            no_cache: self.no_cache || file.no_cache,
            agent_male: self.agent_male.or(file.agent_male),
            agent_female: self.agent_female.or(file.agent_female),
            agent_neutral: self.agent_neutral.or(file.agent_neutral),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendChoice {
    Http(String),
    Synthetic(PathBuf),
}

/// A complete, validated audit configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditConfig {
    pub backend: Option<BackendChoice>,
    pub entities: PathBuf,
    pub manifest: Option<PathBuf>,
    pub survey: Option<PathBuf>,
    pub sources: Vec<BiasSource>,
    pub out: PathBuf,
    pub parallelism: usize,
    /// `None` disables caching.
    pub cache: Option<PathBuf>,
    pub agents: AgentSet,
}

impl AuditConfig {
    /// Validates a merged layer. `env_backend_url` is the endpoint used when
    /// neither the flags nor the file pick a backend.
    pub fn resolve(
        layer: ConfigLayer,
        env_backend_url: Option<String>,
    ) -> Result<Self, ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let backend = match (layer.backend_url, layer.synthetic_table) {
            (Some(_), Some(_)) => {
                return invalid(
                    "choose one backend: --backend-url or --synthetic-table, not both".into(),
                )
            }
            (Some(url), None) => Some(BackendChoice::Http(url)),
            (None, Some(path)) => Some(BackendChoice::Synthetic(path)),
            (None, None) => env_backend_url
                .filter(|u| !u.trim().is_empty())
                .map(BackendChoice::Http),
        };
        let Some(entities) = layer.entities else {
            return invalid(
                "no entity file: pass --entities or set `entities` in the config".into(),
            );
        };
        let sources = layer.sources.unwrap_or_else(|| BiasSource::ALL.to_vec());
        if layer.manifest.is_none() {
            if let Some(s) = sources.iter().find(|s| s.needs_images()) {
                return invalid(format!(
                    "bias source `{s}` needs an image manifest: pass --manifest or set `manifest` in the config"
                ));
            }
        }
        let parallelism = layer
            .parallelism
            .unwrap_or(mmbias_core::backend::DEFAULT_PARALLELISM);
        if parallelism == 0 {
            return invalid("--parallelism must be at least 1".into());
        }
        let out = layer.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        let cache = if layer.no_cache {
            None
        } else {
            Some(layer.cache.unwrap_or_else(|| out.join(CACHE_FILE)))
        };
        let defaults = AgentSet::default();
        let pick = |v: Option<String>, g| v.unwrap_or_else(|| defaults.surface(g).to_owned());
        use mmbias_core::AgentGender::*;
        let agents = AgentSet::new(
            pick(layer.agent_male, Male),
            pick(layer.agent_female, Female),
            pick(layer.agent_neutral, Neutral),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        Ok(Self {
            backend,
            entities,
            manifest: layer.manifest,
            survey: layer.survey,
            sources,
            out,
            parallelism,
            cache,
            agents,
        })
    }
}
