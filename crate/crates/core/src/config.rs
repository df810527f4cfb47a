//! Plain key-value configuration with `[section]` headers or dotted keys,
//! overridable from `NEWSVERDICT_<SECTION>_<KEY>` environment variables.
//!
//! ```text
//! # comments start with '#'
//! [model]
//! backend = mock
//! mock_fixtures = fixtures/chat.jsonl
//! inside.k = 2
//! ```
//!
//! Relative paths in the file resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::detection::DetectionConfig;
use crate::determination::ConflictFallback;
use crate::inside::{CharHistogramEmbedder, EmbeddingProvider, HttpEncoder};
use crate::judge::JudgeConfig;
use crate::llm::{ChatBackend, ChatCompletionsBackend, FixtureError, Gateway, MockBackend, RetryPolicy, SamplingConfig};
use crate::outside::{CachedSearch, FixtureSearchClient, SearchClient, SerpApiClient};
use crate::pipeline::{PipelineConfig, PipelineMode};

pub const ENV_PREFIX: &str = "NEWSVERDICT_";

const KNOWN_KEYS: &[&str] = &[
    "model.backend",
    "model.endpoint_url",
    "model.api_key",
    "model.name",
    "model.temperature",
    "model.top_k",
    "model.top_p",
    "model.max_new_tokens",
    "model.do_sample",
    "model.retry_limit",
    "model.backoff_ms",
    "model.concurrency",
    "model.mock_fixtures",
    "detection.n_keywords",
    "detection.truncate_chars",
    "embedding.backend",
    "embedding.endpoint_url",
    "embedding.model",
    "embedding.dim",
    "embedding.ngram",
    "inside.k",
    "inside.store_path",
    "search.backend",
    "search.endpoint_url",
    "search.api_key",
    "search.cache_dir",
    "search.retry_limit",
    "search.backoff_ms",
    "search.fixtures",
    "judge.truncate_chars",
    "judge.retry_on_unparseable",
    "determination.conflict_fallback",
    "pipeline.mode",
    "pipeline.record_timings",
    "pipeline.cache_dir",
    "pipeline.workers",
    "eval.max_failure_rate",
];

const PATH_KEYS: &[&str] = &[
    "model.mock_fixtures",
    "inside.store_path",
    "search.cache_dir",
    "search.fixtures",
    "pipeline.cache_dir",
];

pub const DEFAULT_MODEL_NAME: &str = "HuggingFaceH4/zephyr-7b-beta";
pub const DEFAULT_ENCODER_MODEL: &str = "microsoft/deberta-base";
pub const DEFAULT_SEARCH_URL: &str = "https://serpapi.com/search.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {message}")]
    Invalid { key: String, message: String },
    #[error("{key} is required: {hint}")]
    Missing { key: String, hint: String },
    #[error("cannot load fixtures for {key}: {source}")]
    Fixture {
        key: String,
        #[source]
        source: FixtureError,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    base: PathBuf,
}

/// Raw key-value pairs after parsing and overrides, before typing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
}

impl Config {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Config, ConfigError> {
        let mut config = Config::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |message: &str| ConfigError::Syntax {
                line: i + 1,
                message: message.to_string(),
            };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| syntax("unterminated section header"))?;
                let name = name.trim();
                if name.is_empty() || name.contains('.') {
                    return Err(syntax("section names are single words"));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected key = value"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(syntax("empty key"));
            }
            let key = match (&section, key.contains('.')) {
                (_, true) => key.to_string(),
                (Some(s), false) => format!("{s}.{key}"),
                (None, false) => return Err(syntax("key outside a section must be dotted")),
            };
            config.set(&key, unquote(value.trim()), base_dir)?;
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::parse(&text, &base)
    }

    pub fn set(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<(), ConfigError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                base: base_dir.to_path_buf(),
            },
        );
        Ok(())
    }

    /// Applies `NEWSVERDICT_SECTION_KEY=value` pairs; paths resolve against
    /// the working directory. Unrecognized names are ignored.
    pub fn apply_env<I, K, V>(&mut self, vars: I)
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (name, value) in vars {
            let Some(rest) = name.as_ref().strip_prefix(ENV_PREFIX) else { continue };
            let Some((section, key)) = rest.to_ascii_lowercase().split_once('_').map(|(s, k)| (s.to_string(), k.to_string())) else {
                continue;
            };
            let key = format!("{section}.{key}");
            if self.set(&key, value.as_ref(), Path::new("")).is_err() {
                log::warn!("ignoring environment variable {}", name.as_ref());
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        self.entries.get(key).map(|e| e.value.as_str()).filter(|v| !v.is_empty())
    }

    fn parsed<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::Invalid {
                key: key.to_string(),
                message: format!("{v:?}: {e}"),
            }),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        debug_assert!(PATH_KEYS.contains(&key), "{key}");
        let entry = self.entries.get(key).filter(|e| !e.value.is_empty())?;
        let p = PathBuf::from(&entry.value);
        Some(if p.is_absolute() { p } else { entry.base.join(p) })
    }
}

fn unquote(v: &str) -> &str {
    for q in ['"', '\''] {
        if let Some(inner) = v.strip_prefix(q).and_then(|s| s.strip_suffix(q)) {
            return inner;
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Live,
    Mock,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(BackendKind::Live),
            "mock" | "fixture" => Ok(BackendKind::Mock),
            other => Err(format!("expected live or mock, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub backend: BackendKind,
    pub endpoint_url: Option<String>,
    pub api_key: Option<String>,
    pub name: String,
    pub sampling: SamplingConfig,
    pub retry: RetryPolicy,
    pub concurrency: usize,
    pub mock_fixtures: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSettings {
    pub backend: BackendKind,
    pub endpoint_url: Option<String>,
    pub model: String,
    pub dim: usize,
    pub ngram: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSettings {
    pub backend: BackendKind,
    pub endpoint_url: String,
    pub api_key: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub retry_limit: u32,
    pub backoff: Duration,
    pub fixtures: Option<PathBuf>,
}

/// Fully typed and validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub model: ModelSettings,
    pub embedding: EmbeddingSettings,
    pub search: SearchSettings,
    pub pipeline: PipelineConfig,
    pub store_path: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub workers: usize,
    pub max_failure_rate: f64,
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

fn positive(key: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        Err(invalid(key, "must be positive"))
    } else {
        Ok(v)
    }
}

impl Settings {
    pub fn from_config(c: &Config) -> Result<Settings, ConfigError> {
        let sampling = SamplingConfig {
            temperature: c.parsed("model.temperature", 0.70)?,
            top_k: c.parsed("model.top_k", 50)?,
            top_p: c.parsed("model.top_p", 0.95)?,
            max_new_tokens: c.parsed("model.max_new_tokens", 256)?,
            do_sample: c.parsed("model.do_sample", true)?,
        };
        sampling.validate().map_err(|m| invalid("model", m))?;
        let model = ModelSettings {
            backend: c.parsed("model.backend", BackendKind::Live)?,
            endpoint_url: c.get("model.endpoint_url").map(str::to_string),
            api_key: c.get("model.api_key").map(str::to_string),
            name: c.get("model.name").unwrap_or(DEFAULT_MODEL_NAME).to_string(),
            sampling,
            retry: RetryPolicy {
                limit: c.parsed("model.retry_limit", 2)?,
                base_backoff: Duration::from_millis(c.parsed("model.backoff_ms", 500)?),
            },
            concurrency: positive("model.concurrency", c.parsed("model.concurrency", 4)?)?,
            mock_fixtures: c.path("model.mock_fixtures"),
        };

        let embedding_backend = c.parsed("embedding.backend", BackendKind::Live)?;
        let default_dim = match embedding_backend {
            BackendKind::Live => 768,
            BackendKind::Mock => 16,
        };
        let embedding = EmbeddingSettings {
            backend: embedding_backend,
            endpoint_url: c.get("embedding.endpoint_url").map(str::to_string),
            model: c.get("embedding.model").unwrap_or(DEFAULT_ENCODER_MODEL).to_string(),
            dim: positive("embedding.dim", c.parsed("embedding.dim", default_dim)?)?,
            ngram: positive("embedding.ngram", c.parsed("embedding.ngram", 1)?)?,
        };

        let search = SearchSettings {
            backend: c.parsed("search.backend", BackendKind::Live)?,
            endpoint_url: c.get("search.endpoint_url").unwrap_or(DEFAULT_SEARCH_URL).to_string(),
            api_key: c.get("search.api_key").map(str::to_string),
            cache_dir: c.path("search.cache_dir"),
            retry_limit: c.parsed("search.retry_limit", 2)?,
            backoff: Duration::from_millis(c.parsed("search.backoff_ms", 500)?),
            fixtures: c.path("search.fixtures"),
        };

        let pipeline = PipelineConfig {
            detection: DetectionConfig {
                n_keywords: positive("detection.n_keywords", c.parsed("detection.n_keywords", 5)?)?,
                truncate_chars: positive(
                    "detection.truncate_chars",
                    c.parsed("detection.truncate_chars", crate::prompt::DEFAULT_TRUNCATE_CHARS)?,
                )?,
            },
            k: positive("inside.k", c.parsed("inside.k", 2)?)?,
            judge: JudgeConfig {
                truncate_chars: positive(
                    "judge.truncate_chars",
                    c.parsed("judge.truncate_chars", crate::prompt::DEFAULT_TRUNCATE_CHARS)?,
                )?,
                retry_on_unparseable: c.parsed("judge.retry_on_unparseable", true)?,
            },
            conflict_fallback: c.parsed("determination.conflict_fallback", ConflictFallback::Outside)?,
            mode: c.parsed("pipeline.mode", PipelineMode::Full)?,
            record_timings: c.parsed("pipeline.record_timings", true)?,
        };

        let max_failure_rate: f64 = c.parsed("eval.max_failure_rate", 0.10)?;
        if !(0.0..=1.0).contains(&max_failure_rate) {
            return Err(invalid("eval.max_failure_rate", "must be in [0, 1]"));
        }
        Ok(Settings {
            model,
            embedding,
            search,
            pipeline,
            store_path: c.path("inside.store_path"),
            cache_dir: c.path("pipeline.cache_dir"),
            workers: positive("pipeline.workers", c.parsed("pipeline.workers", 4)?)?,
            max_failure_rate,
        })
    }

    /// Reads the file, applies process environment overrides and types it.
    pub fn load(path: impl AsRef<Path>) -> Result<Settings, ConfigError> {
        let mut config = Config::load(path)?;
        config.apply_env(std::env::vars());
        Settings::from_config(&config)
    }

    pub fn chat_backend(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        let m = &self.model;
        match m.backend {
            BackendKind::Mock => {
                let path = m.mock_fixtures.as_ref().ok_or_else(|| ConfigError::Missing {
                    key: "model.mock_fixtures".into(),
                    hint: "point it at a fixture file when model.backend = mock".into(),
                })?;
                let backend = MockBackend::from_file(path).map_err(|source| ConfigError::Fixture {
                    key: "model.mock_fixtures".into(),
                    source,
                })?;
                Ok(Arc::new(backend))
            }
            BackendKind::Live => {
                let url = m.endpoint_url.clone().ok_or_else(|| ConfigError::Missing {
                    key: "model.endpoint_url".into(),
                    hint: "set the chat-completions URL of the serving endpoint".into(),
                })?;
                let key = m.api_key.clone().ok_or_else(|| ConfigError::Missing {
                    key: "model.api_key".into(),
                    hint: format!(
                        "set it in the config file or export {ENV_PREFIX}MODEL_API_KEY, \
                         or use model.backend = mock for offline runs"
                    ),
                })?;
                Ok(Arc::new(ChatCompletionsBackend::new(url, Some(key), m.name.clone())))
            }
        }
    }

    pub fn gateway_with(&self, backend: Arc<dyn ChatBackend>) -> Gateway {
        Gateway::new(backend)
            .with_sampling(self.model.sampling.clone())
            .with_retry(self.model.retry.clone())
            .with_concurrency(self.model.concurrency)
    }

    pub fn gateway(&self) -> Result<Gateway, ConfigError> {
        Ok(self.gateway_with(self.chat_backend()?))
    }

    pub fn search_client(&self) -> Result<Arc<dyn SearchClient>, ConfigError> {
        let s = &self.search;
        match s.backend {
            BackendKind::Mock => {
                let path = s.fixtures.as_ref().ok_or_else(|| ConfigError::Missing {
                    key: "search.fixtures".into(),
                    hint: "point it at a fixture file when search.backend = fixture".into(),
                })?;
                let client = FixtureSearchClient::from_file(path).map_err(|source| ConfigError::Fixture {
                    key: "search.fixtures".into(),
                    source,
                })?;
                Ok(Arc::new(client))
            }
            BackendKind::Live => {
                let key = s.api_key.clone().ok_or_else(|| ConfigError::Missing {
                    key: "search.api_key".into(),
                    hint: format!(
                        "set it in the config file or export {ENV_PREFIX}SEARCH_API_KEY, \
                         or use search.backend = fixture for offline runs"
                    ),
                })?;
                Ok(Arc::new(
                    SerpApiClient::new(s.endpoint_url.clone(), key, s.retry_limit).with_backoff(s.backoff),
                ))
            }
        }
    }

    pub fn cached_search_with(&self, client: Arc<dyn SearchClient>) -> CachedSearch {
        CachedSearch::new(client, self.search.cache_dir.clone())
    }

    pub fn embedder(&self) -> Result<Arc<dyn EmbeddingProvider>, ConfigError> {
        let e = &self.embedding;
        match e.backend {
            BackendKind::Mock => Ok(Arc::new(CharHistogramEmbedder::new(e.dim, e.ngram))),
            BackendKind::Live => {
                let url = e.endpoint_url.clone().ok_or_else(|| ConfigError::Missing {
                    key: "embedding.endpoint_url".into(),
                    hint: "set the encoder URL, or use embedding.backend = mock for offline runs".into(),
                })?;
                Ok(Arc::new(HttpEncoder::new(url, e.model.clone(), e.dim)))
            }
        }
    }
}
