//! Flat `key = value` run configuration.
//!
//! ```text
//! # lines starting with '#' are comments
//! strategy = CHOP
//! corpus = manuals.jsonl
//! k = 1, 3, 5, 10
//! embedder.dimension = 512
//! gateway.backend = scripted
//! gateway.transcript = transcript.jsonl
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composer::{EmbedderDescriptor, DEFAULT_DIMENSION};
use crate::continuity::DEFAULT_ANCHOR_CAP;
use crate::evalkit::DEFAULT_MIN_OVERLAP;
use crate::vecstore::HnswParams;

pub const DEFAULT_API_KEY_ENV: &str = "CHOP_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("`{key}`: {message}")]
    Value { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "CHOP")]
    Chop,
    #[serde(rename = "NAIVE_500T")]
    Naive500T,
    #[serde(rename = "COSINE_CHUNKING")]
    CosineChunking,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Chop, Strategy::Naive500T, Strategy::CosineChunking];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Chop => "CHOP",
            Strategy::Naive500T => "NAIVE_500T",
            Strategy::CosineChunking => "COSINE_CHUNKING",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "CHOP" => Ok(Strategy::Chop),
            "NAIVE_500T" | "NAIVE" => Ok(Strategy::Naive500T),
            "COSINE_CHUNKING" | "COSINE" => Ok(Strategy::CosineChunking),
            other => Err(format!(
                "unknown strategy `{other}` (expected CHOP, NAIVE_500T or COSINE_CHUNKING)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    #[default]
    Exact,
    Ann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowParams {
    pub size: usize,
    pub overlap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderBackend {
    #[default]
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub backend: EmbedderBackend,
    pub dimension: usize,
    pub seed: u64,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: String,
}

impl EmbedderConfig {
    pub fn descriptor(&self) -> EmbedderDescriptor {
        match self.backend {
            EmbedderBackend::Hash => EmbedderDescriptor::local_hash(self.dimension, self.seed),
            EmbedderBackend::Remote => EmbedderDescriptor {
                backend: "remote".into(),
                dimension: self.dimension,
                seed: None,
                model: self.model.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    /// Replay responses from a transcript.
    #[default]
    Scripted,
    Remote,
    /// Remote calls, appended to the transcript as they complete.
    Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub backend: GatewayMode,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub transcript: Option<PathBuf>,
    pub api_key_env: String,
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    pub chop: WindowParams,
    /// Stitch every corpus document into one file before chunking. When
    /// false each corpus record is treated as an already stitched file.
    pub stitch: bool,
    pub naive: WindowParams,
    pub cosine_threshold: f64,
    pub anchor_cap: usize,
    pub k_list: Vec<usize>,
    pub generation_k: usize,
    pub generate: bool,
    pub search: SearchMode,
    pub build_ann: bool,
    pub ann: HnswParams,
    pub min_overlap: f64,
    pub embedder: EmbedderConfig,
    pub gateway: GatewayConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Chop,
            chop: WindowParams { size: 500, overlap: 0 },
            stitch: true,
            naive: WindowParams {
                size: 500,
                overlap: 100,
            },
            cosine_threshold: 0.35,
            anchor_cap: DEFAULT_ANCHOR_CAP,
            k_list: vec![1, 3, 5, 10],
            generation_k: 5,
            generate: false,
            search: SearchMode::Exact,
            build_ann: true,
            ann: HnswParams::default(),
            min_overlap: DEFAULT_MIN_OVERLAP,
            embedder: EmbedderConfig {
                backend: EmbedderBackend::Hash,
                dimension: DEFAULT_DIMENSION,
                seed: 0,
                endpoint: None,
                model: None,
                api_key_env: DEFAULT_API_KEY_ENV.into(),
            },
            gateway: GatewayConfig {
                backend: GatewayMode::Scripted,
                endpoint: None,
                model: None,
                transcript: None,
                api_key_env: DEFAULT_API_KEY_ENV.into(),
                max_in_flight: 4,
            },
            paths: Paths::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        message: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            message: format!("expected a boolean, got `{value}`"),
        }),
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T, ConfigError> {
    serde_json::from_value(serde_json::Value::String(value.to_ascii_lowercase())).map_err(|_| ConfigError::Value {
        key: key.into(),
        message: format!("unsupported value `{value}`"),
    })
}

fn non_empty(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_string())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&raw, path.parent())
    }

    /// Parses and validates config text. `base` anchors relative paths.
    pub fn parse(raw: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, line) in raw.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Line {
                    line: i + 1,
                    message: "expected `key = value`".into(),
                });
            };
            config.set(key.trim(), value.trim(), base).map_err(|e| ConfigError::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Applies one setting. Also used for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<(), ConfigError> {
        let path = |v: &str| -> Option<PathBuf> {
            non_empty(v).map(|v| match base {
                Some(b) if Path::new(&v).is_relative() => b.join(v),
                _ => PathBuf::from(v),
            })
        };
        match key {
            "strategy" => self.strategy = parse(key, value)?,
            "chop.chunk_size" => self.chop.size = parse(key, value)?,
            "chop.overlap" => self.chop.overlap = parse(key, value)?,
            "chop.stitch" => self.stitch = parse_bool(key, value)?,
            "naive.chunk_size" => self.naive.size = parse(key, value)?,
            "naive.overlap" => self.naive.overlap = parse(key, value)?,
            "cosine.threshold" => self.cosine_threshold = parse(key, value)?,
            "anchor_cap" => self.anchor_cap = parse(key, value)?,
            "k" => {
                self.k_list = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_, _>>()?
            }
            "generation_k" => self.generation_k = parse(key, value)?,
            "generate" => self.generate = parse_bool(key, value)?,
            "search" => self.search = parse_enum(key, value)?,
            "build_ann" => self.build_ann = parse_bool(key, value)?,
            "ann.m" => self.ann.m = parse(key, value)?,
            "ann.ef_construction" => self.ann.ef_construction = parse(key, value)?,
            "ann.ef_search" => self.ann.ef_search = parse(key, value)?,
            "ann.seed" => self.ann.seed = parse(key, value)?,
            "min_overlap" => self.min_overlap = parse(key, value)?,
            "embedder.backend" => self.embedder.backend = parse_enum(key, value)?,
            "embedder.dimension" => self.embedder.dimension = parse(key, value)?,
            "embedder.seed" => self.embedder.seed = parse(key, value)?,
            "embedder.endpoint" => self.embedder.endpoint = non_empty(value),
            "embedder.model" => self.embedder.model = non_empty(value),
            "embedder.api_key_env" => self.embedder.api_key_env = value.into(),
            "gateway.backend" => self.gateway.backend = parse_enum(key, value)?,
            "gateway.endpoint" => self.gateway.endpoint = non_empty(value),
            "gateway.model" => self.gateway.model = non_empty(value),
            "gateway.transcript" => self.gateway.transcript = path(value),
            "gateway.api_key_env" => self.gateway.api_key_env = value.into(),
            "gateway.max_in_flight" => self.gateway.max_in_flight = parse(key, value)?,
            "corpus" => self.paths.corpus = path(value),
            "queries" => self.paths.queries = path(value),
            "index" => self.paths.index = path(value),
            "report_dir" => self.paths.report_dir = path(value),
            _ => {
                return Err(ConfigError::Value {
                    key: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        for (name, w) in [("chop", self.chop), ("naive", self.naive)] {
            if w.size == 0 || w.overlap >= w.size {
                return invalid(format!(
                    "{name} window needs 0 <= overlap < size, got size {} overlap {}",
                    w.size, w.overlap
                ));
            }
        }
        if !(-1.0..=1.0).contains(&self.cosine_threshold) {
            return invalid(format!("cosine.threshold {} outside [-1, 1]", self.cosine_threshold));
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return invalid("k needs one or more positive values".into());
        }
        if self.k_list.windows(2).any(|w| w[0] >= w[1]) {
            return invalid(format!("k values must be strictly ascending, got {:?}", self.k_list));
        }
        if self.generation_k == 0 {
            return invalid("generation_k must be positive".into());
        }
        if self.anchor_cap == 0 {
            return invalid("anchor_cap must be positive".into());
        }
        if !(self.min_overlap > 0.0 && self.min_overlap <= 1.0) {
            return invalid(format!("min_overlap {} outside (0, 1]", self.min_overlap));
        }
        if self.embedder.dimension == 0 {
            return invalid("embedder.dimension must be positive".into());
        }
        if self.ann.m < 2 || self.ann.ef_construction == 0 || self.ann.ef_search == 0 {
            return invalid("ann.m must be at least 2 and ann.ef_* positive".into());
        }
        if self.gateway.max_in_flight == 0 {
            return invalid("gateway.max_in_flight must be positive".into());
        }
        Ok(())
    }

    pub fn max_k(&self) -> usize {
        self.k_list.iter().copied().max().unwrap_or(1)
    }
}
