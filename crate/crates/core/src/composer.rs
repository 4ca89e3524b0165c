//! Prefix composition and embedding.
//!
//! Every chunk is embedded as `prefix + "\n" + chunk text`, where the prefix
//! is the rendered signature of the chunk. Queries are embedded raw.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::cnm::Cnm;
use crate::corpus::Chunk;
use crate::llm_gateway::{GatewayError, InFlightLimit, RetryPolicy};

/// Version tag of the prefix rendering, stored in index metadata.
pub const PREFIX_FORMAT: &str = "pfx/v1";
pub const PREFIX_SEPARATOR: &str = "\n";
pub const DEFAULT_DIMENSION: usize = 3072;
pub const REMOTE_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("vector has non-finite entries")]
    NonFinite,
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("expected dimension {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("embedding backend: {0}")]
    Backend(#[from] GatewayError),
}

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes `values` to unit Euclidean norm.
    pub fn from_raw(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::ZeroNorm);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { values })
    }

    /// Wraps values that are already unit-norm, such as vectors read back
    /// from a store, without touching their bits.
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values)
    }
}

/// Eight independent accumulators so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Cosine similarity of two unit vectors.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    a.dot(b)
}

/// Identifies how vectors were produced, so stored indexes are
/// self-describing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderDescriptor {
    pub backend: String,
    pub dimension: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl EmbedderDescriptor {
    pub fn local_hash(dimension: usize, seed: u64) -> Self {
        Self {
            backend: "local-hash".into(),
            dimension,
            seed: Some(seed),
            model: None,
        }
    }

    /// Human-readable differences against another descriptor.
    pub fn differences(&self, other: &EmbedderDescriptor) -> Vec<String> {
        let mut out = Vec::new();
        if self.backend != other.backend {
            out.push(format!("embedder backend {} != {}", self.backend, other.backend));
        }
        if self.dimension != other.dimension {
            out.push(format!("dimension {} != {}", self.dimension, other.dimension));
        }
        if self.seed != other.seed {
            out.push(format!("embedder seed {:?} != {:?}", self.seed, other.seed));
        }
        if self.model != other.model {
            out.push(format!("embedding model {:?} != {:?}", self.model, other.model));
        }
        out
    }
}

pub trait Embedder: Send + Sync + fmt::Debug {
    /// Embeds texts, returning vectors in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn descriptor(&self) -> EmbedderDescriptor;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut v = self.embed_batch(&[text])?;
        Ok(v.pop().expect("one vector per input"))
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Lowercased alphanumeric runs.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Deterministic signed feature-hashing embedder.
///
/// Each lowercased word token is hashed with seeded FNV-1a (64-bit): the
/// bucket is `hash % dimension` and the sign is negative when the top bit is
/// set. Text with no word tokens but some non-space content is hashed as a
/// single token, as is text whose token contributions cancel to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dimension: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self { dimension, seed }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Bucket and sign a token hashes to.
    pub fn slot(&self, token: &str) -> (usize, f64) {
        let h = fnv1a64(self.seed, token.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        ((h % self.dimension as u64) as usize, sign)
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut tokens = word_tokens(trimmed);
        if tokens.is_empty() {
            tokens.push(trimmed.to_lowercase());
        }
        let mut values = vec![0.0; self.dimension];
        for t in &tokens {
            let (bucket, sign) = self.slot(t);
            values[bucket] += sign;
        }
        if values.iter().all(|&v| v == 0.0) {
            let (bucket, sign) = self.slot(&trimmed.to_lowercase());
            values[bucket] = sign;
        }
        EmbeddingVector::from_raw(values)
    }
}

impl Embedder for HashEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }

    fn descriptor(&self) -> EmbedderDescriptor {
        EmbedderDescriptor::local_hash(self.dimension, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedderConfig {
    pub endpoint: String,
    pub model: String,
    pub dimension: usize,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl RemoteEmbedderConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, dimension: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            dimension,
            api_key: None,
            retry: RetryPolicy::default(),
            batch_size: REMOTE_BATCH,
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
        }
    }
}

/// Client for an embeddings HTTP endpoint taking `{model, input: [..]}` and
/// answering `{data: [{embedding, index}]}`.
#[derive(Debug)]
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    client: reqwest::blocking::Client,
    limit: InFlightLimit,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let limit = InFlightLimit::new(config.max_in_flight);
        Ok(Self {
            config,
            client,
            limit,
        })
    }

    fn attempt(&self, body: &serde_json::Value, expected: usize) -> Result<Vec<Vec<f64>>, GatewayError> {
        let endpoint = &self.config.endpoint;
        let mut req = self.client.post(endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let transport = |e: reqwest::Error| GatewayError::Transport {
            endpoint: endpoint.clone(),
            message: e.to_string(),
        };
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        let text = resp.text().map_err(transport)?;
        if !status.is_success() {
            return Err(GatewayError::Http {
                endpoint: endpoint.clone(),
                status: status.as_u16(),
                body: text,
            });
        }

        #[derive(Deserialize)]
        struct Item {
            embedding: Vec<f64>,
            #[serde(default)]
            index: Option<usize>,
        }
        #[derive(Deserialize)]
        struct Body {
            data: Vec<Item>,
        }
        let parsed: Body = serde_json::from_str(&text).map_err(|e| GatewayError::Decode(e.to_string()))?;
        if parsed.data.len() != expected {
            return Err(GatewayError::Decode(format!(
                "expected {expected} embeddings, got {}",
                parsed.data.len()
            )));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; expected];
        for (pos, item) in parsed.data.into_iter().enumerate() {
            let i = item.index.unwrap_or(pos);
            match slots.get_mut(i) {
                Some(slot @ None) => *slot = Some(item.embedding),
                _ => return Err(GatewayError::Decode(format!("bad or repeated index {i}"))),
            }
        }
        Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
    }
}

impl Embedder for RemoteEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.config.batch_size.max(1)) {
            let body = json!({"model": self.config.model, "input": batch});
            let raw = {
                let _permit = self.limit.acquire();
                self.config.retry.run(|| self.attempt(&body, batch.len()))?.0
            };
            for values in raw {
                if values.len() != self.config.dimension {
                    return Err(EmbedError::Dimension {
                        expected: self.config.dimension,
                        actual: values.len(),
                    });
                }
                out.push(EmbeddingVector::from_raw(values)?);
            }
        }
        Ok(out)
    }

    fn descriptor(&self) -> EmbedderDescriptor {
        EmbedderDescriptor {
            backend: "remote".into(),
            dimension: self.config.dimension,
            seed: None,
            model: Some(self.config.model.clone()),
        }
    }
}

/// Renders a signature as `[category: c] [nouns: n1; n2] [model: m]`,
/// omitting absent fields.
pub fn render_prefix(cnm: &Cnm) -> String {
    let mut parts = Vec::with_capacity(3);
    if let Some(c) = &cnm.category {
        parts.push(format!("[category: {c}]"));
    }
    if !cnm.nouns.is_empty() {
        parts.push(format!("[nouns: {}]", cnm.nouns.join("; ")));
    }
    if let Some(m) = &cnm.model {
        parts.push(format!("[model: {m}]"));
    }
    parts.join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedChunk {
    pub chunk_ref: String,
    pub prefix: String,
    pub x_text: String,
    pub cnm: Cnm,
}

impl ComposedChunk {
    /// Byte length of everything before the chunk body.
    pub fn prefix_len(&self) -> usize {
        composed_prefix_len(&self.prefix)
    }

    pub fn body(&self) -> &str {
        &self.x_text[self.prefix_len()..]
    }
}

pub(crate) fn composed_prefix_len(prefix: &str) -> usize {
    if prefix.is_empty() {
        0
    } else {
        prefix.len() + PREFIX_SEPARATOR.len()
    }
}

pub fn compose(cnm: &Cnm, chunk: &Chunk) -> ComposedChunk {
    let prefix = render_prefix(cnm);
    let x_text = if prefix.is_empty() {
        chunk.text.clone()
    } else {
        format!("{prefix}{PREFIX_SEPARATOR}{}", chunk.text)
    };
    ComposedChunk {
        chunk_ref: chunk.chunk_id.clone(),
        prefix,
        x_text,
        cnm: cnm.clone(),
    }
}
