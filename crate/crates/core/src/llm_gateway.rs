//! Chat-completion access for extraction and continuity prompts.
//!
//! Three backends share one trait: a remote chat-completions client with
//! retry, a scripted backend that replays a recorded transcript keyed by
//! prompt digest, and a recorder that wraps any backend and appends every
//! completed call to a transcript file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 512;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("HTTP {status} from {endpoint}: {body}")]
    Http {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("no transcript entry for prompt digest {digest}")]
    MissingEntry { digest: String },
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("cannot decode backend response: {0}")]
    Decode(String),
    #[error("transcript {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed transcript at line {line}: {message}")]
    TranscriptFormat { line: usize, message: String },
    #[error("gateway misconfigured: {0}")]
    Config(String),
}

impl GatewayError {
    /// Transport failures and 5xx responses are worth another attempt.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::Transport { .. } => true,
            GatewayError::Http { status, .. } => (500..600).contains(status),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub system_prompt: Option<String>,
    pub temperature: f32,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    /// A pipeline request: temperature 0 and the default output cap.
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            system_prompt: None,
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    pub fn digest(&self) -> String {
        prompt_digest(&self.prompt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub latency: Duration,
    pub backend_id: String,
    /// Number of attempts it took, 1 when the first try succeeded.
    pub attempts: u32,
}

/// SHA-256 (hex) of the prompt with CRLF and lone CR normalized to LF.
pub fn prompt_digest(prompt: &str) -> String {
    let normalized = prompt.replace("\r\n", "\n").replace('\r', "\n");
    hex::encode(Sha256::digest(normalized.as_bytes()))
}

pub trait ChatBackend: Send + Sync + fmt::Debug {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    fn id(&self) -> &str;
}

/// Shareable front door to a backend, with call counters.
#[derive(Debug, Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    calls: Arc<AtomicU64>,
}

impl Gateway {
    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let response = self.backend.complete(request)?;
        if response.text.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        Ok(response)
    }

    /// Total calls issued through this gateway (and its clones).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }
}

/// Recorded responses keyed by prompt digest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TranscriptLine {
    digest: String,
    response: String,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        self.entries.insert(prompt_digest(prompt), response.into());
    }

    pub fn get(&self, digest: &str) -> Option<&str> {
        self.entries.get(digest).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads a line-delimited `{digest, response}` file. When a digest
    /// repeats, the first recorded response wins.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let raw = fs::read_to_string(path).map_err(|source| GatewayError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = BTreeMap::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TranscriptLine =
                serde_json::from_str(line).map_err(|e| GatewayError::TranscriptFormat {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            entries.entry(rec.digest).or_insert(rec.response);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), GatewayError> {
        let mut out = String::new();
        for (digest, response) in &self.entries {
            let line = TranscriptLine {
                digest: digest.clone(),
                response: response.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("string fields serialize"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| GatewayError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Replays a transcript. Read-only after construction.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    transcript: Transcript,
}

impl ScriptedBackend {
    pub fn new(transcript: Transcript) -> Self {
        Self { transcript }
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        Transcript::load(path).map(Self::new)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let started = Instant::now();
        let digest = request.digest();
        let text = self
            .transcript
            .get(&digest)
            .ok_or(GatewayError::MissingEntry { digest })?;
        Ok(ChatResponse {
            text: text.to_string(),
            latency: started.elapsed(),
            backend_id: self.id().to_string(),
            attempts: 1,
        })
    }

    fn id(&self) -> &str {
        "scripted"
    }
}

/// Exponential backoff for transient failures.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff * self.multiplier.saturating_pow(retry)
    }

    /// Runs `op` until it succeeds, fails permanently, or attempts run out.
    /// Returns the value and the number of attempts used.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, GatewayError>,
    ) -> Result<(T, u32), GatewayError> {
        let max = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok((v, attempt)),
                Err(e) if e.is_transient() && attempt < max => {
                    let delay = self.backoff(attempt - 1);
                    warn!(attempt, ?delay, error = %e, "transient backend failure, retrying");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Counting semaphore bounding concurrent remote calls.
#[derive(Debug)]
pub(crate) struct InFlightLimit {
    free: Mutex<usize>,
    cv: Condvar,
}

impl InFlightLimit {
    pub(crate) fn new(limit: usize) -> Self {
        Self {
            free: Mutex::new(limit.max(1)),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> InFlightPermit<'_> {
        let mut free = self.free.lock().expect("limit poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("limit poisoned");
        }
        *free -= 1;
        InFlightPermit { limit: self }
    }
}

pub(crate) struct InFlightPermit<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.limit.free.lock().expect("limit poisoned") += 1;
        self.limit.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
        }
    }

    /// Reads the API key from `var`, leaving it unset when the variable is absent.
    pub fn with_api_key_from_env(mut self, var: &str) -> Self {
        self.api_key = std::env::var(var).ok().filter(|k| !k.is_empty());
        self
    }
}

/// Client for a chat-completions style HTTP endpoint.
#[derive(Debug)]
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    limit: InFlightLimit,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, GatewayError> {
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

    fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.system_prompt {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.prompt}));
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, GatewayError> {
        let endpoint = &self.config.endpoint;
        let mut req = self.client.post(endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| GatewayError::Transport {
            endpoint: endpoint.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GatewayError::Transport {
            endpoint: endpoint.clone(),
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(GatewayError::Http {
                endpoint: endpoint.clone(),
                status: status.as_u16(),
                body: text,
            });
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| GatewayError::Decode(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Decode("missing choices[0].message.content".into()))
    }
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let _permit = self.limit.acquire();
        let started = Instant::now();
        let body = self.request_body(request);
        let (text, attempts) = self.config.retry.run(|| self.attempt(&body))?;
        debug!(attempts, digest = %request.digest(), "remote completion");
        Ok(ChatResponse {
            text,
            latency: started.elapsed(),
            backend_id: self.id().to_string(),
            attempts,
        })
    }

    fn id(&self) -> &str {
        "remote"
    }
}

/// Wraps a backend and appends each completed call to a transcript file.
#[derive(Debug)]
pub struct RecordingBackend {
    inner: Box<dyn ChatBackend>,
    path: PathBuf,
    out: Mutex<File>,
}

impl RecordingBackend {
    /// Opens (or creates) `path` for appending.
    pub fn new(inner: impl ChatBackend + 'static, path: &Path) -> Result<Self, GatewayError> {
        let out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| GatewayError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(Self {
            inner: Box::new(inner),
            path: path.to_path_buf(),
            out: Mutex::new(out),
        })
    }
}

impl ChatBackend for RecordingBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let response = self.inner.complete(request)?;
        let line = TranscriptLine {
            digest: request.digest(),
            response: response.text.clone(),
        };
        let mut encoded = serde_json::to_string(&line).expect("string fields serialize");
        encoded.push('\n');
        let mut out = self.out.lock().expect("transcript writer poisoned");
        out.write_all(encoded.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|source| GatewayError::Io {
                path: self.path.clone(),
                source,
            })?;
        Ok(response)
    }

    fn id(&self) -> &str {
        "recording"
    }
}
