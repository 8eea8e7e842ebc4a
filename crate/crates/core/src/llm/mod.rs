//! Chat-completion backends and the caching client the pipeline talks to.
//!
//! The backend stands in for the model's parametric knowledge. Two backends
//! ship: [`RemoteBackend`] (OpenAI-compatible HTTP) and [`ScriptedMock`]
//! (fixture table, used in tests and offline runs). [`LlmClient`] wraps either
//! one with a content-addressed response cache and call accounting.

mod cache;
mod mock;
mod remote;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ResponseCache;
pub use mock::{prompt_hash, Fixture, FixturePattern, ScriptedMock};
pub use remote::{RemoteBackend, RemoteConfig};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no fixture for prompt hash {prompt_hash} (purpose {purpose}, sample {sample_index})")]
    FixtureMiss {
        prompt_hash: String,
        purpose: PurposeTag,
        sample_index: u32,
    },
    #[error("fixture file {path}:{line}: {message}")]
    Fixture {
        path: String,
        line: usize,
        message: String,
    },
    #[error("authentication failed (HTTP {0})")]
    Auth(u16),
    #[error("request rejected with HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed completion payload: {0}")]
    Decode(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self::character()
    }
}

impl GenerationParams {
    /// Decoding for character response generation.
    pub fn character() -> Self {
        GenerationParams {
            temperature: 0.7,
            top_p: 0.95,
            max_tokens: 512,
            seed: None,
        }
    }

    /// Sampled self fact-checks. Voting needs diverse samples.
    pub fn self_check() -> Self {
        GenerationParams {
            temperature: 1.0,
            top_p: 0.95,
            max_tokens: 128,
            seed: None,
        }
    }

    /// Greedy decoding for decomposition, retrieval checks, rewriting and judging.
    pub fn deterministic() -> Self {
        GenerationParams {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 512,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidRequest(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurposeTag {
    Irg,
    Dec,
    Fcr,
    Fcs,
    Sru,
    Baseline,
    Judge,
    Segment,
}

impl PurposeTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PurposeTag::Irg => "irg",
            PurposeTag::Dec => "dec",
            PurposeTag::Fcr => "fcr",
            PurposeTag::Fcs => "fcs",
            PurposeTag::Sru => "sru",
            PurposeTag::Baseline => "baseline",
            PurposeTag::Judge => "judge",
            PurposeTag::Segment => "segment",
        }
    }
}

impl fmt::Display for PurposeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    pub user_prompt: String,
    pub params: GenerationParams,
    pub purpose: PurposeTag,
}

impl ChatRequest {
    pub fn new(purpose: PurposeTag, user_prompt: impl Into<String>, params: GenerationParams) -> Self {
        ChatRequest {
            system_prompt: None,
            user_prompt: user_prompt.into(),
            params,
            purpose,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user_prompt.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty user prompt".into()));
        }
        self.params.validate()
    }

    /// Content hash identifying one completion: prompt, decoding parameters,
    /// purpose and sample index, scoped to a backend.
    pub fn cache_key(&self, backend_id: &str, sample_index: u32) -> String {
        let mut h = Sha256::new();
        let mut field = |name: &str, value: &str| {
            h.update(name.as_bytes());
            h.update((value.len() as u64).to_le_bytes());
            h.update(value.as_bytes());
        };
        field("backend", backend_id);
        field("system", self.system_prompt.as_deref().unwrap_or(""));
        field("user", &self.user_prompt);
        field("temperature", &self.params.temperature.to_string());
        field("top_p", &self.params.top_p.to_string());
        field("max_tokens", &self.params.max_tokens.to_string());
        field(
            "seed",
            &self.params.seed.map(|s| s.to_string()).unwrap_or_default(),
        );
        field("purpose", self.purpose.as_str());
        field("sample", &sample_index.to_string());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub sample_index: u32,
    #[serde(with = "duration_ms")]
    pub latency: Duration,
    pub cached: bool,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// A source of raw completions. Implementations must be safe to call from
/// several threads at once.
pub trait ChatBackend: Send + Sync {
    fn backend_id(&self) -> String;

    fn generate(&self, request: &ChatRequest, sample_index: u32) -> Result<String, LlmError>;
}

/// Per-purpose request accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CallStats {
    /// Every `complete` call, cached or not.
    pub requests: BTreeMap<PurposeTag, u64>,
    /// Calls that reached the backend.
    pub backend_calls: BTreeMap<PurposeTag, u64>,
}

impl CallStats {
    pub fn requests_for(&self, purpose: PurposeTag) -> u64 {
        self.requests.get(&purpose).copied().unwrap_or(0)
    }

    pub fn backend_calls_for(&self, purpose: PurposeTag) -> u64 {
        self.backend_calls.get(&purpose).copied().unwrap_or(0)
    }

    pub fn total_requests(&self) -> u64 {
        self.requests.values().sum()
    }

    pub fn total_backend_calls(&self) -> u64 {
        self.backend_calls.values().sum()
    }
}

/// Backend plus response cache. Cheap to share behind an `Arc`.
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    backend_id: String,
    cache: ResponseCache,
    backend_calls: AtomicU64,
    stats: Mutex<CallStats>,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend_id", &self.backend_id)
            .field("cache", &self.cache)
            .finish()
    }
}

impl LlmClient {
    /// Client with an in-memory cache only.
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self::with_cache(backend, ResponseCache::in_memory())
    }

    /// Client whose cache persists to `dir/responses.jsonl`.
    pub fn with_disk_cache(backend: Arc<dyn ChatBackend>, dir: impl AsRef<Path>) -> Result<Self, LlmError> {
        Ok(Self::with_cache(backend, ResponseCache::open(dir)?))
    }

    pub fn with_cache(backend: Arc<dyn ChatBackend>, cache: ResponseCache) -> Self {
        let backend_id = backend.backend_id();
        LlmClient {
            backend,
            backend_id,
            cache,
            backend_calls: AtomicU64::new(0),
            stats: Mutex::new(CallStats::default()),
        }
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    /// Number of calls that reached the backend (cache misses).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> CallStats {
        self.stats.lock().expect("stats lock").clone()
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.complete_indexed(request, 0)
    }

    pub fn complete_indexed(&self, request: &ChatRequest, sample_index: u32) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        self.bump(request.purpose, false);
        let key = request.cache_key(&self.backend_id, sample_index);
        let started = Instant::now();
        if let Some(text) = self.cache.get(&key) {
            return Ok(ChatResponse {
                text,
                backend_id: self.backend_id.clone(),
                sample_index,
                latency: started.elapsed(),
                cached: true,
            });
        }
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        self.bump(request.purpose, true);
        let text = self.backend.generate(request, sample_index)?;
        self.cache.insert(&key, &text)?;
        Ok(ChatResponse {
            text,
            backend_id: self.backend_id.clone(),
            sample_index,
            latency: started.elapsed(),
            cached: false,
        })
    }

    /// `m` independent completions for sample indices `0..m`, in index order.
    /// Samples run concurrently; any failure fails the whole batch.
    pub fn sample_n(&self, request: &ChatRequest, m: u32) -> Result<Vec<ChatResponse>, LlmError> {
        if m == 0 {
            return Err(LlmError::InvalidRequest("sample size must be >= 1".into()));
        }
        if m == 1 {
            return Ok(vec![self.complete_indexed(request, 0)?]);
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..m)
                .map(|i| scope.spawn(move || self.complete_indexed(request, i)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sample thread panicked"))
                .collect()
        })
    }

    fn bump(&self, purpose: PurposeTag, backend: bool) {
        let mut stats = self.stats.lock().expect("stats lock");
        let map = if backend {
            &mut stats.backend_calls
        } else {
            &mut stats.requests
        };
        *map.entry(purpose).or_default() += 1;
    }
}
