//! OpenAI-compatible chat-completions client with retry and rate limiting.

use std::env;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;
use tracing::{debug, warn};

use super::{ChatBackend, ChatRequest, LlmError};

pub const ENV_API_BASE: &str = "ROLEFACT_API_BASE";
pub const ENV_MODEL: &str = "ROLEFACT_MODEL";
pub const ENV_API_KEY: &str = "ROLEFACT_API_KEY";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Base URL up to and including the version segment, e.g. `https://api.openai.com/v1`.
    pub api_base: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub timeout: Duration,
    /// Ceiling on concurrent in-flight requests.
    pub max_in_flight: usize,
    /// Sustained request rate; `None` disables the token bucket.
    pub requests_per_second: Option<f64>,
}

impl RemoteConfig {
    pub fn new(api_base: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            api_base: api_base.into(),
            model: model.into(),
            api_key: None,
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
            timeout: Duration::from_secs(120),
            max_in_flight: 8,
            requests_per_second: None,
        }
    }

    /// Reads `ROLEFACT_API_BASE`, `ROLEFACT_MODEL` and `ROLEFACT_API_KEY`.
    pub fn from_env() -> Result<Self, LlmError> {
        let base = env::var(ENV_API_BASE)
            .map_err(|_| LlmError::Config(format!("{ENV_API_BASE} is not set")))?;
        let model = env::var(ENV_MODEL)
            .map_err(|_| LlmError::Config(format!("{ENV_MODEL} is not set")))?;
        let mut cfg = RemoteConfig::new(base, model);
        cfg.api_key = env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.api_base.trim_end_matches('/'))
    }
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut count = self.count.lock().expect("in-flight lock");
        while *count >= self.max {
            count = self.freed.wait(count).expect("in-flight lock");
        }
        *count += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    fn new(rate: f64) -> Self {
        let capacity = rate.max(1.0);
        TokenBucket {
            rate,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    fn take(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("bucket lock");
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.rate;
                state.0 = (state.0 + refill).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.rate)
            };
            thread::sleep(wait);
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
    bucket: Option<TokenBucket>,
}

#[derive(Deserialize)]
struct CompletionPayload {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Done(String),
    Retry { reason: String, after: Option<Duration> },
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, LlmError> {
        if config.max_attempts == 0 || config.max_in_flight == 0 {
            return Err(LlmError::Config(
                "max_attempts and max_in_flight must be positive".into(),
            ));
        }
        if let Some(rps) = config.requests_per_second {
            if rps.is_nan() || rps <= 0.0 {
                return Err(LlmError::Config("requests_per_second must be positive".into()));
            }
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Ok(RemoteBackend {
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                max: config.max_in_flight,
            },
            bucket: config.requests_per_second.map(TokenBucket::new),
            agent,
            config,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn body(&self, request: &ChatRequest, sample_index: u32) -> serde_json::Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.system_prompt {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.user_prompt}));
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
            "max_tokens": request.params.max_tokens,
        });
        if let Some(seed) = request.params.seed {
            body["seed"] = json!(seed.wrapping_add(sample_index as u64));
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<Attempt, LlmError> {
        if let Some(bucket) = &self.bucket {
            bucket.take();
        }
        let _permit = self.in_flight.acquire();
        let mut req = self.agent.post(&self.config.endpoint());
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let response = match req.send_json(body) {
            Ok(r) => r,
            Err(e) if is_transient(&e) => {
                return Ok(Attempt::Retry {
                    reason: e.to_string(),
                    after: None,
                })
            }
            Err(e) => return Err(LlmError::Http { status: 0, body: e.to_string() }),
        };
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = match response.into_body().read_to_string() {
            Ok(t) => t,
            Err(e) if is_transient(&e) => {
                return Ok(Attempt::Retry {
                    reason: e.to_string(),
                    after: None,
                })
            }
            Err(e) => return Err(LlmError::Decode(e.to_string())),
        };
        match status {
            200..=299 => {
                let payload: CompletionPayload =
                    serde_json::from_str(&text).map_err(|e| LlmError::Decode(e.to_string()))?;
                let content = payload
                    .choices
                    .into_iter()
                    .next()
                    .and_then(|c| c.message.content)
                    .ok_or_else(|| LlmError::Decode("no message content in first choice".into()))?;
                Ok(Attempt::Done(content))
            }
            401 | 403 => Err(LlmError::Auth(status)),
            408 | 429 | 500..=599 => Ok(Attempt::Retry {
                reason: format!("HTTP {status}"),
                after: retry_after,
            }),
            _ => Err(LlmError::Http {
                status,
                body: truncate(&text, 512),
            }),
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32 << attempt.saturating_sub(1).min(16);
        self.config
            .base_delay
            .saturating_mul(factor)
            .min(self.config.max_delay)
    }
}

fn is_transient(e: &ureq::Error) -> bool {
    matches!(
        e,
        ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::Protocol(_)
    )
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

impl ChatBackend for RemoteBackend {
    fn backend_id(&self) -> String {
        format!("openai-compatible:{}@{}", self.config.model, self.config.api_base)
    }

    fn generate(&self, request: &ChatRequest, sample_index: u32) -> Result<String, LlmError> {
        let body = self.body(request, sample_index);
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.attempt(&body)? {
                Attempt::Done(text) => {
                    if attempt > 1 {
                        debug!("completion succeeded on attempt {attempt}");
                    }
                    return Ok(text);
                }
                Attempt::Retry { reason, after } => {
                    warn!(
                        "attempt {attempt}/{} failed: {reason}",
                        self.config.max_attempts
                    );
                    last = reason;
                    if attempt < self.config.max_attempts {
                        let delay = after
                            .map(|d| d.min(self.config.max_delay))
                            .unwrap_or_else(|| self.backoff(attempt));
                        thread::sleep(delay);
                    }
                }
            }
        }
        Err(LlmError::RetriesExhausted {
            attempts: self.config.max_attempts,
            last,
        })
    }
}
