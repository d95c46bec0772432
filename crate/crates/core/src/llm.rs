//! Chat-completion backends.
//!
//! [`HttpBackend`] speaks the common `messages`/`choices[0].message.content`
//! dialect with retries and a token-bucket limiter. [`SimulatedBackend`] is a
//! pure function of (seed, request) used for offline runs and tests.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rand::Rng;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user.is_empty() {
            return Err(LlmError::InvalidRequest("empty user message".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("rate limited")]
    RateLimited,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("authentication failed (HTTP {0})")]
    AuthFailed(u16),
    #[error("server error (HTTP {0})")]
    Server(u16),
    #[error("request rejected (HTTP {0})")]
    Rejected(u16),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Self::RateLimited | Self::Transport(_) | Self::Timeout | Self::Server(_)
        )
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

/// Token bucket shared by concurrent callers. Over any window `w` at most
/// `rate * w + capacity` acquisitions succeed.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64, capacity: f64) -> Self {
        assert!(rate_per_sec > 0.0 && capacity >= 1.0);
        Self {
            rate: rate_per_sec,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until a token is available, then takes it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("bucket poisoned");
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.rate;
                state.0 = (state.0 + refill).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) / self.rate
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Exponential backoff with full jitter: the delay before retry `n` (1-based)
/// is uniform in `[0, base * factor^(n-1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn delay_cap(&self, retry: u32) -> Duration {
        self.base_delay
            .mul_f64(self.factor.powi(retry.saturating_sub(1) as i32))
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent.
    pub fn run<T>(&self, mut op: impl FnMut(u32) -> Result<T, LlmError>) -> Result<T, LlmError> {
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    let cap = self.delay_cap(attempt);
                    let delay = cap.mul_f64(rand::rng().random::<f64>());
                    warn!("attempt {attempt} failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub api_base: String,
    pub api_key: String,
    pub model: String,
    pub timeout: Duration,
    pub requests_per_second: f64,
    pub retry: RetryPolicy,
}

pub const SENTINEL_TIMEOUT: Duration = Duration::from_secs(20);
pub const ARCHITECT_TIMEOUT: Duration = Duration::from_secs(60);

impl HttpConfig {
    fn from_env(model_var: &str, timeout: Duration) -> Result<Self, String> {
        let var = |k: &str| std::env::var(k).map_err(|_| format!("{k} is not set"));
        let rps = match std::env::var("FL_RPS") {
            Ok(v) => v
                .parse::<f64>()
                .ok()
                .filter(|r| *r > 0.0)
                .ok_or_else(|| format!("FL_RPS={v} is not a positive number"))?,
            Err(_) => 4.0,
        };
        Ok(Self {
            api_base: var("FL_API_BASE")?,
            api_key: var("FL_API_KEY")?,
            model: var(model_var)?,
            timeout,
            requests_per_second: rps,
            retry: RetryPolicy::default(),
        })
    }

    /// Fast extraction model, 20 s per attempt.
    pub fn sentinel_from_env() -> Result<Self, String> {
        Self::from_env("FL_SENTINEL_MODEL", SENTINEL_TIMEOUT)
    }

    /// Strong refinement model, 60 s per attempt.
    pub fn architect_from_env() -> Result<Self, String> {
        Self::from_env("FL_ARCHITECT_MODEL", ARCHITECT_TIMEOUT)
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    bucket: TokenBucket,
    requests: AtomicUsize,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("api_base", &self.config.api_base)
            .field("model", &self.config.model)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let rps = config.requests_per_second;
        Self {
            bucket: TokenBucket::new(rps, rps.max(1.0)),
            config,
            agent,
            requests: AtomicUsize::new(0),
        }
    }

    /// Total HTTP requests issued, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.api_base.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value) -> Result<ChatResponse, LlmError> {
        self.bucket.acquire();
        self.requests.fetch_add(1, Ordering::SeqCst);
        let started = Instant::now();
        let response = self
            .agent
            .post(&self.endpoint())
            .header("Authorization", &format!("Bearer {}", self.config.api_key))
            .send_json(body)
            .map_err(map_transport)?;
        let status = response.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(LlmError::AuthFailed(status)),
            429 => return Err(LlmError::RateLimited),
            500..=599 => return Err(LlmError::Server(status)),
            _ => return Err(LlmError::Rejected(status)),
        }
        let payload: Value = response
            .into_body()
            .read_json()
            .map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        parse_completion(&payload, started.elapsed())
    }
}

fn map_transport(e: ureq::Error) -> LlmError {
    match e {
        ureq::Error::Timeout(_) => LlmError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => LlmError::Timeout,
        other => LlmError::Transport(other.to_string()),
    }
}

/// Request body in the chat-completion dialect. The system message is
/// omitted when empty.
pub fn request_body(request: &ChatRequest) -> Value {
    let mut messages = Vec::new();
    if !request.system.is_empty() {
        messages.push(json!({"role": "system", "content": request.system}));
    }
    messages.push(json!({"role": "user", "content": request.user}));
    json!({
        "model": request.model,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    })
}

pub fn parse_completion(payload: &Value, latency: Duration) -> Result<ChatResponse, LlmError> {
    let text = payload
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))?;
    let usage = |k: &str| {
        payload
            .pointer(&format!("/usage/{k}"))
            .and_then(Value::as_u64)
            .unwrap_or(0)
    };
    Ok(ChatResponse {
        text: text.to_string(),
        input_tokens: usage("prompt_tokens"),
        output_tokens: usage("completion_tokens"),
        latency,
    })
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let mut req = request.clone();
        if req.model.is_empty() {
            req.model = self.config.model.clone();
        }
        let body = request_body(&req);
        self.config.retry.run(|attempt| {
            debug!("POST {} attempt {attempt}", self.endpoint());
            self.attempt(&body)
        })
    }
}

/// Text-to-text behavior plugged into a [`SimulatedBackend`].
pub trait Behavior: Send + Sync {
    fn respond(&self, seed: u64, request: &ChatRequest) -> Result<String, LlmError>;
}

/// Returns the user message unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Echo;

impl Behavior for Echo {
    fn respond(&self, _seed: u64, request: &ChatRequest) -> Result<String, LlmError> {
        Ok(request.user.clone())
    }
}

/// Always returns the same text.
#[derive(Debug, Clone)]
pub struct Fixed(pub String);

impl Behavior for Fixed {
    fn respond(&self, _seed: u64, _request: &ChatRequest) -> Result<String, LlmError> {
        Ok(self.0.clone())
    }
}

/// Adapts a closure into a behavior.
pub struct FnBehavior<F>(pub F);

impl<F> Behavior for FnBehavior<F>
where
    F: Fn(u64, &ChatRequest) -> Result<String, LlmError> + Send + Sync,
{
    fn respond(&self, seed: u64, request: &ChatRequest) -> Result<String, LlmError> {
        (self.0)(seed, request)
    }
}

#[derive(Clone)]
pub struct SimulatedBackend {
    seed: u64,
    behavior: Arc<dyn Behavior>,
}

impl fmt::Debug for SimulatedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimulatedBackend").field("seed", &self.seed).finish()
    }
}

impl SimulatedBackend {
    pub fn new(seed: u64, behavior: Arc<dyn Behavior>) -> Self {
        Self { seed, behavior }
    }

    pub fn echo(seed: u64) -> Self {
        Self::new(seed, Arc::new(Echo))
    }
}

impl ChatBackend for SimulatedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let started = Instant::now();
        let text = self.behavior.respond(self.seed, request)?;
        Ok(ChatResponse {
            input_tokens: (request.system.split_whitespace().count()
                + request.user.split_whitespace().count()) as u64,
            output_tokens: text.split_whitespace().count() as u64,
            text,
            latency: started.elapsed(),
        })
    }
}

/// Wraps a backend and counts calls reaching it.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for CountingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}
