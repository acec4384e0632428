//! Provider-agnostic chat completion and embedding access.
//!
//! A [`Gateway`] wraps one [`Backend`] with a retry policy, a request-rate
//! limiter, an in-flight bound and an optional on-disk response cache.
//! Gateways are `Sync` and meant to be shared by every worker of a run.

mod cache;
mod config;
mod http;
mod mock;
mod ratelimit;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, embedding_cache_key, CacheEntry, ResponseCache};
pub use config::{BackendConfig, Dialect, MockRuleConfig, MockSettings, RetryPolicy};
pub use http::{AnthropicBackend, OpenAiBackend};
pub use mock::{Matcher, MockBackend, MockBuilder, MockReply};
pub use ratelimit::RateLimiter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if let Some(m) = self
            .messages
            .iter()
            .find(|m| m.role != Role::Assistant && m.content.is_empty())
        {
            return Err(GatewayError::InvalidRequest(format!(
                "empty {:?} message",
                m.role
            )));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn system_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn last_user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// Failure of a single backend attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transient backend error: {0}")]
    Transient(String),
    #[error("request timed out")]
    Timeout,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("backend error: {0}")]
    Fatal(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("authentication failure: {0}")]
    AuthFailure(String),
    #[error("timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("{0}")]
    Backend(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("config: {0}")]
    Config(String),
    #[error("embedding dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// One provider (or the mock). Implementations perform a single attempt.
pub trait Backend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError>;

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let _ = (model, texts);
        Err(BackendError::Unsupported("embeddings".into()))
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Counters since the gateway was created.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    /// Backend attempts, retries included.
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub retries: u64,
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    model: String,
    embedding_model: Option<String>,
    temperature: f64,
    max_tokens: u32,
    retry: RetryPolicy,
    limiter: Option<RateLimiter>,
    in_flight: Semaphore,
    max_in_flight: usize,
    cache: Option<ResponseCache>,
    calls: AtomicU64,
    hits: AtomicU64,
    retries: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("model", &self.model)
            .field("max_in_flight", &self.max_in_flight)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

impl Gateway {
    /// Builds the backend named by `cfg.dialect`.
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let backend: Arc<dyn Backend> = match cfg.dialect {
            Dialect::Openai => Arc::new(OpenAiBackend::new(cfg)),
            Dialect::Anthropic => Arc::new(AnthropicBackend::new(cfg)),
            Dialect::Mock => Arc::new(MockBackend::from_settings(
                cfg.mock.clone().unwrap_or_default(),
            )),
        };
        Self::with_backend(backend, cfg)
    }

    pub fn with_backend(backend: Arc<dyn Backend>, cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let cache = cfg
            .cache_dir
            .as_ref()
            .map(ResponseCache::open)
            .transpose()?;
        Ok(Gateway {
            backend,
            model: cfg.model.clone(),
            embedding_model: cfg.embedding_model.clone(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
            retry: cfg.retry.clone(),
            limiter: cfg.requests_per_second.map(RateLimiter::new),
            in_flight: Semaphore::new(cfg.max_in_flight),
            max_in_flight: cfg.max_in_flight,
            cache,
            calls: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        })
    }

    /// A gateway over `backend` with default settings and no cache.
    pub fn simple(backend: Arc<dyn Backend>) -> Self {
        Self::with_backend(backend, &BackendConfig::mock("mock")).expect("default config is valid")
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// Model used for embeddings; the chat model unless configured.
    pub fn embedding_model(&self) -> &str {
        self.embedding_model.as_deref().unwrap_or(&self.model)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn max_tokens(&self) -> u32 {
        self.max_tokens
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// A request for this gateway's model with its decoding parameters.
    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.calls.load(Ordering::SeqCst),
            cache_hits: self.hits.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
        }
    }

    fn with_retries<T>(&self, mut attempt: impl FnMut() -> Result<T, BackendError>) -> Result<T, GatewayError> {
        let max = self.retry.max_attempts;
        let mut n = 0;
        loop {
            n += 1;
            let result = {
                let _permit = self.in_flight.acquire();
                if let Some(l) = &self.limiter {
                    l.acquire();
                }
                self.calls.fetch_add(1, Ordering::SeqCst);
                attempt()
            };
            let err = match result {
                Ok(v) => return Ok(v),
                Err(e) => e,
            };
            match err {
                BackendError::Auth(m) => return Err(GatewayError::AuthFailure(m)),
                BackendError::Fatal(m) | BackendError::Unsupported(m) => {
                    return Err(GatewayError::Backend(m))
                }
                BackendError::Transient(_) | BackendError::Timeout if n < max => {
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    std::thread::sleep(self.retry.backoff(n));
                }
                BackendError::Timeout => return Err(GatewayError::Timeout { attempts: n }),
                BackendError::Transient(m) => {
                    return Err(GatewayError::ExhaustedRetries {
                        attempts: n,
                        last: m,
                    })
                }
            }
        }
    }

    /// Returns the assistant text for `req`, serving from cache when possible.
    pub fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let key = cache_key(req);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                self.hits.fetch_add(1, Ordering::SeqCst);
                return Ok(hit);
            }
        }
        let text = self.with_retries(|| self.backend.chat(req))?;
        if let Some(cache) = &self.cache {
            cache.put(&key, &text)?;
        }
        Ok(text)
    }

    /// Completes every request with at most `max_in_flight` concurrent
    /// backend calls. Results are positional.
    pub fn complete_batch(&self, reqs: &[ChatRequest]) -> Vec<Result<String, GatewayError>> {
        parallel_map(reqs, self.max_in_flight, |r| self.complete(r))
    }

    /// Embeds `texts` with the configured embedding model (falls back to the
    /// chat model id). Duplicate texts are fetched once.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let model = self.embedding_model();
        let keys: Vec<String> = texts.iter().map(|t| embedding_cache_key(model, t)).collect();
        let mut found: std::collections::HashMap<&str, Vec<f64>> = Default::default();
        let mut missing: Vec<(&str, &String)> = Vec::new();
        for (k, t) in keys.iter().zip(texts) {
            if found.contains_key(k.as_str()) || missing.iter().any(|(mk, _)| *mk == k) {
                continue;
            }
            let cached = match &self.cache {
                Some(c) => c.get(k)?,
                None => None,
            };
            match cached {
                Some(s) => {
                    self.hits.fetch_add(1, Ordering::SeqCst);
                    let v: Vec<f64> = serde_json::from_str(&s)
                        .map_err(|e| GatewayError::Cache(format!("corrupt embedding entry {k}: {e}")))?;
                    found.insert(k, v);
                }
                None => missing.push((k, t)),
            }
        }
        for chunk in missing.chunks(64) {
            let batch: Vec<String> = chunk.iter().map(|(_, t)| (*t).clone()).collect();
            let vecs = self.with_retries(|| self.backend.embed(model, &batch))?;
            if vecs.len() != batch.len() {
                return Err(GatewayError::Backend(format!(
                    "provider returned {} embeddings for {} texts",
                    vecs.len(),
                    batch.len()
                )));
            }
            for ((k, _), v) in chunk.iter().zip(vecs) {
                if let Some(c) = &self.cache {
                    let s = serde_json::to_string(&v).map_err(|e| GatewayError::Cache(e.to_string()))?;
                    c.put(k, &s)?;
                }
                found.insert(k, v);
            }
        }
        let out: Vec<Vec<f64>> = keys.iter().map(|k| found[k.as_str()].clone()).collect();
        if let Some(first) = out.first() {
            if let Some(bad) = out.iter().find(|v| v.len() != first.len()) {
                return Err(GatewayError::DimensionMismatch(format!(
                    "provider returned dims {} and {}",
                    first.len(),
                    bad.len()
                )));
            }
        }
        Ok(out)
    }
}

/// Maps `f` over `items` on up to `workers` scoped threads, preserving order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let done: Vec<Vec<(usize, R)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= items.len() {
                            break local;
                        }
                        local.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    for (i, r) in done.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

impl RetryPolicy {
    /// Delay after the `attempt`-th failure (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 2u64.saturating_pow(attempt.saturating_sub(1));
        let ms = self.backoff_ms.saturating_mul(factor).min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}
