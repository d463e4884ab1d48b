//! Chat-completion access with deterministic decoding defaults, an on-disk
//! response cache, bounded concurrency and retry with exponential backoff.

mod cache;
mod http;
mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, ResponseCache};
pub use http::HttpProvider;
pub use mock::MockProvider;

pub const DEFAULT_MAX_TOKENS: u32 = 2048;
pub const DEFAULT_CONCURRENCY: usize = 4;
pub const DEFAULT_RETRIES: u32 = 3;
pub const API_KEY_ENV: &str = "KCLAB_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Greedy decoding: temperature 0, top-p 1.
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            model: model.into(),
            messages,
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        match self.messages.first() {
            None => return bad("messages must not be empty"),
            Some(m) if m.role == Role::Assistant => {
                return bad("first message must be a system or user message")
            }
            _ => {}
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be a finite value >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub content: String,
    pub provider_id: String,
    pub cached: bool,
}

/// SHA-256 over a versioned JSON encoding of every decoding-relevant field.
pub fn cache_key(request: &ChatRequest) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        v: u32,
        model: &'a str,
        messages: &'a [ChatMessage],
        temperature: f64,
        top_p: f64,
        max_tokens: u32,
    }
    let canonical = Canonical {
        v: 1,
        model: &request.model,
        messages: &request.messages,
        temperature: request.temperature,
        top_p: request.top_p,
        max_tokens: request.max_tokens,
    };
    let bytes = serde_json::to_vec(&canonical).expect("request serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("malformed provider payload: {0}")]
    Malformed(String),
    #[error("provider error: {0}")]
    Fatal(String),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider failed after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },
    #[error("malformed provider payload: {0}")]
    Malformed(String),
    #[error("response cache: {0}")]
    Cache(String),
}

/// A chat-completion backend.
pub trait Provider: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Extra attempts after the first for transient failures.
    pub retries: u32,
    pub backoff_base: Duration,
    pub concurrency: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            retries: DEFAULT_RETRIES,
            backoff_base: Duration::from_millis(500),
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: usize,
    pub cache_hits: usize,
    pub provider_attempts: usize,
}

impl GatewayStats {
    pub fn cache_hit_ratio(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.cache_hits as f64 / self.requests as f64
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    provider: Arc<dyn Provider>,
    cache: Option<ResponseCache>,
    config: GatewayConfig,
    semaphore: Semaphore,
    requests: AtomicUsize,
    cache_hits: AtomicUsize,
    attempts: AtomicUsize,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>, cache: Option<ResponseCache>, config: GatewayConfig) -> Self {
        let semaphore = Semaphore::new(config.concurrency);
        Gateway {
            provider,
            cache,
            config,
            semaphore,
            requests: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            attempts: AtomicUsize::new(0),
        }
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.requests.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            provider_attempts: self.attempts.load(Ordering::SeqCst),
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        self.requests.fetch_add(1, Ordering::SeqCst);
        let key = cache_key(request);
        if let Some(cache) = &self.cache {
            if let Some(entry) = cache.get(&key)? {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(ChatResponse {
                    content: entry.content,
                    provider_id: entry.provider_id,
                    cached: true,
                });
            }
        }

        let content = {
            let _permit = self.semaphore.acquire();
            self.send_with_retries(request)?
        };
        if content.trim().is_empty() {
            return Err(GatewayError::Malformed("empty completion".into()));
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, request, self.provider.id(), &content)?;
        }
        Ok(ChatResponse {
            content,
            provider_id: self.provider.id().to_string(),
            cached: false,
        })
    }

    fn send_with_retries(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            self.attempts.fetch_add(1, Ordering::SeqCst);
            match self.provider.send(request) {
                Ok(content) => return Ok(content),
                Err(ProviderError::Transient(message)) => {
                    if attempt > self.config.retries {
                        return Err(GatewayError::Provider { attempts: attempt, message });
                    }
                    let delay = self.config.backoff_base.saturating_mul(1 << (attempt - 1).min(16));
                    tracing::warn!(attempt, ?delay, %message, "transient provider failure, retrying");
                    std::thread::sleep(delay);
                }
                Err(ProviderError::Auth(m)) => return Err(GatewayError::Auth(m)),
                Err(ProviderError::Malformed(m)) => return Err(GatewayError::Malformed(m)),
                Err(ProviderError::Fatal(message)) => {
                    return Err(GatewayError::Provider { attempts: attempt, message })
                }
            }
        }
    }
}
