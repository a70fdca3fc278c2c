//! Chat-completion backends.
//!
//! [`ChatBackend`] is the single capability the cascade needs. Backends
//! compose: [`OpenAiBackend`] or [`MockBackend`] at the bottom, wrapped by
//! [`Retry`] and [`ConcurrencyLimit`].

mod limit;
mod mock;
mod openai;
mod retry;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use limit::ConcurrencyLimit;
pub use mock::MockBackend;
pub use openai::{OpenAiBackend, API_KEY_ENV, BASE_URL_ENV, DEFAULT_BASE_URL};
pub use retry::{with_retry, Retry};

pub const DEFAULT_SYSTEM_MESSAGE: &str = "You are a helpful assistant.";
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 200;
pub const DEFAULT_REPETITIONS: u32 = 10;
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        let ms = self.backoff_base_ms.saturating_mul(factor).min(self.backoff_max_ms);
        Duration::from_millis(ms)
    }
}

/// Sampling and execution parameters for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub system_message: String,
    pub repetitions: u32,
    pub request_timeout_secs: f64,
    pub retry: RetryPolicy,
    pub concurrency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_name: "gpt-3.5-turbo".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            system_message: DEFAULT_SYSTEM_MESSAGE.into(),
            repetitions: DEFAULT_REPETITIONS,
            request_timeout_secs: 60.0,
            retry: RetryPolicy::default(),
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("temperature {0} outside [0, 2]")]
    Temperature(f64),
    #[error("max_tokens must be >= 1")]
    MaxTokens,
    #[error("repetitions must be >= 1")]
    Repetitions,
    #[error("retry max_attempts must be >= 1")]
    MaxAttempts,
    #[error("concurrency must be >= 1")]
    Concurrency,
    #[error("request timeout must be positive")]
    Timeout,
    #[error("model name is empty")]
    ModelName,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ConfigError::Temperature(self.temperature));
        }
        if self.max_tokens < 1 {
            return Err(ConfigError::MaxTokens);
        }
        if self.repetitions < 1 {
            return Err(ConfigError::Repetitions);
        }
        if self.retry.max_attempts < 1 {
            return Err(ConfigError::MaxAttempts);
        }
        if self.concurrency < 1 {
            return Err(ConfigError::Concurrency);
        }
        if self.request_timeout_secs.is_nan() || self.request_timeout_secs <= 0.0 {
            return Err(ConfigError::Timeout);
        }
        if self.model_name.trim().is_empty() {
            return Err(ConfigError::ModelName);
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_secs)
    }

    pub fn for_model(&self, model: &str) -> Self {
        Self {
            model_name: model.to_string(),
            ..self.clone()
        }
    }
}

/// One single-turn chat call: system message plus one user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub system_message: String,
    pub user_message: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(config: &RunConfig, system_message: &str, user_message: impl Into<String>) -> Self {
        Self {
            model_name: config.model_name.clone(),
            system_message: system_message.to_string(),
            user_message: user_message.into(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user_message.is_empty() {
            return Err(LlmError::InvalidRequest {
                status: None,
                body: "user message is empty".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Other(String),
}

impl FinishReason {
    pub fn parse(s: Option<&str>) -> Self {
        match s {
            Some("stop") => Self::Stop,
            Some("length") => Self::Length,
            Some(other) => Self::Other(other.to_string()),
            None => Self::Other("unknown".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Option<TokenUsage>,
    pub latency: Duration,
    /// Number of backend calls it took to obtain this response.
    pub attempts: u32,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("rate limited: {body}")]
    RateLimited {
        body: String,
        retry_after: Option<Duration>,
    },
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("authentication failed ({status}): {body}")]
    Auth { status: u16, body: String },
    #[error("invalid request{}: {body}", status.map(|s| format!(" ({s})")).unwrap_or_default())]
    InvalidRequest { status: Option<u16>, body: String },
    #[error("unexpected status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("missing credentials: set {0}")]
    MissingCredentials(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            LlmError::Transport(_) | LlmError::Timeout | LlmError::RateLimited { .. } | LlmError::Server { .. }
        )
    }

    /// Classifies a non-success HTTP status.
    pub fn from_status(status: u16, body: String, retry_after: Option<Duration>) -> Self {
        match status {
            429 => LlmError::RateLimited { body, retry_after },
            401 | 403 => LlmError::Auth { status, body },
            400 | 404 | 422 => LlmError::InvalidRequest {
                status: Some(status),
                body,
            },
            408 => LlmError::Timeout,
            500..=599 => LlmError::Server { status, body },
            _ => LlmError::Status { status, body },
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

/// Counts calls to the wrapped backend.
#[derive(Debug, Default)]
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
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_experiment_setup() {
        let c = RunConfig::default();
        assert_eq!(c.temperature, 0.7);
        assert_eq!(c.max_tokens, 200);
        assert_eq!(c.system_message, "You are a helpful assistant.");
        assert_eq!(c.repetitions, 10);
        assert_eq!(c.concurrency, 4);
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert_eq!(bad(|c| c.temperature = 2.5), ConfigError::Temperature(2.5));
        assert_eq!(bad(|c| c.temperature = -0.1), ConfigError::Temperature(-0.1));
        assert_eq!(bad(|c| c.max_tokens = 0), ConfigError::MaxTokens);
        assert_eq!(bad(|c| c.repetitions = 0), ConfigError::Repetitions);
        assert_eq!(bad(|c| c.retry.max_attempts = 0), ConfigError::MaxAttempts);
    }

    #[test]
    fn partial_config_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"temperature": 0.2, "retry": {"max_attempts": 2}}"#).unwrap();
        assert_eq!(c.temperature, 0.2);
        assert_eq!(c.retry.max_attempts, 2);
        assert_eq!(c.retry.backoff_base_ms, 500);
        assert_eq!(c.max_tokens, 200);
    }

    #[test]
    fn backoff_is_exponential_and_capped() {
        let p = RetryPolicy {
            max_attempts: 10,
            backoff_base_ms: 100,
            backoff_max_ms: 1000,
        };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(4), Duration::from_millis(800));
        assert_eq!(p.backoff(5), Duration::from_millis(1000));
        assert_eq!(p.backoff(80), Duration::from_millis(1000));
    }

    #[test]
    fn status_classification() {
        assert!(LlmError::from_status(429, String::new(), None).is_retryable());
        assert!(LlmError::from_status(503, String::new(), None).is_retryable());
        assert!(!LlmError::from_status(401, String::new(), None).is_retryable());
        assert!(!LlmError::from_status(400, String::new(), None).is_retryable());
        assert!(matches!(
            LlmError::from_status(403, "no".into(), None),
            LlmError::Auth { status: 403, .. }
        ));
    }
}
