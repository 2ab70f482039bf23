//! Contracts for external services and the call machinery around them.
//!
//! Every backend is synchronous request/response. Production profiles and
//! the in-tree mocks implement the same traits.

mod http;
mod limit;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Domain, ImageRecord};

pub use http::{GoogleVisionOcr, OpenAiCompatible};
pub use limit::TokenBucket;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend timed out")]
    Timeout,
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend rate limited")]
    RateLimited,
    #[error("no fixture for `{0}`")]
    FixtureMissing(String),
    #[error("backend returned http {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl BackendError {
    /// Whether a retry may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Unavailable(_) | BackendError::RateLimited => {
                true
            }
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub struct VisionRequest<'a> {
    pub model: &'a str,
    pub max_tokens: u32,
    pub temperature: f32,
    pub image: &'a ImageRecord,
    pub image_bytes: Option<&'a [u8]>,
    pub prompt: &'a str,
}

pub trait VisionBackend: Send + Sync {
    fn id(&self) -> &str;
    fn describe(&self, req: &VisionRequest<'_>) -> Result<String, BackendError>;
}

pub struct TextRequest<'a> {
    pub model: &'a str,
    pub max_tokens: u32,
    pub temperature: f32,
    pub prompt: &'a str,
    pub fingerprint: &'a str,
}

pub trait TextBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, req: &TextRequest<'_>) -> Result<String, BackendError>;
}

pub trait OcrBackend: Send + Sync {
    /// Recognized text; an empty string means no text was found.
    fn recognize(&self, image: &ImageRecord, bytes: Option<&[u8]>) -> Result<String, BackendError>;
}

/// One image as returned by a fetcher or similarity index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchedImage {
    pub uri: String,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
    #[serde(default)]
    pub tags: Vec<String>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FetchError {
    #[error("fetcher unavailable: {0}")]
    Unavailable(String),
    #[error("fetch quota exceeded")]
    QuotaExceeded,
}

pub trait ImageFetcher: Send + Sync {
    fn fetch(&self, phrase: &str, domain: Domain) -> Result<Vec<FetchedImage>, FetchError>;
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("similarity index unavailable: {0}")]
    Unavailable(String),
}

pub trait SimilarityIndex: Send + Sync {
    fn name(&self) -> &str;
    fn neighbors(&self, anchor: &ImageRecord, k: usize) -> Result<Vec<FetchedImage>, IndexError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Exponential backoff for the given retry number (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64 << retry.saturating_sub(1).min(20);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retried<T> {
    pub value: T,
    pub retries: u32,
}

/// Runs `f` until it succeeds, fails permanently, or the retry budget is spent.
pub fn with_retry<T, E>(
    policy: &RetryPolicy,
    limiter: Option<&TokenBucket>,
    is_transient: impl Fn(&E) -> bool,
    mut f: impl FnMut() -> Result<T, E>,
) -> Result<Retried<T>, E>
where
    E: std::fmt::Display,
{
    let mut retries = 0;
    loop {
        if let Some(l) = limiter {
            l.acquire();
        }
        match f() {
            Ok(value) => return Ok(Retried { value, retries }),
            Err(e) if is_transient(&e) && retries < policy.max_retries => {
                retries += 1;
                log::warn!(
                    "transient backend failure ({e}); retry {retries}/{}",
                    policy.max_retries
                );
                let wait = policy.delay(retries);
                if !wait.is_zero() {
                    std::thread::sleep(wait);
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Request parameters and call policy for one backend profile.
#[derive(Debug, Clone)]
pub struct CallSettings {
    pub model: String,
    pub max_tokens: u32,
    pub temperature: f32,
    pub retry: RetryPolicy,
    pub limiter: Option<Arc<TokenBucket>>,
    pub parallelism: usize,
}

impl Default for CallSettings {
    fn default() -> Self {
        Self {
            model: "mock".into(),
            max_tokens: 1024,
            temperature: 0.0,
            retry: RetryPolicy::immediate(3),
            limiter: None,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    OpenaiCompatible,
    GoogleVision,
}

/// A named backend configuration. Credentials are read from the
/// environment variable named by `api_key_env`, never from the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendProfile {
    pub kind: BackendKind,
    pub model: String,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub max_tokens: u32,
    pub temperature: f32,
    /// Requests per second; 0 disables rate limiting.
    pub rate_per_sec: f64,
    pub burst: u32,
    pub parallelism: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for BackendProfile {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            model: "mock".into(),
            endpoint: None,
            api_key_env: None,
            max_tokens: 1024,
            temperature: 0.7,
            rate_per_sec: 0.0,
            burst: 1,
            parallelism: 4,
            timeout_secs: 120,
            retry: RetryPolicy::default(),
        }
    }
}

impl BackendProfile {
    pub fn call_settings(&self) -> CallSettings {
        CallSettings {
            model: self.model.clone(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            retry: self.retry,
            limiter: (self.rate_per_sec > 0.0)
                .then(|| Arc::new(TokenBucket::new(self.burst.max(1), self.rate_per_sec))),
            parallelism: self.parallelism.max(1),
        }
    }

    pub fn api_key(&self) -> Result<Option<String>, BackendError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| {
                BackendError::Config(format!("environment variable {var} is not set"))
            }),
        }
    }
}
