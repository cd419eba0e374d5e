//! HTTP plumbing shared by the embedding and chat clients: bearer-auth JSON
//! POST, exponential-backoff retries, and a per-endpoint rate limiter.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request to {url} failed: {message}")]
    Connection { url: String, message: String },
    #[error("{url} returned HTTP {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("cannot decode response from {url}: {message}")]
    Decode { url: String, message: String },
}

impl TransportError {
    /// Connection failures, throttling and server errors are worth re-sending.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Connection { .. } => true,
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Decode { .. } => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub max_retries: u32,
    pub base: Duration,
    pub cap: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff { max_retries: 3, base: Duration::from_millis(500), cap: Duration::from_secs(30) }
    }
}

impl Backoff {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base.saturating_mul(factor).min(self.cap)
    }
}

/// Run `op` until it succeeds, fails with a non-retryable error, or the retry
/// budget is spent. The last error is returned.
pub fn with_retries<T>(
    backoff: &Backoff,
    mut op: impl FnMut() -> Result<T, TransportError>,
) -> Result<T, TransportError> {
    let mut attempt = 0;
    loop {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && attempt < backoff.max_retries => {
                log::warn!("transient failure (attempt {}): {e}", attempt + 1);
                thread::sleep(backoff.delay(attempt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Spaces requests evenly at `requests_per_minute`. Shared by every worker
/// talking to one endpoint.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn per_minute(requests_per_minute: f64) -> Self {
        assert!(requests_per_minute > 0.0, "rate limit must be positive");
        RateLimiter {
            interval: Duration::from_secs_f64(60.0 / requests_per_minute),
            next_slot: Mutex::new(None),
        }
    }

    /// Block until this caller's slot arrives.
    pub fn acquire(&self) {
        let slot = {
            let mut next = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = match *next {
                Some(t) if t > now => t,
                _ => now,
            };
            *next = Some(slot + self.interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }
}

pub fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client, TransportError> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| TransportError::Connection { url: String::new(), message: e.to_string() })
}

/// One JSON POST with optional bearer token.
pub fn post_json<B: Serialize, R: DeserializeOwned>(
    client: &reqwest::blocking::Client,
    url: &str,
    token: Option<&str>,
    body: &B,
) -> Result<R, TransportError> {
    let mut req = client.post(url).json(body);
    if let Some(token) = token {
        req = req.bearer_auth(token);
    }
    let resp = req
        .send()
        .map_err(|e| TransportError::Connection { url: url.to_string(), message: e.to_string() })?;
    let status = resp.status();
    let text = resp
        .text()
        .map_err(|e| TransportError::Connection { url: url.to_string(), message: e.to_string() })?;
    if !status.is_success() {
        let mut body = text;
        body.truncate(500);
        return Err(TransportError::Status { url: url.to_string(), status: status.as_u16(), body });
    }
    serde_json::from_str(&text)
        .map_err(|e| TransportError::Decode { url: url.to_string(), message: e.to_string() })
}

/// Bearer token from an environment variable; empty values count as unset.
pub fn token_from_env(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|v| !v.is_empty())
}
