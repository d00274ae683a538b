//! Blocking JSON-over-HTTP with a timeout and bounded exponential-backoff
//! retries. Shared by the remote chat backend, the remote embedder and the
//! HTTP API bindings.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use thiserror::Error;

const EXCERPT_BYTES: usize = 512;

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    /// Delay before retry number `attempt` (0-based): base * 2^attempt, capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(20)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HttpFailure {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempt(s); retry after {retry_after:?}")]
    RateLimited { retry_after: Option<Duration>, attempts: u32 },
    #[error("HTTP error (status {status:?}) after {attempts} attempt(s): {body}")]
    Status {
        status: Option<u16>,
        body: String,
        attempts: u32,
    },
}

/// Retry counters exposed for telemetry.
#[derive(Debug, Default)]
pub struct HttpStats {
    requests: AtomicU64,
    retries: AtomicU64,
}

impl HttpStats {
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }
}

pub fn build_client(timeout: Duration) -> Client {
    Client::builder()
        .timeout(timeout)
        .connect_timeout(timeout)
        .build()
        .expect("http client")
}

pub fn excerpt(body: &str) -> String {
    truncate_utf8(body, EXCERPT_BYTES).0.to_string()
}

/// Cuts `s` to at most `max` bytes on a char boundary.
pub fn truncate_utf8(s: &str, max: usize) -> (&str, bool) {
    if s.len() <= max {
        return (s, false);
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    (&s[..end], true)
}

fn retry_after(resp: &Response) -> Option<Duration> {
    resp.headers()
        .get(reqwest::header::RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse::<u64>()
        .ok()
        .map(Duration::from_secs)
}

/// A successful exchange: final status, body text and wall-clock latency.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub status: u16,
    pub body: String,
    pub latency: Duration,
}

/// Sends the request built by `make` until it succeeds or retries run out.
/// Retries connection failures, timeouts, 429 and 5xx. Any other status is
/// returned to the caller as an `Exchange` so it can decide.
pub fn send_with_retry(
    policy: &RetryPolicy,
    stats: &HttpStats,
    make: impl Fn() -> RequestBuilder,
) -> Result<Exchange, HttpFailure> {
    let start = Instant::now();
    let mut attempt = 0u32;
    loop {
        stats.requests.fetch_add(1, Ordering::Relaxed);
        let failure = match make().send() {
            Ok(resp) => {
                let status = resp.status();
                if status == StatusCode::TOO_MANY_REQUESTS {
                    let wait = retry_after(&resp);
                    HttpFailure::RateLimited {
                        retry_after: wait,
                        attempts: attempt + 1,
                    }
                } else if status.is_server_error() {
                    let body = resp.text().unwrap_or_default();
                    HttpFailure::Status {
                        status: Some(status.as_u16()),
                        body: excerpt(&body),
                        attempts: attempt + 1,
                    }
                } else {
                    let body = resp.text().map_err(|e| HttpFailure::Status {
                        status: Some(status.as_u16()),
                        body: e.to_string(),
                        attempts: attempt + 1,
                    })?;
                    return Ok(Exchange {
                        status: status.as_u16(),
                        body,
                        latency: start.elapsed(),
                    });
                }
            }
            Err(e) if e.is_timeout() => HttpFailure::Timeout { attempts: attempt + 1 },
            Err(e) => HttpFailure::Status {
                status: e.status().map(|s| s.as_u16()),
                body: e.to_string(),
                attempts: attempt + 1,
            },
        };
        if attempt >= policy.max_retries {
            return Err(failure);
        }
        let mut delay = policy.backoff(attempt);
        if let HttpFailure::RateLimited { retry_after: Some(w), .. } = &failure {
            delay = delay.max(*w).min(policy.max_delay);
        }
        tracing::debug!(attempt, ?delay, error = %failure, "retrying request");
        stats.retries.fetch_add(1, Ordering::Relaxed);
        std::thread::sleep(delay);
        attempt += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(500),
        };
        assert_eq!(p.backoff(0), Duration::from_millis(100));
        assert_eq!(p.backoff(1), Duration::from_millis(200));
        assert_eq!(p.backoff(2), Duration::from_millis(400));
        assert_eq!(p.backoff(3), Duration::from_millis(500));
        assert_eq!(p.backoff(40), Duration::from_millis(500));
    }

    #[test]
    fn truncation_respects_char_boundaries() {
        let s = "aé"; // 'é' is two bytes
        assert_eq!(truncate_utf8(s, 2), ("a", true));
        assert_eq!(truncate_utf8(s, 3), ("aé", false));
    }
}
