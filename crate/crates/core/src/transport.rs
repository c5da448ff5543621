//! JSON-over-HTTP POST with exponential backoff, shared by the remote
//! embedder and the chat-completions provider.

use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

pub const API_KEY_ENV: &str = "ENGINE_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `n` (1-based); zero before the first attempt.
    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            Duration::ZERO
        } else {
            self.base_delay * 2u32.saturating_pow(attempt - 2)
        }
    }
}

#[derive(Debug, Error)]
#[error("POST {url} failed after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (last status {s})")).unwrap_or_default())]
pub struct TransportError {
    pub url: String,
    pub attempts: u32,
    pub status: Option<u16>,
    pub message: String,
}

pub fn api_key_from_env() -> Option<String> {
    std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty())
}

/// Posts `body` and returns the decoded JSON response. Connection failures,
/// 429 and 5xx responses are retried; other 4xx responses fail immediately.
pub async fn post_json(
    client: &reqwest::Client,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
    policy: RetryPolicy,
) -> Result<Value, TransportError> {
    let attempts = policy.attempts.max(1);
    let mut last_status = None;
    let mut last_message = String::new();

    for attempt in 1..=attempts {
        let delay = policy.delay_before(attempt);
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }

        let mut request = client.post(url).json(body);
        if let Some(key) = api_key {
            request = request.bearer_auth(key);
        }

        match request.send().await {
            Ok(response) => {
                let status = response.status();
                last_status = Some(status.as_u16());
                if status.is_success() {
                    return response.json::<Value>().await.map_err(|e| TransportError {
                        url: url.to_string(),
                        attempts: attempt,
                        status: last_status,
                        message: format!("invalid response body: {e}"),
                    });
                }
                last_message = response.text().await.unwrap_or_default();
                let retryable = status.is_server_error() || status.as_u16() == 429;
                if !retryable {
                    return Err(TransportError {
                        url: url.to_string(),
                        attempts: attempt,
                        status: last_status,
                        message: last_message,
                    });
                }
                log::warn!("{url}: status {status} on attempt {attempt}/{attempts}");
            }
            Err(e) => {
                log::warn!("{url}: {e} on attempt {attempt}/{attempts}");
                last_message = e.to_string();
            }
        }
    }

    Err(TransportError {
        url: url.to_string(),
        attempts,
        status: last_status,
        message: last_message,
    })
}
