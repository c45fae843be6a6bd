//! JSON-over-HTTP plumbing shared by the generation, segmentation and
//! embedding clients.

use std::time::Duration;

use rand::Rng;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

/// Environment variable holding the bearer token sent to remote providers.
pub const PROVIDER_TOKEN_ENV: &str = "TEMPLEAK_PROVIDER_TOKEN";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    /// Transient failure (timeout, 429, 5xx) that survived every retry.
    #[error("{endpoint}: giving up after {attempts} attempts: {message}")]
    Retryable {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("{endpoint}: unreachable after {attempts} attempts: {message}")]
    Unreachable {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    /// Content-policy refusal. Never retried.
    #[error("provider refused request: {message}")]
    Refused { message: String },
    #[error("{endpoint}: http {status}: {body}")]
    Http {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("{endpoint}: malformed response: {message}")]
    BadResponse { endpoint: String, message: String },
}

impl TransportError {
    pub fn is_unreachable(&self) -> bool {
        matches!(self, TransportError::Unreachable { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    /// Jitter factor; each delay is scaled by a uniform draw in `1 ± jitter`.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_secs(1),
            jitter: 0.5,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): `base * 2^retry`, jittered.
    pub fn delay(&self, retry: u32) -> Duration {
        let base = self.base_delay.as_secs_f64() * 2f64.powi(retry as i32);
        let factor = if self.jitter > 0.0 {
            rand::rng().random_range((1.0 - self.jitter)..=(1.0 + self.jitter))
        } else {
            1.0
        };
        Duration::from_secs_f64((base * factor).max(0.0))
    }
}

#[derive(Debug, Clone)]
pub struct HttpEndpoint {
    pub base_url: String,
    pub token: Option<String>,
    pub retry: RetryPolicy,
    client: reqwest::Client,
}

impl HttpEndpoint {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::BadResponse {
                endpoint: base_url.to_string(),
                message: e.to_string(),
            })?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            token: std::env::var(PROVIDER_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            retry: RetryPolicy::default(),
            client,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url, path)
    }

    pub async fn post_json<Req: Serialize + ?Sized, Resp: DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, TransportError> {
        let url = self.url(path);
        let attempts = self.retry.attempts.max(1);
        let mut last: Option<TransportError> = None;
        for attempt in 1..=attempts {
            if attempt > 1 {
                tokio::time::sleep(self.retry.delay(attempt - 2)).await;
            }
            let mut req = self.client.post(&url).json(body);
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            match req.send().await {
                Err(e) => {
                    let transient = e.is_timeout() || e.is_connect() || e.is_request();
                    let err = if e.is_connect() {
                        TransportError::Unreachable {
                            endpoint: url.clone(),
                            attempts: attempt,
                            message: e.to_string(),
                        }
                    } else {
                        TransportError::Retryable {
                            endpoint: url.clone(),
                            attempts: attempt,
                            message: e.to_string(),
                        }
                    };
                    if !transient {
                        return Err(err);
                    }
                    last = Some(err);
                }
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().await.unwrap_or_default();
                    if status.is_success() {
                        return serde_json::from_str(&text).map_err(|e| {
                            TransportError::BadResponse {
                                endpoint: url.clone(),
                                message: e.to_string(),
                            }
                        });
                    }
                    if let Some(message) = refusal_message(status, &text) {
                        return Err(TransportError::Refused { message });
                    }
                    if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
                        last = Some(TransportError::Retryable {
                            endpoint: url.clone(),
                            attempts: attempt,
                            message: format!("http {}", status.as_u16()),
                        });
                        continue;
                    }
                    return Err(TransportError::Http {
                        endpoint: url.clone(),
                        status: status.as_u16(),
                        body: text,
                    });
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// A refusal is HTTP 451, or any 4xx whose JSON body carries
/// `{"error": {"type": "content_policy", "message": ...}}`.
fn refusal_message(status: StatusCode, body: &str) -> Option<String> {
    if !status.is_client_error() {
        return None;
    }
    let parsed: Option<serde_json::Value> = serde_json::from_str(body).ok();
    let policy_msg = parsed.as_ref().and_then(|v| {
        let err = v.get("error")?;
        (err.get("type")?.as_str()? == "content_policy")
            .then(|| err.get("message").and_then(|m| m.as_str()).unwrap_or("").to_string())
    });
    match policy_msg {
        Some(m) => Some(m),
        None if status == StatusCode::UNAVAILABLE_FOR_LEGAL_REASONS => Some(body.to_string()),
        None => None,
    }
}
