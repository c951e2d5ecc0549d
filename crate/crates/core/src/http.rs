//! Blocking JSON-over-HTTP client shared by the encoder, NLI and judge
//! endpoints: bearer auth from an environment variable plus bounded
//! retries with exponential backoff.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << attempt.min(16))
    }
}

/// Runs `op` until it succeeds, fails with a non-retryable error, or the
/// retry budget runs out.
pub fn with_retries<T>(policy: RetryPolicy, mut op: impl FnMut() -> Result<T>) -> Result<T> {
    let mut attempt = 0;
    loop {
        match op() {
            Err(e) if e.is_retryable() && attempt < policy.max_retries => {
                thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Reads a bearer token from `var`; unset or empty means no auth header.
pub fn token_from_env(var: &str) -> Option<String> {
    if var.is_empty() {
        return None;
    }
    std::env::var(var).ok().filter(|t| !t.is_empty())
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    retry: RetryPolicy,
}

impl JsonClient {
    pub fn new(url: &str, token: Option<String>, timeout: Duration, retry: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            agent,
            url: url.to_string(),
            token,
            retry,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// One POST without retries.
    pub fn post_once<Req, Resp>(&self, body: &Req, context: &str) -> Result<Resp>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Error::Transport {
            context: context.to_string(),
            message: e.to_string(),
        })?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport {
                context: context.to_string(),
                message: e.to_string(),
            })?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Validation(format!("{context}: malformed response from {}: {e}", self.url))
        })
    }

    pub fn post<Req, Resp>(&self, body: &Req, context: &str) -> Result<Resp>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        with_retries(self.retry, || self.post_once(body, context))
    }
}
