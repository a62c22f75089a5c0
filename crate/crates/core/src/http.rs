//! Blocking JSON-over-HTTP client with retry and exponential backoff.

use std::time::{Duration, Instant};

use log::warn;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based), with +/-25% jitter.
    pub fn delay(&self, attempt: u32) -> Duration {
        let nominal = self.base_delay.as_secs_f64() * self.factor.powi(attempt as i32);
        let jitter = 0.75 + 0.5 * rand::random::<f64>();
        Duration::from_secs_f64(nominal * jitter)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct JsonClient {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl JsonClient {
    pub fn new(timeout: Duration, api_key: Option<String>, retry: RetryPolicy) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            client,
            api_key,
            retry,
        })
    }

    /// POSTs `body` and returns the decoded JSON response together with the wall time
    /// of the attempt that succeeded. Transport failures, 429 and 5xx are retried.
    pub fn post(&self, url: &str, body: &Value) -> Result<(Value, Duration)> {
        let mut attempt = 0;
        loop {
            let started = Instant::now();
            let result = self.attempt(url, body, attempt + 1);
            let elapsed = started.elapsed();
            match result {
                Ok(v) => return Ok((v, elapsed)),
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    let delay = self.retry.delay(attempt);
                    warn!("{url}: {e}; retrying in {:.2}s", delay.as_secs_f64());
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn attempt(&self, url: &str, body: &Value, attempts: u32) -> Result<Value> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let transport = |e: reqwest::Error| Error::Transport {
            attempts,
            message: e.to_string(),
        };
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        let text = resp.text().map_err(transport)?;
        if !status.is_success() {
            return Err(Error::Endpoint {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text)
            .map_err(|e| Error::Protocol(format!("{url}: response is not valid JSON: {e}")))
    }
}

/// Joins an endpoint path onto a base URL, tolerating a trailing slash.
pub(crate) fn endpoint(base_url: &str, path: &str) -> String {
    format!("{}/{}", base_url.trim_end_matches('/'), path.trim_start_matches('/'))
}
