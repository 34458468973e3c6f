//! JSON-over-HTTP backend client with bounded retries.

use std::time::Duration;

use super::{cache, Backend, BackendError, BackendRole, Request, Response};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_INITIAL_BACKOFF: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            initial_backoff: DEFAULT_INITIAL_BACKOFF,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): doubles each time.
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff
            .saturating_mul(1u32.checked_shl(retry.saturating_sub(1)).unwrap_or(u32::MAX))
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    id: String,
    role: BackendRole,
    base_url: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

enum Failure {
    Retryable(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(
        id: &str,
        role: BackendRole,
        base_url: &str,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self, BackendError> {
        if retry.max_attempts == 0 {
            return Err(BackendError::Config("max_attempts must be at least 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(Self {
            id: id.to_string(),
            role,
            base_url: base_url.trim_end_matches('/').to_string(),
            client,
            retry,
        })
    }

    /// Recognized params: `timeout_secs`, `max_attempts`, `initial_backoff_ms`.
    pub fn from_params(
        id: &str,
        role: BackendRole,
        base_url: &str,
        params: &serde_json::Map<String, serde_json::Value>,
    ) -> Result<Self, BackendError> {
        let mut timeout = DEFAULT_TIMEOUT;
        let mut retry = RetryPolicy::default();
        for (key, value) in params {
            let n = value.as_f64().filter(|v| *v >= 0.0).ok_or_else(|| {
                BackendError::Config(format!("backend '{id}': param '{key}' must be a non-negative number"))
            })?;
            match key.as_str() {
                "timeout_secs" => timeout = Duration::from_secs_f64(n),
                "max_attempts" => retry.max_attempts = n as u32,
                "initial_backoff_ms" => retry.initial_backoff = Duration::from_millis(n as u64),
                other => {
                    return Err(BackendError::Config(format!(
                        "backend '{id}': unknown param '{other}'"
                    )))
                }
            }
        }
        if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
            return Err(BackendError::Config(format!(
                "backend '{id}': base_url must be http(s) or \"mock\", got '{base_url}'"
            )));
        }
        Self::new(id, role, base_url, timeout, retry)
    }

    fn attempt(&self, url: &str, request: &Request, body: &serde_json::Value) -> Result<Response, Failure> {
        let resp = self
            .client
            .post(url)
            .json(body)
            .send()
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        let bytes = resp.bytes().map_err(|e| Failure::Retryable(e.to_string()))?;
        let malformed = |message: String| {
            Failure::Fatal(BackendError::Malformed {
                backend: self.id.clone(),
                message,
            })
        };
        let parsed = Response::from_json_bytes(request.endpoint(), &bytes)
            .map_err(|e| malformed(e.to_string()))?;
        parsed.validate(request).map_err(malformed)?;
        Ok(parsed)
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn role(&self) -> BackendRole {
        self.role
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        let url = format!("{}/{}", self.base_url, request.endpoint().path());
        let body = request.to_json();
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.retry.backoff(attempt - 1));
            }
            match self.attempt(&url, request, &body) {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    log::warn!("backend '{}' attempt {attempt} failed: {msg}", self.id);
                    last = msg;
                }
            }
        }
        Err(BackendError::Transport {
            backend: self.id.clone(),
            request_hash: cache::request_key(&self.id, request),
            attempts: self.retry.max_attempts,
            message: last,
        })
    }
}
