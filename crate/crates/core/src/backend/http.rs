//! HTTP backend for chat-completions servers.
//!
//! Each call renders the request to canonical wire JSON, posts it with an
//! optional bearer token, and parses the reply. Timeouts, HTTP 429, and 5xx
//! responses are retried with exponential backoff plus jitter; other failures
//! (4xx, malformed bodies, transport errors) are terminal. A gate bounds how
//! many requests one instance has in flight across all threads.

use super::wire;
use super::{Backend, BackendError, GenerationRequest, GenerationResponse, RetrySettings};
use rand::Rng;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    token: Option<String>,
    timeout_ms: u64,
    retry: RetrySettings,
    max_in_flight: usize,
    gate: ConcurrencyGate,
}

impl HttpBackend {
    pub fn new(
        endpoint: String,
        model: String,
        token: Option<String>,
        timeout_ms: u64,
        retry: RetrySettings,
        max_in_flight: usize,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::InvalidConfig(format!("http client: {e}")))?;
        let max_in_flight = max_in_flight.max(1);
        Ok(Self {
            client,
            endpoint,
            model,
            token,
            timeout_ms,
            retry,
            max_in_flight,
            gate: ConcurrencyGate::new(max_in_flight),
        })
    }

    fn send_once(&self, body: &[u8]) -> Result<GenerationResponse, (BackendError, bool)> {
        let mut builder = self
            .client
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .timeout(Duration::from_millis(self.timeout_ms))
            .body(body.to_vec());
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = match builder.send() {
            Err(e) if e.is_timeout() => {
                return Err((
                    BackendError::Timeout {
                        ms: self.timeout_ms,
                    },
                    true,
                ))
            }
            Err(e) => return Err((BackendError::Transport(e.to_string()), false)),
            Ok(r) => r,
        };
        let status = response.status().as_u16();
        let bytes = match response.bytes() {
            Ok(b) => b,
            Err(e) if e.is_timeout() => {
                return Err((
                    BackendError::Timeout {
                        ms: self.timeout_ms,
                    },
                    true,
                ))
            }
            Err(e) => return Err((BackendError::Transport(e.to_string()), false)),
        };
        if (200..300).contains(&status) {
            // A success body that fails to parse is terminal: the server is
            // answering, just not in the shape we speak.
            return wire::parse_response(&bytes).map_err(|e| (e, false));
        }
        let detail: String = String::from_utf8_lossy(&bytes).chars().take(200).collect();
        Err((
            BackendError::HttpStatus { status, detail },
            is_retryable_status(status),
        ))
    }
}

pub(crate) fn is_retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl Backend for HttpBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let _permit = self.gate.acquire();
        let body = wire::render_request_bytes(request, &self.model)?;
        let attempts = self.retry.max_retries + 1;
        let mut last_error = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self
                    .retry
                    .base_backoff_ms
                    .saturating_mul(1u64 << (attempt - 1).min(16))
                    .min(30_000);
                let jitter = if self.retry.jitter_ms > 0 {
                    rand::rng().random_range(0..=self.retry.jitter_ms)
                } else {
                    0
                };
                std::thread::sleep(Duration::from_millis(backoff + jitter));
            }
            match self.send_once(&body) {
                Ok(response) => return Ok(response),
                Err((error, retryable)) => {
                    if !retryable {
                        return Err(error);
                    }
                    last_error = Some(error);
                }
            }
        }
        Err(last_error.expect("at least one attempt ran"))
    }

    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

/// Counting gate: at most N holders at once, blocking acquire.
struct ConcurrencyGate {
    available: Mutex<usize>,
    cv: Condvar,
}

struct GatePermit<'a> {
    gate: &'a ConcurrencyGate,
}

impl ConcurrencyGate {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut available = self.available.lock().expect("gate poisoned");
        while *available == 0 {
            available = self.cv.wait(available).expect("gate poisoned");
        }
        *available -= 1;
        GatePermit { gate: self }
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut available = self.gate.available.lock().expect("gate poisoned");
        *available += 1;
        self.gate.cv.notify_one();
    }
}
