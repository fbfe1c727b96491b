//! Model backends behind one synchronous trait.
//!
//! A [`Backend`] turns a [`GenerationRequest`] into one or more completion
//! texts. Three implementations ship here: an HTTP client for
//! chat-completions servers ([`http::HttpBackend`]), a lookup-table mock for
//! exact-reply tests ([`scripted::ScriptedBackend`]), and a seeded stochastic
//! mock that emulates a model with a known correctness rate
//! ([`stochastic::StochasticBackend`]). Pipelines hold `Arc<dyn Backend>` and
//! never know which one they got.
//!
//! Requests carry a content digest over the messages and decoding parameters
//! (but not the sample count). Both mocks key their behavior on that digest,
//! which makes every pipeline reproducible: replies depend on what is asked,
//! never on call order or thread interleaving.

pub mod http;
pub mod scripted;
pub mod stochastic;
pub mod wire;

pub use http::HttpBackend;
pub use scripted::{Script, ScriptRule, ScriptedBackend};
pub use stochastic::{toy_questions, StochasticBackend, StochasticProfile};

use crate::corpus::SamplerParams;
use crate::util::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request timed out after {ms} ms")]
    Timeout { ms: u64 },
    #[error("server returned status {status}: {detail}")]
    HttpStatus { status: u16, detail: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no scripted reply for request digest {digest}")]
    NoScriptEntry { digest: String },
    #[error("auth env var {var} is not set")]
    MissingAuth { var: String },
    #[error("cannot read image {path}: {detail}")]
    ImageUnreadable { path: String, detail: String },
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One chat turn. `image_ref` is a local file path; the HTTP backend inlines
/// it as a base64 data URI at request time, and mocks ignore the bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            text: text.into(),
            image_ref: None,
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            image_ref: None,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
            image_ref: None,
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }
}

/// A completion request: chat messages plus decoding parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub top_k: u32,
    pub repetition_penalty: f64,
    /// How many completions to draw for this request.
    pub num_samples: u32,
    /// Optional decode seed, forwarded to servers that accept one and mixed
    /// into mock reply derivation. Distinct seeds give independent samples of
    /// an otherwise identical request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationRequest {
    fn default() -> Self {
        Self {
            messages: Vec::new(),
            max_new_tokens: 4096,
            temperature: 0.3,
            top_k: 5,
            repetition_penalty: 1.05,
            num_samples: 1,
            seed: None,
        }
    }
}

/// Serialization view for [`GenerationRequest::content_digest`]: everything
/// that determines reply content, deliberately excluding `num_samples` so
/// that asking for more samples of the same request extends the sequence
/// instead of reshuffling it.
#[derive(Serialize)]
struct DigestView<'a> {
    messages: &'a [Message],
    max_new_tokens: u32,
    temperature: f64,
    top_k: u32,
    repetition_penalty: f64,
    seed: Option<u64>,
}

impl GenerationRequest {
    pub fn from_user_text(text: impl Into<String>) -> Self {
        Self {
            messages: vec![Message::user(text)],
            ..Self::default()
        }
    }

    pub fn from_messages(messages: Vec<Message>) -> Self {
        Self {
            messages,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_num_samples(mut self, n: u32) -> Self {
        self.num_samples = n;
        self
    }

    /// Hex SHA-256 over the canonical JSON of the request content.
    pub fn content_digest(&self) -> String {
        let view = DigestView {
            messages: &self.messages,
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            top_k: self.top_k,
            repetition_penalty: self.repetition_penalty,
            seed: self.seed,
        };
        sha256_hex(&serde_json::to_vec(&view).expect("request serializes"))
    }

    /// The full conversation text, used by mocks that match on content.
    pub fn joined_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl From<&GenerationRequest> for SamplerParams {
    fn from(req: &GenerationRequest) -> Self {
        SamplerParams {
            max_new_tokens: req.max_new_tokens,
            temperature: req.temperature,
            top_k: req.top_k,
            repetition_penalty: req.repetition_penalty,
            seed: req.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Completion texts in sample order, plus the serving model id when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub texts: Vec<String>,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

/// A synchronous completion source. Implementations must be safe to call
/// from multiple threads at once; [`complete_batch`] relies on it.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError>;

    /// Stable identifier recorded in output provenance fields.
    fn id(&self) -> String;

    /// How many requests may usefully run against this backend at once.
    fn max_in_flight(&self) -> usize {
        8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
    Stochastic,
}

/// Retry policy for transient HTTP failures (timeouts, 429, 5xx). Backoff is
/// exponential with uniform jitter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrySettings {
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_base_backoff_ms")]
    pub base_backoff_ms: u64,
    #[serde(default = "default_jitter_ms")]
    pub jitter_ms: u64,
}

fn default_max_retries() -> u32 {
    2
}
fn default_base_backoff_ms() -> u64 {
    100
}
fn default_jitter_ms() -> u64 {
    50
}

impl Default for RetrySettings {
    fn default() -> Self {
        Self {
            max_retries: default_max_retries(),
            base_backoff_ms: default_base_backoff_ms(),
            jitter_ms: default_jitter_ms(),
        }
    }
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_in_flight() -> usize {
    8
}

/// Declarative backend selection, loadable from config files.
///
/// Authentication is by environment variable name only: `auth_env_var` says
/// where to find the token, and the token itself never appears in config or
/// output files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetrySettings,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Reply table for [`BackendKind::Scripted`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Script>,
    /// Behavior profile for [`BackendKind::Stochastic`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stochastic: Option<StochasticProfile>,
    /// When set, every call appends a digest line here (JSONL).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
}

impl BackendConfig {
    pub fn http(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint_url: Some(endpoint_url.into()),
            model_name: Some(model_name.into()),
            auth_env_var: None,
            timeout_ms: default_timeout_ms(),
            retry: RetrySettings::default(),
            max_in_flight: default_max_in_flight(),
            script: None,
            stochastic: None,
            trace_path: None,
        }
    }

    pub fn scripted(script: Script) -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint_url: None,
            model_name: None,
            auth_env_var: None,
            timeout_ms: default_timeout_ms(),
            retry: RetrySettings::default(),
            max_in_flight: default_max_in_flight(),
            script: Some(script),
            stochastic: None,
            trace_path: None,
        }
    }

    pub fn stochastic(profile: StochasticProfile) -> Self {
        Self {
            kind: BackendKind::Stochastic,
            endpoint_url: None,
            model_name: None,
            auth_env_var: None,
            timeout_ms: default_timeout_ms(),
            retry: RetrySettings::default(),
            max_in_flight: default_max_in_flight(),
            script: None,
            stochastic: Some(profile),
            trace_path: None,
        }
    }
}

/// Builds a backend instance from its config.
///
/// For HTTP backends this resolves the auth token from the configured
/// environment variable (failing fast when it is missing) and never writes
/// the token anywhere.
pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn Backend>, BackendError> {
    let inner: Arc<dyn Backend> = match config.kind {
        BackendKind::Http => {
            let endpoint = config.endpoint_url.clone().ok_or_else(|| {
                BackendError::InvalidConfig("http backend requires endpoint_url".into())
            })?;
            let model = config.model_name.clone().ok_or_else(|| {
                BackendError::InvalidConfig("http backend requires model_name".into())
            })?;
            let token = match &config.auth_env_var {
                Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingAuth {
                    var: var.clone(),
                })?),
                None => None,
            };
            Arc::new(http::HttpBackend::new(
                endpoint,
                model,
                token,
                config.timeout_ms,
                config.retry.clone(),
                config.max_in_flight,
            )?)
        }
        BackendKind::Scripted => {
            let script = config.script.clone().ok_or_else(|| {
                BackendError::InvalidConfig("scripted backend requires a script".into())
            })?;
            Arc::new(ScriptedBackend::new(script).with_max_in_flight(config.max_in_flight))
        }
        BackendKind::Stochastic => {
            let profile = config.stochastic.clone().ok_or_else(|| {
                BackendError::InvalidConfig("stochastic backend requires a profile".into())
            })?;
            Arc::new(StochasticBackend::new(profile)?)
        }
    };
    match &config.trace_path {
        Some(path) => Ok(Arc::new(TracedBackend::new(inner, path)?)),
        None => Ok(inner),
    }
}

/// Line format of backend trace files.
#[derive(Debug, Serialize, Deserialize)]
pub struct TraceEntry {
    pub backend: String,
    pub request_digest: String,
    pub num_samples: u32,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_digest: Option<String>,
}

/// Wraps any backend and appends one JSONL line per call. Replies are traced
/// by digest, not content, so traces stay small and never leak prompt text.
struct TracedBackend {
    inner: Arc<dyn Backend>,
    writer: Mutex<std::io::BufWriter<std::fs::File>>,
}

impl TracedBackend {
    fn new(inner: Arc<dyn Backend>, path: &std::path::Path) -> Result<Self, BackendError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| BackendError::InvalidConfig(format!("cannot open trace file: {e}")))?;
        Ok(Self {
            inner,
            writer: Mutex::new(std::io::BufWriter::new(file)),
        })
    }
}

impl Backend for TracedBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let result = self.inner.complete(request);
        let entry = TraceEntry {
            backend: self.inner.id(),
            request_digest: request.content_digest(),
            num_samples: request.num_samples,
            outcome: match &result {
                Ok(_) => "ok".to_string(),
                Err(e) => format!("error: {e}"),
            },
            reply_digest: result
                .as_ref()
                .ok()
                .map(|r| sha256_hex(r.texts.join("\u{1f}").as_bytes())),
        };
        if let Ok(mut writer) = self.writer.lock() {
            use std::io::Write;
            let _ = serde_json::to_writer(&mut *writer, &entry);
            let _ = writer.write_all(b"\n");
            let _ = writer.flush();
        }
        result
    }

    fn id(&self) -> String {
        self.inner.id()
    }

    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }
}

/// Runs a slice of requests against one backend with bounded parallelism and
/// returns results in input order.
///
/// At most `backend.max_in_flight()` worker threads run at once; workers pull
/// the next unclaimed index, so completion order never affects result order.
/// Individual failures land in their own slot instead of aborting the batch.
pub fn complete_batch(
    backend: &dyn Backend,
    requests: &[GenerationRequest],
) -> Vec<Result<GenerationResponse, BackendError>> {
    let workers = backend.max_in_flight().max(1).min(requests.len());
    if workers <= 1 {
        return requests.iter().map(|r| backend.complete(r)).collect();
    }
    let slots: Vec<Mutex<Option<Result<GenerationResponse, BackendError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= requests.len() {
                    break;
                }
                let result = backend.complete(&requests[i]);
                *slots[i].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot poisoned")
                .expect("every slot filled by a worker")
        })
        .collect()
}

/// Convenience used throughout tests and docs: a stochastic backend with the
/// given profile, wrapped in config form.
pub fn make_stochastic(profile: StochasticProfile) -> Result<Arc<dyn Backend>, BackendError> {
    build_backend(&BackendConfig::stochastic(profile))
}

/// Lookup map type for scripted replies, re-exported for test ergonomics.
pub type DigestMap = BTreeMap<String, String>;
