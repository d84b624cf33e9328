//! Chat-completion client and offline replay.
//!
//! Requests use the common `POST <base_url>/chat/completions` JSON shape.
//! Transport failures and 5xx responses are retried with exponential backoff;
//! 4xx responses and malformed bodies fail immediately.

use std::fmt;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::prompts::RenderedPrompt;

/// Environment variable holding the bearer token.
pub const AUTH_TOKEN_ENV: &str = "SOLAUDIT_API_TOKEN";

const EXCERPT_LEN: usize = 200;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid endpoint configuration: {0}")]
    InvalidConfig(String),
    #[error("endpoint failed after {attempts} attempts: {last}")]
    Endpoint { attempts: u32, last: String },
    #[error("request rejected with HTTP {status}: {excerpt}")]
    Request { status: u16, excerpt: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no replay response for sample {sample_id} ({template_name})")]
    ReplayMissing { sample_id: String, template_name: String },
    #[error("replay I/O at {path}: {source}")]
    ReplayIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub auth_token: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_base: Duration,
}

impl fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("base_url", &self.base_url)
            .field("model_name", &self.model_name)
            .field("auth_token", &self.auth_token.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .field("backoff_base", &self.backoff_base)
            .finish()
    }
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            auth_token: None,
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_secs(1),
        }
    }

    /// Reads the token from [`AUTH_TOKEN_ENV`] if it is set and non-empty.
    pub fn with_token_from_env(mut self) -> Self {
        self.auth_token = std::env::var(AUTH_TOKEN_ENV).ok().filter(|t| !t.is_empty());
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.timeout.is_zero() {
            return Err(ClientError::InvalidConfig("timeout must be positive".into()));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(ClientError::InvalidConfig(format!(
                "base url `{}` must start with http:// or https://",
                self.base_url
            )));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    /// Delay after failed attempt number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.backoff_base.saturating_mul(1u32 << (attempt - 1).min(20))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub sample_id: String,
    pub template_name: String,
    /// Assistant content exactly as received.
    pub raw_text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// A failed batch item, kept in place so output order matches input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub sample_id: String,
    pub template_name: String,
    pub error: String,
}

/// One line of a responses file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchItem {
    Ok(ResponseRecord),
    Failed(ItemFailure),
}

impl BatchItem {
    pub fn sample_id(&self) -> &str {
        match self {
            BatchItem::Ok(r) => &r.sample_id,
            BatchItem::Failed(f) => &f.sample_id,
        }
    }

    pub fn response(&self) -> Option<&ResponseRecord> {
        match self {
            BatchItem::Ok(r) => Some(r),
            BatchItem::Failed(_) => None,
        }
    }
}

/// Anything that can answer a rendered prompt.
pub trait CompletionBackend: Sync {
    fn complete(&self, prompt: &RenderedPrompt) -> impl Future<Output = Result<ResponseRecord, ClientError>> + Send;
}

pub fn request_body(model: &str, prompt: &RenderedPrompt) -> Value {
    json!({
        "model": model,
        "messages": prompt.messages.iter().map(|m| json!({
            "role": m.role,
            "content": m.content,
        })).collect::<Vec<_>>(),
    })
}

/// Pulls the first choice's assistant content out of a response body.
pub fn extract_content(body: &str) -> Result<String, ClientError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ClientError::Protocol(format!("invalid JSON: {e}")))?;
    let choices = v
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| ClientError::Protocol("missing `choices` array".into()))?;
    let first = choices
        .first()
        .ok_or_else(|| ClientError::Protocol("empty `choices` array".into()))?;
    first
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ClientError::Protocol("first choice has no string `message.content`".into()))
}

fn excerpt(body: &str) -> String {
    body.chars().take(EXCERPT_LEN).collect()
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    config: EndpointConfig,
}

impl HttpBackend {
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ClientError::InvalidConfig(e.to_string()))?;
        Ok(HttpBackend { client, config })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    async fn attempt(&self, url: &str, body: &Value) -> Result<String, (bool, ClientError)> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = &self.config.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| (true, ClientError::Protocol(format!("transport: {e}"))))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| (true, ClientError::Protocol(format!("reading body: {e}"))))?;
        if status.is_server_error() {
            return Err((
                true,
                ClientError::Request {
                    status: status.as_u16(),
                    excerpt: excerpt(&text),
                },
            ));
        }
        if !status.is_success() {
            return Err((
                false,
                ClientError::Request {
                    status: status.as_u16(),
                    excerpt: excerpt(&text),
                },
            ));
        }
        extract_content(&text).map_err(|e| (false, e))
    }
}

impl CompletionBackend for HttpBackend {
    async fn complete(&self, prompt: &RenderedPrompt) -> Result<ResponseRecord, ClientError> {
        let url = self.config.completions_url();
        let body = request_body(&self.config.model_name, prompt);
        let max_attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=max_attempts {
            let started = Instant::now();
            match self.attempt(&url, &body).await {
                Ok(raw_text) => {
                    return Ok(ResponseRecord {
                        sample_id: prompt.sample_id.clone(),
                        template_name: prompt.template_name.clone(),
                        raw_text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                    })
                }
                Err((false, e)) => return Err(e),
                Err((true, e)) => last = e.to_string(),
            }
            if attempt < max_attempts {
                tokio::time::sleep(self.config.backoff(attempt)).await;
            }
        }
        Err(ClientError::Endpoint {
            attempts: max_attempts,
            last,
        })
    }
}

/// Sends one prompt to the configured endpoint.
pub async fn complete(config: &EndpointConfig, prompt: &RenderedPrompt) -> Result<ResponseRecord, ClientError> {
    HttpBackend::new(config.clone())?.complete(prompt).await
}

/// Serves canned responses from `<dir>/<template_name>/<sample_id>.txt`.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    dir: PathBuf,
}

impl ReplayBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayBackend { dir: dir.into() }
    }

    pub fn path_for(&self, template_name: &str, sample_id: &str) -> PathBuf {
        self.dir.join(template_name).join(format!("{sample_id}.txt"))
    }

    /// Writes a canned response where [`ReplayBackend`] will look for it.
    pub fn store(dir: &Path, template_name: &str, sample_id: &str, raw_text: &str) -> std::io::Result<()> {
        let sub = dir.join(template_name);
        std::fs::create_dir_all(&sub)?;
        std::fs::write(sub.join(format!("{sample_id}.txt")), raw_text)
    }
}

impl CompletionBackend for ReplayBackend {
    async fn complete(&self, prompt: &RenderedPrompt) -> Result<ResponseRecord, ClientError> {
        let path = self.path_for(&prompt.template_name, &prompt.sample_id);
        let raw_text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ClientError::ReplayMissing {
                    sample_id: prompt.sample_id.clone(),
                    template_name: prompt.template_name.clone(),
                })
            }
            Err(source) => return Err(ClientError::ReplayIo { path, source }),
        };
        Ok(ResponseRecord {
            sample_id: prompt.sample_id.clone(),
            template_name: prompt.template_name.clone(),
            raw_text,
            latency_ms: 0,
            attempt_count: 1,
        })
    }
}

/// Answers every prompt with at most `concurrency_limit` requests in flight.
/// Results come back in input order; failures are recorded per item.
pub async fn run_batch<B: CompletionBackend>(
    backend: &B,
    prompts: &[RenderedPrompt],
    concurrency_limit: usize,
) -> Vec<BatchItem> {
    let limit = concurrency_limit.max(1);
    stream::iter(prompts)
        .map(|p| async move {
            match backend.complete(p).await {
                Ok(r) => BatchItem::Ok(r),
                Err(e) => BatchItem::Failed(ItemFailure {
                    sample_id: p.sample_id.clone(),
                    template_name: p.template_name.clone(),
                    error: e.to_string(),
                }),
            }
        })
        .buffered(limit)
        .collect()
        .await
}
