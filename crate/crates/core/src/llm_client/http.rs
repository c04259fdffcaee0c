use std::env;
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{BackendError, BackendKind, CompletionBackend, CompletionRequest, CompletionResponse};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub api_key: String,
    pub request_timeout: Duration,
    pub retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff: Duration,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            request_timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_secs(1),
        }
    }

    /// Reads `DCO_ENDPOINT` and `DCO_API_KEY`.
    pub fn from_env() -> Result<Self, BackendError> {
        let endpoint = env::var("DCO_ENDPOINT")
            .map_err(|_| BackendError::Config("DCO_ENDPOINT is not set".into()))?;
        let api_key = env::var("DCO_API_KEY")
            .map_err(|_| BackendError::Config("DCO_API_KEY is not set".into()))?;
        Ok(Self::new(endpoint, api_key))
    }
}

/// Chat-completions client. The underlying blocking client is built on
/// first use so that constructing the backend inside an async runtime is
/// harmless.
pub struct HttpBackend {
    config: HttpConfig,
    client: OnceLock<Client>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        Self {
            config,
            client: OnceLock::new(),
        }
    }

    fn client(&self) -> Result<&Client, BackendError> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let c = Client::builder()
            .timeout(self.config.request_timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(self.client.get_or_init(|| c))
    }

    fn attempt(&self, body: &Value) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let resp = self
            .client()?
            .post(&url)
            .bearer_auth(&self.config.api_key)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout
                } else {
                    BackendError::Network(e.to_string())
                }
            })?;
        let status = resp.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(BackendError::Auth(status.to_string()));
        }
        let text = resp.text().map_err(|e| BackendError::Network(e.to_string()))?;
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::Network(format!("{status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Rejected {
                status: status.as_u16(),
                body: text,
            });
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        match v.pointer("/choices/0/message/content") {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Null) => Ok(String::new()),
            _ => Err(BackendError::Protocol("missing choices[0].message.content".into())),
        }
    }
}

impl CompletionBackend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let b = &request.bundle;
        let body = json!({
            "model": b.model_id,
            "temperature": b.temperature,
            "messages": [
                {"role": "system", "content": b.system_text},
                {"role": "user", "content": b.user_text},
            ],
        });
        let started = Instant::now();
        let mut delay = self.config.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Ok(text) => {
                    debug!(key = %request.request_key, attempt, "completion received");
                    return Ok(CompletionResponse {
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        backend: BackendKind::Http,
                    });
                }
                Err(BackendError::Network(msg)) if attempt < self.config.retries => {
                    warn!(attempt, error = %msg, "completion failed, retrying");
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
