//! Completion backends: live HTTP (chat-completions wire format), replay of
//! recorded fixtures, and a scripted mock.

mod http;
mod mock;
mod replay;

use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use mock::{MockBackend, MockEntry, MockScript};
pub use replay::{record, FixtureEntry, RecordingBackend, ReplayBackend};

use crate::hashing::{render_temperature, sha256_hex};
use crate::prompt_builder::PromptBundle;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("network error: {0}")]
    Network(String),
    #[error("no fixture for request key {0}")]
    MissingFixture(String),
    #[error("no scripted response for directive {0:?}")]
    MissingScript(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("backend request timed out")]
    Timeout,
    #[error("backend rejected request ({status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend reply: {0}")]
    Protocol(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
    Mock,
}

/// Which directive (and, during evaluation, which sample) a request is for.
/// Only the mock reads this; it is not part of the request key.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestOrigin {
    pub directive_id: String,
    pub directive_version: u64,
    pub sample_index: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub bundle: PromptBundle,
    pub origin: RequestOrigin,
    pub request_key: String,
}

impl CompletionRequest {
    pub fn new(bundle: PromptBundle, origin: RequestOrigin) -> Self {
        let request_key = sha256_hex(canonical_serialization(&bundle, origin.sample_index));
        Self {
            bundle,
            origin,
            request_key,
        }
    }
}

/// `model \n temperature(6dp) \n system \n user`, plus `\n sample` when the
/// request is one of several evaluation samples.
pub fn canonical_serialization(bundle: &PromptBundle, sample_index: Option<u32>) -> String {
    let mut s = format!(
        "{}\n{}\n{}\n{}",
        bundle.model_id,
        render_temperature(bundle.temperature),
        bundle.system_text,
        bundle.user_text
    );
    if let Some(i) = sample_index {
        s.push('\n');
        s.push_str(&i.to_string());
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    /// Raw reply text. May be empty; that is a classifiable reply, not an error.
    pub text: String,
    pub latency_ms: u64,
    pub backend: BackendKind,
}

pub trait CompletionBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

/// Counts calls that reach the wrapped backend.
pub struct CountingBackend {
    inner: Arc<dyn CompletionBackend>,
    calls: AtomicU64,
}

impl CountingBackend {
    pub fn new(inner: Arc<dyn CompletionBackend>) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionBackend for CountingBackend {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::bundle;
    use super::*;
    use crate::hashing::is_hex64;

    #[test]
    fn key_is_hash_of_canonical_form() {
        let r = CompletionRequest::new(bundle("Add two numbers."), RequestOrigin::default());
        assert!(is_hex64(&r.request_key));
        let expected = sha256_hex("gpt-3.5-turbo\n0.000000\nYou are a programmer.\n\nAdd two numbers.");
        assert_eq!(r.request_key, expected);
    }

    #[test]
    fn key_ignores_origin_except_sample() {
        let a = CompletionRequest::new(bundle("x"), RequestOrigin::default());
        let b = CompletionRequest::new(
            bundle("x"),
            RequestOrigin {
                directive_id: "other".into(),
                directive_version: 7,
                sample_index: None,
            },
        );
        assert_eq!(a.request_key, b.request_key);
        let s0 = CompletionRequest::new(bundle("x"), RequestOrigin { sample_index: Some(0), ..Default::default() });
        let s1 = CompletionRequest::new(bundle("x"), RequestOrigin { sample_index: Some(1), ..Default::default() });
        assert_ne!(s0.request_key, s1.request_key);
        assert_ne!(s0.request_key, a.request_key);
    }

    #[test]
    fn temperature_changes_key() {
        let mut b = bundle("x");
        let k0 = CompletionRequest::new(b.clone(), RequestOrigin::default()).request_key;
        b.temperature = 0.8;
        let k1 = CompletionRequest::new(b, RequestOrigin::default()).request_key;
        assert_ne!(k0, k1);
    }
}
