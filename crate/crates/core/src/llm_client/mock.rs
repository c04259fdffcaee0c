use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendKind, CompletionBackend, CompletionRequest, CompletionResponse};

/// A scripted reply. `version`, `sample` and `prompt_contains` narrow the
/// match; among the entries that match, the most specific wins, and among
/// equals the later.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    pub directive: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<u32>,
    /// Substring the user prompt must contain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    /// Replies served in rotation, one per call.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    #[serde(default)]
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| BackendError::Protocol(format!("{}: {e}", path.display())))
    }
}

pub struct MockBackend {
    script: MockScript,
    calls: Vec<AtomicUsize>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let calls = script.entries.iter().map(|_| AtomicUsize::new(0)).collect();
        Self { script, calls }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        MockScript::load(path).map(Self::new)
    }

    fn pick(&self, request: &CompletionRequest) -> Option<usize> {
        let o = &request.origin;
        let mut best: Option<(usize, u8)> = None;
        for (i, e) in self.script.entries.iter().enumerate() {
            if e.directive != o.directive_id {
                continue;
            }
            if e.version.is_some_and(|v| v != o.directive_version) {
                continue;
            }
            if e.sample.is_some() && e.sample != o.sample_index {
                continue;
            }
            if e
                .prompt_contains
                .as_ref()
                .is_some_and(|needle| !request.bundle.user_text.contains(needle.as_str()))
            {
                continue;
            }
            let rank = u8::from(e.version.is_some()) + u8::from(e.sample.is_some()) + u8::from(e.prompt_contains.is_some());
            if best.is_none_or(|(_, r)| rank >= r) {
                best = Some((i, rank));
            }
        }
        best.map(|(i, _)| i)
    }
}

impl CompletionBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let text = match self.pick(request) {
            Some(i) => {
                let e = &self.script.entries[i];
                if e.responses.is_empty() {
                    e.response.clone().unwrap_or_default()
                } else {
                    let n = self.calls[i].fetch_add(1, Ordering::SeqCst);
                    e.responses[n % e.responses.len()].clone()
                }
            }
            None => self
                .script
                .default
                .clone()
                .ok_or_else(|| BackendError::MissingScript(request.origin.directive_id.clone()))?,
        };
        Ok(CompletionResponse {
            text,
            latency_ms: 0,
            backend: BackendKind::Mock,
        })
    }
}
