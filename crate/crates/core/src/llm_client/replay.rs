use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendKind, CompletionBackend, CompletionRequest, CompletionResponse};

/// One fixture line: `{"key":"<64-hex>","response":"<text>"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub key: String,
    pub response: String,
}

/// Serves recorded replies by request key. When a key was recorded more
/// than once, the last entry wins.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    fixtures: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path)?;
        let mut fixtures = HashMap::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(line)
                .map_err(|e| BackendError::Protocol(format!("{}:{}: {e}", path.display(), i + 1)))?;
            fixtures.insert(entry.key, entry.response);
        }
        Ok(Self { fixtures })
    }

    pub fn from_entries(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        Self {
            fixtures: entries.into_iter().map(|e| (e.key, e.response)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl CompletionBackend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let text = self
            .fixtures
            .get(&request.request_key)
            .ok_or_else(|| BackendError::MissingFixture(request.request_key.clone()))?;
        Ok(CompletionResponse {
            text: text.clone(),
            latency_ms: 0,
            backend: BackendKind::Replay,
        })
    }
}

/// Appends one fixture entry. The line goes out in a single write on an
/// append-mode handle.
pub fn record(request: &CompletionRequest, response: &CompletionResponse, fixture_path: &Path) -> io::Result<()> {
    let entry = FixtureEntry {
        key: request.request_key.clone(),
        response: response.text.clone(),
    };
    let mut line = serde_json::to_string(&entry).map_err(io::Error::other)?;
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(fixture_path)?;
    file.write_all(line.as_bytes())
}

/// Forwards to another backend and records every reply.
pub struct RecordingBackend {
    inner: Arc<dyn CompletionBackend>,
    path: PathBuf,
    writer: Mutex<()>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn CompletionBackend>, path: PathBuf) -> Self {
        Self {
            inner,
            path,
            writer: Mutex::new(()),
        }
    }
}

impl CompletionBackend for RecordingBackend {
    fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let started = Instant::now();
        let mut response = self.inner.complete(request)?;
        response.latency_ms = response.latency_ms.max(started.elapsed().as_millis() as u64);
        let _w = self.writer.lock();
        record(request, &response, &self.path)?;
        Ok(response)
    }
}
