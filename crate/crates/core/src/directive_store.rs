//! Written-language directives: loading, validation and live text edits.
//!
//! The store is the single source of truth for directive text while the
//! process runs. Edits bump the version by exactly one, even when the text is
//! unchanged; versions are not persisted and restart at 1 on every load.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum DirectiveError {
    #[error("directives file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("directives file parse error at line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("duplicate directive id {0:?}")]
    DuplicateId(String),
    #[error("unknown directive {0:?}")]
    UnknownDirective(String),
    #[error("directive text is empty")]
    EmptyText,
    #[error("invalid directive {id:?}: {reason}")]
    Invalid { id: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    #[default]
    Deterministic,
    Diverse,
}

impl GenerationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GenerationMode::Deterministic => "deterministic",
            GenerationMode::Diverse => "diverse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    #[default]
    Cached,
    Ephemeral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportPolicy {
    #[default]
    Deny,
    Strip,
    Allow,
}

/// Application environment a directive's code runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HostKind {
    /// The text editor skeleton: a tkinter-shaped module set backed by an
    /// in-memory document and file table.
    Editor,
}

pub const DEFAULT_TIMEOUT_MS: u64 = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationPolicy {
    pub mode: GenerationMode,
    pub temperature: f64,
    pub cache: CacheMode,
    pub timeout_ms: u64,
    pub import_policy: ImportPolicy,
    pub allowlist: Vec<String>,
}

impl Default for GenerationPolicy {
    fn default() -> Self {
        Self {
            mode: GenerationMode::Deterministic,
            temperature: 0.0,
            cache: CacheMode::Cached,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            import_policy: ImportPolicy::Deny,
            allowlist: Vec::new(),
        }
    }
}

impl GenerationPolicy {
    /// Sampling temperature actually sent to the backend.
    pub fn effective_temperature(&self) -> f64 {
        match self.mode {
            GenerationMode::Deterministic => 0.0,
            GenerationMode::Diverse => self.temperature,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.mode == GenerationMode::Deterministic && self.temperature != 0.0 {
            return Err("deterministic mode requires temperature 0".into());
        }
        if self.timeout_ms == 0 {
            return Err("timeout_ms must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub id: String,
    pub entry_point: String,
    pub text: String,
    #[serde(default)]
    pub context_sources: Vec<String>,
    #[serde(default)]
    pub policy: GenerationPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<HostKind>,
    #[serde(default = "first_version")]
    pub version: u64,
}

fn first_version() -> u64 {
    1
}

impl Directive {
    pub fn new(id: impl Into<String>, entry_point: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            entry_point: entry_point.into(),
            text: text.into(),
            context_sources: Vec::new(),
            policy: GenerationPolicy::default(),
            host: None,
            version: 1,
        }
    }

    pub fn validate(&self) -> Result<(), DirectiveError> {
        let invalid = |reason: String| DirectiveError::Invalid {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(invalid("id is empty".into()));
        }
        if !is_identifier(&self.entry_point) {
            return Err(invalid(format!(
                "entry_point {:?} is not an identifier",
                self.entry_point
            )));
        }
        if self.text.trim().is_empty() {
            return Err(DirectiveError::EmptyText);
        }
        self.policy.validate().map_err(invalid)
    }
}

/// `[A-Za-z_][A-Za-z0-9_]*`
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_ascii_alphabetic())
        && chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

fn normalize_newlines(s: &str) -> String {
    s.replace("\r\n", "\n")
}

/// Directives as read from one file. Relative context sources resolve
/// against `base_dir`, the directory holding the file.
#[derive(Debug, Clone, Default)]
pub struct DirectiveSet {
    pub directives: Vec<Directive>,
    pub base_dir: PathBuf,
}

impl DirectiveSet {
    pub fn len(&self) -> usize {
        self.directives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct DirectivesFile {
    directives: Vec<FileEntry>,
}

#[derive(Serialize, Deserialize)]
struct FileEntry {
    id: String,
    entry_point: String,
    text: String,
    #[serde(default)]
    context_sources: Vec<String>,
    #[serde(default)]
    policy: GenerationPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    host: Option<HostKind>,
}

pub fn load_directives(path: &Path) -> Result<DirectiveSet, DirectiveError> {
    let raw = match fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(DirectiveError::FileNotFound(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let directives = parse_directives(&raw)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(DirectiveSet {
        directives,
        base_dir,
    })
}

pub fn parse_directives(raw: &str) -> Result<Vec<Directive>, DirectiveError> {
    let file: DirectivesFile =
        serde_json::from_str(raw).map_err(|e| DirectiveError::ParseError {
            line: e.line(),
            reason: e.to_string(),
        })?;
    let id_lines = id_key_lines(raw);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(file.directives.len());
    for (i, entry) in file.directives.into_iter().enumerate() {
        let directive = Directive {
            id: entry.id,
            entry_point: entry.entry_point,
            text: normalize_newlines(&entry.text),
            context_sources: entry.context_sources,
            policy: entry.policy,
            host: entry.host,
            version: 1,
        };
        let line = id_lines.get(i).copied().unwrap_or(0);
        directive.validate().map_err(|e| DirectiveError::ParseError {
            line,
            reason: e.to_string(),
        })?;
        if !seen.insert(directive.id.clone()) {
            return Err(DirectiveError::DuplicateId(directive.id));
        }
        out.push(directive);
    }
    Ok(out)
}

/// 1-based line numbers of every `"id":` key, in document order. Inside JSON
/// strings a quote is always escaped, so a bare `"id"` followed by a colon is
/// a key.
fn id_key_lines(raw: &str) -> Vec<usize> {
    let mut lines = Vec::new();
    let mut rest = raw;
    let mut offset = 0;
    while let Some(pos) = rest.find("\"id\"") {
        let after = &rest[pos + 4..];
        if after.trim_start().starts_with(':') {
            lines.push(raw[..offset + pos].matches('\n').count() + 1);
        }
        offset += pos + 4;
        rest = after;
    }
    lines
}

pub fn write_directives<'a>(
    directives: impl IntoIterator<Item = &'a Directive>,
    path: &Path,
) -> Result<(), DirectiveError> {
    let file = DirectivesFile {
        directives: directives
            .into_iter()
            .map(|d| FileEntry {
                id: d.id.clone(),
                entry_point: d.entry_point.clone(),
                text: d.text.clone(),
                context_sources: d.context_sources.clone(),
                policy: d.policy.clone(),
                host: d.host,
            })
            .collect(),
    };
    let mut body = serde_json::to_string_pretty(&file).map_err(io::Error::other)?;
    body.push('\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, body)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Live directive table. Reads are concurrent; updates are serialized and
/// swap a whole `Arc<Directive>`, so a reader never sees a torn directive.
#[derive(Debug, Default)]
pub struct DirectiveStore {
    directives: RwLock<BTreeMap<String, Arc<Directive>>>,
    base_dir: PathBuf,
    writer: Mutex<()>,
}

impl DirectiveStore {
    pub fn new(set: DirectiveSet) -> Self {
        let directives = set
            .directives
            .into_iter()
            .map(|d| (d.id.clone(), Arc::new(d)))
            .collect();
        Self {
            directives: RwLock::new(directives),
            base_dir: set.base_dir,
            writer: Mutex::new(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self, DirectiveError> {
        load_directives(path).map(Self::new)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn get(&self, id: &str) -> Result<Arc<Directive>, DirectiveError> {
        self.directives
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| DirectiveError::UnknownDirective(id.to_string()))
    }

    pub fn list(&self) -> Vec<Arc<Directive>> {
        self.directives.read().values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.directives.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.directives.read().is_empty()
    }

    /// Adds or replaces a directive. Two directives may share an entry
    /// point; whichever registers last owns the binding.
    pub fn insert(&self, directive: Directive) -> Result<(), DirectiveError> {
        directive.validate()?;
        let _w = self.writer.lock();
        let mut map = self.directives.write();
        if let Some(other) = map
            .values()
            .find(|d| d.id != directive.id && d.entry_point == directive.entry_point)
        {
            warn!(
                entry_point = %directive.entry_point,
                "directives {:?} and {:?} share an entry point; last registration wins",
                other.id,
                directive.id
            );
        }
        map.insert(directive.id.clone(), Arc::new(directive));
        Ok(())
    }

    /// Replaces the directive text. Every call is an edit event and bumps the
    /// version, identical text included.
    pub fn update_text(&self, id: &str, new_text: &str) -> Result<Arc<Directive>, DirectiveError> {
        if new_text.trim().is_empty() {
            return Err(DirectiveError::EmptyText);
        }
        let _w = self.writer.lock();
        let current = self.get(id)?;
        let mut next = (*current).clone();
        next.text = normalize_newlines(new_text);
        next.version = current.version + 1;
        let next = Arc::new(next);
        self.directives.write().insert(id.to_string(), next.clone());
        Ok(next)
    }

    pub fn save(&self, path: &Path) -> Result<(), DirectiveError> {
        let _w = self.writer.lock();
        let snapshot = self.list();
        write_directives(snapshot.iter().map(|d| d.as_ref()), path)
    }
}
