use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::Duration as ChronoDuration;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::GeneratedBlock;
use crate::timestamp::{self, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurgeScope {
    All,
    FailedOnly,
    /// Records created at least this many milliseconds ago.
    #[serde(rename = "older_than_ms")]
    OlderThan(u64),
}

impl PurgeScope {
    fn matches(self, block: &GeneratedBlock, now: Timestamp) -> bool {
        match self {
            PurgeScope::All => true,
            PurgeScope::FailedOnly => !block.is_ready(),
            PurgeScope::OlderThan(ms) => {
                let ms = i64::try_from(ms).unwrap_or(i64::MAX);
                match now.checked_sub_signed(ChronoDuration::milliseconds(ms)) {
                    Some(cutoff) => block.created_at <= cutoff,
                    None => false,
                }
            }
        }
    }
}

/// Block records, mirrored to a JSONL file when a path is configured.
#[derive(Debug)]
pub struct BlockStore {
    path: Option<PathBuf>,
    records: Mutex<Vec<GeneratedBlock>>,
}

impl BlockStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            records: Mutex::new(Vec::new()),
        }
    }

    /// Opens (or starts) the file at `path`. Lines that fail to parse are
    /// skipped with a warning.
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut records = Vec::new();
        match fs::read_to_string(path) {
            Ok(raw) => {
                for (i, line) in raw.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    match serde_json::from_str::<GeneratedBlock>(line) {
                        Ok(b) => records.push(b),
                        Err(e) => warn!(path = %path.display(), line = i + 1, error = %e, "skipping block record"),
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            records: Mutex::new(records),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, block: &GeneratedBlock) -> io::Result<()> {
        let mut records = self.records.lock();
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(block).map_err(io::Error::other)?;
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?
                .write_all(line.as_bytes())?;
        }
        records.push(block.clone());
        Ok(())
    }

    pub fn list(&self, directive: Option<&str>) -> Vec<GeneratedBlock> {
        self.records
            .lock()
            .iter()
            .filter(|b| directive.is_none_or(|d| b.directive_id == d))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.lock().is_empty()
    }

    /// Removes matching records and rewrites the file. Returns the removed
    /// records.
    pub fn purge(&self, scope: PurgeScope) -> io::Result<Vec<GeneratedBlock>> {
        let now = timestamp::now();
        let mut records = self.records.lock();
        let (purged, kept): (Vec<_>, Vec<_>) = records.drain(..).partition(|b| scope.matches(b, now));
        if let Some(path) = &self.path {
            if let Err(e) = rewrite(path, &kept) {
                records.extend(kept);
                records.extend(purged);
                return Err(e);
            }
        }
        *records = kept;
        Ok(purged)
    }
}

fn rewrite(path: &Path, records: &[GeneratedBlock]) -> io::Result<()> {
    let mut out = String::new();
    for b in records {
        out.push_str(&serde_json::to_string(b).map_err(io::Error::other)?);
        out.push('\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, out)?;
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::failure::FailureRecord;

    fn block(id: &str, ready: bool, age_ms: i64) -> GeneratedBlock {
        let source = if ready { "def f():\n    return 1\n" } else { "" };
        GeneratedBlock {
            directive_id: id.into(),
            directive_version: 1,
            cache_key: "0".repeat(64),
            raw_response: String::new(),
            source: source.into(),
            source_hash: ready.then(|| "a".repeat(64)),
            status: if ready { super::super::BlockStatus::Ready } else { super::super::BlockStatus::Failed },
            failure: (!ready).then(|| FailureRecord::extraction("empty reply")),
            created_at: timestamp::now() - ChronoDuration::milliseconds(age_ms),
        }
    }

    #[test]
    fn purge_scopes() {
        let store = BlockStore::in_memory();
        store.append(&block("a", true, 0)).unwrap();
        store.append(&block("b", true, 0)).unwrap();
        store.append(&block("c", false, 0)).unwrap();
        assert_eq!(store.purge(PurgeScope::FailedOnly).unwrap().len(), 1);
        assert_eq!(store.len(), 2);
        assert_eq!(store.purge(PurgeScope::OlderThan(0)).unwrap().len(), 2);
        assert!(store.is_empty());
    }

    #[test]
    fn older_than_keeps_recent() {
        let store = BlockStore::in_memory();
        store.append(&block("old", true, 60_000)).unwrap();
        store.append(&block("new", true, 0)).unwrap();
        let purged = store.purge(PurgeScope::OlderThan(30_000)).unwrap();
        assert_eq!(purged.len(), 1);
        assert_eq!(purged[0].directive_id, "old");
        assert_eq!(store.purge(PurgeScope::OlderThan(u64::MAX)).unwrap().len(), 0);
    }

    #[test]
    fn file_round_trip_and_purge_rewrites() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blocks.jsonl");
        {
            let store = BlockStore::open(&path).unwrap();
            for id in ["a", "b", "c"] {
                store.append(&block(id, true, 0)).unwrap();
            }
        }
        let store = BlockStore::open(&path).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.list(Some("b")).len(), 1);
        assert_eq!(store.purge(PurgeScope::All).unwrap().len(), 3);
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert!(BlockStore::open(&path).unwrap().is_empty());
    }

    #[test]
    fn scope_wire_format() {
        assert_eq!(serde_json::to_string(&PurgeScope::All).unwrap(), r#""all""#);
        assert_eq!(serde_json::to_string(&PurgeScope::FailedOnly).unwrap(), r#""failed_only""#);
        let s: PurgeScope = serde_json::from_str(r#"{"older_than_ms":5}"#).unwrap();
        assert_eq!(s, PurgeScope::OlderThan(5));
    }
}
