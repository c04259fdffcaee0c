//! Compiles extracted source into code objects and binds the functions a
//! block defines into a [`FunctionRegistry`].
//!
//! Python separates compilation from execution, so `compile_block` only
//! produces a marshaled code object; nothing at the block's top level runs
//! until `register`, and then only inside a worker under the policy timeout.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::failure::{FailureCategory, FailureRecord, Stage};
use crate::hashing::sha256_hex;
use crate::sandbox::{HostState, WorkerFault, WorkerPool};
use crate::timestamp::{self, Timestamp};

const COMPILE_TIMEOUT: Duration = Duration::from_secs(10);

/// A compiled block. The code object itself stays opaque: it is the
/// base64 of a marshaled CPython code object, only meaningful to workers
/// running the same interpreter.
#[derive(Debug)]
pub struct CompiledUnit {
    pub source_hash: String,
    source: String,
    code: String,
    defined_names: OnceLock<Vec<String>>,
}

impl CompiledUnit {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub(crate) fn code(&self) -> &str {
        &self.code
    }

    /// Function names found when the unit was registered; empty before.
    pub fn defined_names(&self) -> &[String] {
        self.defined_names.get().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Who a binding came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Owner {
    pub directive_id: String,
    pub directive_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingMeta {
    pub directive_id: String,
    pub directive_version: u64,
    pub source_hash: String,
    #[serde(with = "timestamp")]
    pub registered_at: Timestamp,
}

#[derive(Debug)]
pub struct FunctionHandle {
    pub name: String,
    pub unit: Arc<CompiledUnit>,
    pub meta: BindingMeta,
}

/// Entry-point name to callable handle. Resolution is concurrent;
/// registration is serialized and replaces bindings under one write lock, so
/// a name is never observed unbound while it is being replaced.
#[derive(Debug, Default)]
pub struct FunctionRegistry {
    bindings: RwLock<HashMap<String, Arc<FunctionHandle>>>,
    writer: Mutex<()>,
}

impl FunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn resolve(&self, name: &str) -> Option<Arc<FunctionHandle>> {
        self.bindings.read().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.bindings.read().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn len(&self) -> usize {
        self.bindings.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.read().is_empty()
    }

    /// Binds `names` from `unit`. Returns the handles in the order given.
    pub fn bind(&self, unit: &Arc<CompiledUnit>, names: &[String], owner: &Owner) -> Vec<Arc<FunctionHandle>> {
        let _w = self.writer.lock();
        let registered_at = timestamp::now();
        let handles: Vec<Arc<FunctionHandle>> = names
            .iter()
            .map(|name| {
                Arc::new(FunctionHandle {
                    name: name.clone(),
                    unit: unit.clone(),
                    meta: BindingMeta {
                        directive_id: owner.directive_id.clone(),
                        directive_version: owner.directive_version,
                        source_hash: unit.source_hash.clone(),
                        registered_at,
                    },
                })
            })
            .collect();
        let mut map = self.bindings.write();
        for h in &handles {
            map.insert(h.name.clone(), h.clone());
        }
        handles
    }

    /// Drops every binding whose unit hashes to one of `source_hashes`.
    /// Handles already resolved stay usable by their holders.
    pub fn unbind_units(&self, source_hashes: &HashSet<&str>) -> usize {
        let _w = self.writer.lock();
        let mut map = self.bindings.write();
        let before = map.len();
        map.retain(|_, h| !source_hashes.contains(h.unit.source_hash.as_str()));
        before - map.len()
    }

    /// Units that still own at least one binding, oldest registration first,
    /// excluding `except`. Loaded ahead of a block so blocks can call
    /// functions other blocks registered.
    pub fn linked_units(&self, except: &str) -> Vec<Arc<CompiledUnit>> {
        let map = self.bindings.read();
        let mut seen: HashMap<&str, (&Timestamp, &Arc<CompiledUnit>)> = HashMap::new();
        for h in map.values() {
            if h.unit.source_hash == except {
                continue;
            }
            let entry = seen.entry(&h.unit.source_hash).or_insert((&h.meta.registered_at, &h.unit));
            if h.meta.registered_at < *entry.0 {
                entry.0 = &h.meta.registered_at;
            }
        }
        let mut units: Vec<_> = seen.into_values().collect();
        units.sort_by(|a, b| a.0.cmp(b.0).then_with(|| a.1.source_hash.cmp(&b.1.source_hash)));
        units.into_iter().map(|(_, u)| u.clone()).collect()
    }
}

/// Everything `register` needs to know about the environment the block's
/// top level runs in.
#[derive(Debug, Clone, Default)]
pub struct ExecEnv {
    pub host: Option<HostState>,
    pub timeout_ms: u64,
    /// When set, registration fails unless the block defines this name.
    pub expect_entry: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct CodeLoader {
    pool: WorkerPool,
}

impl CodeLoader {
    pub fn new(pool: WorkerPool) -> Self {
        Self { pool }
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    pub fn compile_block(&self, source: &str) -> Result<Arc<CompiledUnit>, FailureRecord> {
        let compile_error = |detail: String| FailureRecord::new(FailureCategory::CompileError, Stage::Compile, detail);
        if source.trim().is_empty() {
            return Err(compile_error("empty source".into()));
        }
        let request = json!({"op": "compile", "source": source, "filename": "<block>"});
        let (reply, _) = self
            .pool
            .request(&request, COMPILE_TIMEOUT)
            .map_err(|e| compile_error(e.to_string()))?;
        match (reply.status.as_str(), reply.code) {
            ("ok", Some(code)) => Ok(Arc::new(CompiledUnit {
                source_hash: sha256_hex(source),
                source: source.to_string(),
                code,
                defined_names: OnceLock::new(),
            })),
            _ => Err(compile_error(format!(
                "line {}: {}",
                reply.line.unwrap_or(0),
                reply.message.unwrap_or_default()
            ))),
        }
    }

    /// Runs the unit's top level in a worker, then binds every top-level
    /// function it defined. Nothing is bound unless the whole unit ran.
    pub fn register(
        &self,
        unit: &Arc<CompiledUnit>,
        registry: &FunctionRegistry,
        owner: &Owner,
        env: &ExecEnv,
    ) -> Result<Vec<String>, FailureRecord> {
        let names = self.discover(unit, env)?;
        registry.bind(unit, &names, owner);
        Ok(names)
    }

    /// Executes the unit's top level and returns the names of the functions
    /// it defines, without touching any registry.
    pub fn discover(&self, unit: &Arc<CompiledUnit>, env: &ExecEnv) -> Result<Vec<String>, FailureRecord> {
        let fail = |category, detail: String| FailureRecord::new(category, Stage::Register, detail);
        let request = json!({
            "op": "execute",
            "units": [{"scope": "block", "code": unit.code()}],
            "host": env.host,
            "report": ["block"],
        });
        let timeout = Duration::from_millis(env.timeout_ms.max(1));
        let (mut reply, _) = self.pool.request(&request, timeout).map_err(|e| match e {
            WorkerFault::Timeout { .. } => fail(
                FailureCategory::Timeout,
                format!("top level exceeded {} ms", env.timeout_ms),
            ),
            other => fail(FailureCategory::RuntimeError, other.to_string()),
        })?;
        if reply.status != "ok" {
            return Err(fail(
                FailureCategory::RuntimeError,
                reply.message.unwrap_or(reply.status),
            ));
        }
        let names = reply.defined.remove("block").unwrap_or_default();
        if names.is_empty() {
            return Err(fail(FailureCategory::MissingEntryPoint, "no functions defined".into()));
        }
        if let Some(entry) = &env.expect_entry {
            if !names.contains(entry) {
                return Err(fail(
                    FailureCategory::MissingEntryPoint,
                    format!("entry point {entry} not defined (found: {})", names.join(", ")),
                ));
            }
        }
        let _ = unit.defined_names.set(names.clone());
        Ok(names)
    }

    pub fn resolve(&self, registry: &FunctionRegistry, entry_point: &str) -> Result<Arc<FunctionHandle>, FailureRecord> {
        resolve(registry, entry_point)
    }
}

pub fn resolve(registry: &FunctionRegistry, entry_point: &str) -> Result<Arc<FunctionHandle>, FailureRecord> {
    registry.resolve(entry_point).ok_or_else(|| {
        FailureRecord::new(
            FailureCategory::MissingEntryPoint,
            Stage::Invoke,
            format!("Function not found or not callable: {entry_point}"),
        )
    })
}

/// Top-level `def` names by line scan, in order. A test oracle for the
/// worker's reflection, kept independent of it.
pub fn scan_top_level_defs(source: &str) -> Vec<String> {
    let mut names = Vec::new();
    for line in source.lines() {
        let rest = line.strip_prefix("async def ").or_else(|| line.strip_prefix("def "));
        if let Some(rest) = rest {
            let name: String = rest
                .trim_start()
                .chars()
                .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
                .collect();
            if !name.is_empty() && !names.contains(&name) {
                names.push(name);
            }
        }
    }
    names
}
