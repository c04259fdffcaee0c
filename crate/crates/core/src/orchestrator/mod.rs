//! The controller: resolves a directive, produces or reuses a generated
//! block, and invokes its entry point under the sandbox.

mod block_store;
mod pipeline;

use std::collections::{HashMap, HashSet};
use std::io;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, info, warn};

pub use block_store::{BlockStore, PurgeScope};
pub use pipeline::{cache_key, default_host, Generated, GenerationInput, Pipeline};

use crate::code_loader::{self, CodeLoader, CompiledUnit, ExecEnv, FunctionRegistry, Owner};
use crate::directive_store::{CacheMode, Directive, DirectiveError, DirectiveStore};
use crate::failure::{FailureCategory, FailureRecord, Stage};
use crate::llm_client::CompletionBackend;
use crate::prompt_builder::PromptConfig;
use crate::sandbox::{HostState, ImportGuard, Invocation, InvocationOutcome, OutcomeStatus, Sandbox, WorkerPool};
use crate::timestamp::{self, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStatus {
    Ready,
    Failed,
}

/// The record of one generation attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedBlock {
    pub directive_id: String,
    pub directive_version: u64,
    pub cache_key: String,
    pub raw_response: String,
    pub source: String,
    /// Present once extraction succeeded.
    pub source_hash: Option<String>,
    pub status: BlockStatus,
    pub failure: Option<FailureRecord>,
    #[serde(with = "timestamp")]
    pub created_at: Timestamp,
}

impl GeneratedBlock {
    pub fn is_ready(&self) -> bool {
        self.status == BlockStatus::Ready
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationResult {
    /// Absent when nothing was invoked.
    pub outcome: Option<InvocationOutcome>,
    pub block: GeneratedBlock,
    /// The first failure, whether from generation or from the call.
    pub failure: Option<FailureRecord>,
}

impl InvocationResult {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none() && self.outcome.as_ref().is_some_and(InvocationOutcome::is_ok)
    }
}

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub prompt: PromptConfig,
    /// Drop raw replies from stored blocks to save space.
    pub keep_raw_response: bool,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            prompt: PromptConfig::default(),
            keep_raw_response: true,
        }
    }
}

struct CachedBlock {
    block: GeneratedBlock,
    unit: Arc<CompiledUnit>,
}

pub struct Orchestrator {
    directives: Arc<DirectiveStore>,
    pipeline: Pipeline,
    sandbox: Sandbox,
    registry: FunctionRegistry,
    blocks: BlockStore,
    config: OrchestratorConfig,
    cache: Mutex<HashMap<String, Arc<CachedBlock>>>,
    flights: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Orchestrator {
    pub fn new(
        directives: Arc<DirectiveStore>,
        backend: Arc<dyn CompletionBackend>,
        pool: WorkerPool,
        guard: ImportGuard,
        blocks: BlockStore,
        config: OrchestratorConfig,
    ) -> Self {
        Self {
            directives,
            pipeline: Pipeline {
                backend,
                loader: CodeLoader::new(pool.clone()),
                guard,
            },
            sandbox: Sandbox::new(pool),
            registry: FunctionRegistry::new(),
            blocks,
            config,
            cache: Mutex::new(HashMap::new()),
            flights: Mutex::new(HashMap::new()),
        }
    }

    pub fn directives(&self) -> &Arc<DirectiveStore> {
        &self.directives
    }

    pub fn registry(&self) -> &FunctionRegistry {
        &self.registry
    }

    pub fn blocks(&self) -> &BlockStore {
        &self.blocks
    }

    pub fn pool(&self) -> &WorkerPool {
        self.sandbox.pool()
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    /// Runs the full pipeline once, records the block, and caches it when
    /// ready. Failures are carried in the block.
    pub fn generate_block(&self, directive: &Directive) -> GeneratedBlock {
        self.generate(directive).0
    }

    pub fn regenerate(&self, id: &str) -> Result<GeneratedBlock, DirectiveError> {
        let d = self.directives.get(id)?;
        Ok(self.generate_block(&d))
    }

    fn generate(&self, directive: &Directive) -> (GeneratedBlock, Option<Arc<CompiledUnit>>) {
        let input = GenerationInput {
            directive,
            base_dir: self.directives.base_dir(),
            prompt: &self.config.prompt,
            sample_index: None,
            keep_raw_response: self.config.keep_raw_response,
        };
        let Generated { block, unit } = self.pipeline.generate(&input, &self.registry);
        if let Err(e) = self.blocks.append(&block) {
            warn!(error = %e, "failed to persist block record");
        }
        if let Some(unit) = &unit {
            info!(directive = %directive.id, version = directive.version, hash = ?block.source_hash, "block ready");
            if directive.policy.cache == CacheMode::Cached {
                self.cache.lock().insert(
                    block.cache_key.clone(),
                    Arc::new(CachedBlock {
                        block: block.clone(),
                        unit: unit.clone(),
                    }),
                );
            }
        }
        (block, unit)
    }

    fn cached(&self, key: &str) -> Option<Arc<CachedBlock>> {
        self.cache.lock().get(key).cloned()
    }

    /// A ready block for the directive: the cached one when policy allows,
    /// otherwise a fresh generation. Concurrent callers for the same key
    /// share one generation.
    fn obtain(&self, directive: &Directive) -> (GeneratedBlock, Option<Arc<CompiledUnit>>) {
        if directive.policy.cache == CacheMode::Ephemeral {
            return self.generate(directive);
        }
        let key = cache_key(directive, &self.config.prompt);
        if let Some(hit) = self.cached(&key) {
            return self.rebind(directive, &hit);
        }
        let flight = self.flights.lock().entry(key.clone()).or_default().clone();
        let _guard = flight.lock();
        if let Some(hit) = self.cached(&key) {
            return self.rebind(directive, &hit);
        }
        self.generate(directive)
    }

    /// Puts a cached unit back in the registry if something else has taken
    /// over its entry point since.
    fn rebind(&self, directive: &Directive, hit: &CachedBlock) -> (GeneratedBlock, Option<Arc<CompiledUnit>>) {
        let current = self.registry.resolve(&directive.entry_point);
        if current.is_none_or(|h| h.unit.source_hash != hit.unit.source_hash) {
            let owner = Owner {
                directive_id: hit.block.directive_id.clone(),
                directive_version: hit.block.directive_version,
            };
            self.registry.bind(&hit.unit, hit.unit.defined_names(), &owner);
        }
        (hit.block.clone(), Some(hit.unit.clone()))
    }

    pub fn invoke_action(&self, id: &str, args: &[Value]) -> Result<InvocationResult, DirectiveError> {
        self.invoke_action_with_host(id, args, None)
    }

    /// Invokes the directive's entry point. `host` overrides the starting
    /// host state for directives that run against one.
    pub fn invoke_action_with_host(
        &self,
        id: &str,
        args: &[Value],
        host: Option<HostState>,
    ) -> Result<InvocationResult, DirectiveError> {
        let directive = self.directives.get(id)?;
        let (block, unit) = self.obtain(&directive);
        if unit.is_none() {
            let failure = block.failure.clone();
            return Ok(InvocationResult {
                outcome: None,
                block,
                failure,
            });
        }
        let handle = match code_loader::resolve(&self.registry, &directive.entry_point) {
            Ok(h) => h,
            Err(failure) => {
                return Ok(InvocationResult {
                    outcome: None,
                    block,
                    failure: Some(failure),
                })
            }
        };
        let mut units: Vec<(String, Arc<CompiledUnit>)> = self
            .registry
            .linked_units(&handle.unit.source_hash)
            .into_iter()
            .map(|u| ("block".to_string(), u))
            .collect();
        units.push(("block".to_string(), handle.unit.clone()));
        let host = match directive.host {
            Some(_) => host.or_else(|| default_host(&directive)),
            None => None,
        };
        let invocation = Invocation {
            units,
            scope: "block".to_string(),
            function: handle.name.clone(),
            args: args.iter().cloned().map(crate::sandbox::CallArg::Value).collect(),
            host,
        };
        let outcome = self.sandbox.invoke(&invocation, directive.policy.timeout_ms);
        let failure = match outcome.status {
            OutcomeStatus::Ok => None,
            OutcomeStatus::Timeout => Some(FailureRecord::new(
                FailureCategory::Timeout,
                Stage::Invoke,
                outcome.error_message.clone().unwrap_or_default(),
            )),
            OutcomeStatus::RuntimeError => Some(FailureRecord::new(
                FailureCategory::RuntimeError,
                Stage::Invoke,
                outcome.error_message.clone().unwrap_or_default(),
            )),
        };
        Ok(InvocationResult {
            outcome: Some(outcome),
            block,
            failure,
        })
    }

    /// Deletes stored block records and forgets cached blocks among them.
    /// Functions already bound in the registry stay bound.
    pub fn purge_blocks(&self, scope: PurgeScope) -> io::Result<usize> {
        let purged = self.blocks.purge(scope)?;
        {
            let mut cache = self.cache.lock();
            cache.retain(|_, c| {
                !purged
                    .iter()
                    .any(|b| b.cache_key == c.block.cache_key && b.created_at == c.block.created_at)
            });
        }
        let surviving: HashSet<String> = self.blocks.list(None).into_iter().filter_map(|b| b.source_hash).collect();
        let gone: HashSet<&str> = purged
            .iter()
            .filter_map(|b| b.source_hash.as_deref())
            .filter(|h| !surviving.contains(*h))
            .collect();
        let unbound = self.registry.unbind_units(&gone);
        debug!(purged = purged.len(), unbound, "purged blocks");
        Ok(purged.len())
    }

    /// Recompiles and re-registers every ready block in the store, oldest
    /// first, so a restarted service resolves what it resolved before.
    /// Blocks whose directive still hashes to the same key are cached again.
    /// Returns the number restored.
    pub fn restore(&self) -> usize {
        let mut ready: Vec<GeneratedBlock> = self.blocks.list(None).into_iter().filter(|b| b.is_ready()).collect();
        ready.sort_by_key(|b| b.created_at);
        let mut restored = 0;
        for block in ready {
            let Ok(directive) = self.directives.get(&block.directive_id) else {
                continue;
            };
            let env = ExecEnv {
                host: default_host(&directive),
                timeout_ms: directive.policy.timeout_ms,
                expect_entry: Some(directive.entry_point.clone()),
            };
            let owner = Owner {
                directive_id: block.directive_id.clone(),
                directive_version: block.directive_version,
            };
            let loader = &self.pipeline.loader;
            let unit = match loader
                .compile_block(&block.source)
                .and_then(|u| loader.register(&u, &self.registry, &owner, &env).map(|_| u))
            {
                Ok(u) => u,
                Err(failure) => {
                    warn!(directive = %block.directive_id, %failure, "stored block no longer registers");
                    continue;
                }
            };
            restored += 1;
            if directive.policy.cache == CacheMode::Cached && block.cache_key == cache_key(&directive, &self.config.prompt)
            {
                self.cache
                    .lock()
                    .insert(block.cache_key.clone(), Arc::new(CachedBlock { block, unit }));
            }
        }
        restored
    }
}
