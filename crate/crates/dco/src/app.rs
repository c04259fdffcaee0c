use std::fmt;
use std::sync::Arc;

use anyhow::{Context, Result};
use dco_core::directive_store::DirectiveStore;
use dco_core::eval::EvalConfig;
use dco_core::llm_client::{
    CompletionBackend, HttpBackend, HttpConfig, MockBackend, RecordingBackend, ReplayBackend,
};
use dco_core::orchestrator::{BlockStore, Orchestrator, OrchestratorConfig};
use dco_core::prompt_builder::PromptConfig;
use dco_core::sandbox::{ImportGuard, StdModules, WorkerConfig, WorkerPool};

use crate::cli::{BackendChoice, GlobalOpts};

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// The command ran but the thing it ran failed; exits with status 1.
#[derive(Debug)]
pub struct DomainFailure(pub String);

impl fmt::Display for DomainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DomainFailure {}

pub fn backend(opts: &GlobalOpts) -> Result<Arc<dyn CompletionBackend>> {
    let base: Arc<dyn CompletionBackend> = match opts.backend {
        BackendChoice::Http => {
            let config = HttpConfig::from_env().map_err(|e| UsageError(e.to_string()))?;
            Arc::new(HttpBackend::new(config))
        }
        BackendChoice::Replay => {
            let path = opts
                .fixtures
                .as_ref()
                .ok_or_else(|| UsageError("--backend replay requires --fixtures".into()))?;
            Arc::new(ReplayBackend::load(path).with_context(|| format!("loading fixtures {}", path.display()))?)
        }
        BackendChoice::Mock => Arc::new(
            MockBackend::load(&opts.mock_script)
                .with_context(|| format!("loading mock script {}", opts.mock_script.display()))?,
        ),
    };
    Ok(match &opts.record {
        Some(path) => Arc::new(RecordingBackend::new(base, path.clone())),
        None => base,
    })
}

pub fn pool(opts: &GlobalOpts) -> Result<WorkerPool> {
    if opts.max_workers == 0 {
        return Err(UsageError("--max-workers must be at least 1".into()).into());
    }
    Ok(WorkerPool::new(WorkerConfig {
        python: opts.python.clone(),
        max_workers: opts.max_workers,
        ..WorkerConfig::default()
    }))
}

pub fn guard(opts: &GlobalOpts) -> Result<ImportGuard> {
    let std = match &opts.std_modules {
        Some(path) => StdModules::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => StdModules::default(),
    };
    Ok(ImportGuard::new(std))
}

pub fn directives(opts: &GlobalOpts) -> Result<Arc<DirectiveStore>> {
    let store = DirectiveStore::load(&opts.directives)
        .with_context(|| format!("loading directives {}", opts.directives.display()))?;
    Ok(Arc::new(store))
}

pub fn blocks(opts: &GlobalOpts) -> Result<BlockStore> {
    BlockStore::open(&opts.blocks_path).with_context(|| format!("opening block store {}", opts.blocks_path.display()))
}

pub fn orchestrator(opts: &GlobalOpts, store: Arc<DirectiveStore>) -> Result<Orchestrator> {
    let blocks = blocks(opts)?;
    let config = OrchestratorConfig {
        prompt: PromptConfig {
            model_id: opts.model.clone(),
            ..PromptConfig::default()
        },
        keep_raw_response: !opts.drop_raw_responses,
    };
    Ok(Orchestrator::new(
        store,
        backend(opts)?,
        pool(opts)?,
        guard(opts)?,
        blocks,
        config,
    ))
}

pub fn eval_config(opts: &GlobalOpts) -> Result<EvalConfig> {
    if opts.parallelism == 0 {
        return Err(UsageError("--parallelism must be at least 1".into()).into());
    }
    let mut config = EvalConfig {
        default_timeout_ms: opts.timeout_ms,
        parallelism: opts.parallelism,
        ..EvalConfig::default()
    };
    config.prompt.model_id = opts.model.clone();
    Ok(config)
}
