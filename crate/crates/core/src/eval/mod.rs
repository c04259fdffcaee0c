//! Corpus evaluation: k generations per task, each checked by the task's
//! own `check(candidate)` function, with every sample accounted for as a
//! pass or a failure category.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;
use tracing::debug;

use crate::code_loader::{CodeLoader, CompiledUnit, FunctionRegistry};
use crate::directive_store::{
    is_identifier, CacheMode, Directive, GenerationMode, GenerationPolicy, ImportPolicy, DEFAULT_TIMEOUT_MS,
};
use crate::failure::{FailureCategory, FailureRecord, Stage};
use crate::llm_client::CompletionBackend;
use crate::orchestrator::{GenerationInput, Pipeline};
use crate::prompt_builder::PromptConfig;
use crate::sandbox::{CallArg, ImportGuard, Invocation, OutcomeStatus, Sandbox, WorkerPool};

pub const DEFAULT_EVAL_TEMPERATURE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTask {
    pub task_id: String,
    pub prompt: String,
    pub entry_point: String,
    pub tests: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    /// Reference solution, used only to validate the corpus itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical_solution: Option<String>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus not found: {}", .path.display())]
    FileNotFound {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn load_corpus(path: &Path) -> Result<Vec<EvalTask>, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|source| match source.kind() {
        io::ErrorKind::NotFound => CorpusError::FileNotFound {
            path: path.to_path_buf(),
            source,
        },
        _ => CorpusError::Io(source),
    })?;
    parse_corpus(&raw)
}

pub fn parse_corpus(raw: &str) -> Result<Vec<EvalTask>, CorpusError> {
    let mut tasks = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| CorpusError::ParseError { line: i + 1, reason };
        let task: EvalTask = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if !is_identifier(&task.entry_point) {
            return Err(err(format!("entry_point {:?} is not an identifier", task.entry_point)));
        }
        let checks = task.tests.lines().filter(|l| l.starts_with("def check(")).count();
        if checks != 1 {
            return Err(err(format!("tests define {checks} check functions, expected 1")));
        }
        if task.timeout_ms == Some(0) {
            return Err(err("timeout_ms must be positive".into()));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// A sample's outcome: pass, or the category of its first failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Pass,
    Fail(FailureCategory),
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail(c) => c.as_str(),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "pass" {
            return Ok(Verdict::Pass);
        }
        FailureCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .map(Verdict::Fail)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown verdict {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleResult {
    pub task_id: String,
    pub sample_index: u32,
    pub verdict: Verdict,
    /// Wall time for the sample. Not written to report files.
    #[serde(default)]
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: usize,
    pub samples: usize,
    pub pass_count: usize,
    /// Passes over all samples.
    pub pass_rate: f64,
    /// Passes over samples whose reply yielded code.
    pub pass_rate_extractable: f64,
    /// Non-zero counts only.
    pub category_counts: BTreeMap<FailureCategory, usize>,
    pub per_sample: Vec<SampleResult>,
}

impl EvalReport {
    pub fn from_samples(tasks: usize, mut per_sample: Vec<SampleResult>) -> Self {
        per_sample.sort_by(|a, b| (&a.task_id, a.sample_index).cmp(&(&b.task_id, b.sample_index)));
        let samples = per_sample.len();
        let mut category_counts = BTreeMap::new();
        let mut pass_count = 0;
        for s in &per_sample {
            match s.verdict {
                Verdict::Pass => pass_count += 1,
                Verdict::Fail(c) => *category_counts.entry(c).or_insert(0) += 1,
            }
        }
        let extractable = samples - category_counts.get(&FailureCategory::ExtractionFailure).copied().unwrap_or(0);
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self {
            tasks,
            samples,
            pass_count,
            pass_rate: ratio(pass_count, samples),
            pass_rate_extractable: ratio(pass_count, extractable),
            category_counts,
            per_sample,
        }
    }

    pub fn failed_count(&self) -> usize {
        self.category_counts.values().sum()
    }
}

/// Writes the report as pretty JSON. Per-sample timings are left out so
/// identical runs produce identical files.
pub fn write_report(report: &EvalReport, path: &Path) -> io::Result<()> {
    let mut v = serde_json::to_value(report).map_err(io::Error::other)?;
    if let Some(Value::Array(samples)) = v.get_mut("per_sample") {
        for s in samples {
            if let Value::Object(m) = s {
                m.remove("elapsed_ms");
            }
        }
    }
    let mut text = serde_json::to_string_pretty(&v).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

pub fn read_report(path: &Path) -> io::Result<EvalReport> {
    let raw = fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub prompt: PromptConfig,
    pub temperature: f64,
    pub default_timeout_ms: u64,
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompt: PromptConfig::for_eval(),
            temperature: DEFAULT_EVAL_TEMPERATURE,
            default_timeout_ms: DEFAULT_TIMEOUT_MS,
            parallelism: 1,
        }
    }
}

pub struct Evaluator {
    pipeline: Pipeline,
    sandbox: Sandbox,
    config: EvalConfig,
}

impl Evaluator {
    pub fn new(backend: Arc<dyn CompletionBackend>, pool: WorkerPool, guard: ImportGuard, config: EvalConfig) -> Self {
        Self {
            pipeline: Pipeline {
                backend,
                loader: CodeLoader::new(pool.clone()),
                guard,
            },
            sandbox: Sandbox::new(pool),
            config,
        }
    }

    /// The directive a task is generated from: diverse sampling, never
    /// cached, imports restricted to the standard library.
    pub fn directive_for(&self, task: &EvalTask) -> Directive {
        Directive {
            id: task.task_id.clone(),
            entry_point: task.entry_point.clone(),
            text: task.prompt.clone(),
            context_sources: Vec::new(),
            policy: GenerationPolicy {
                mode: GenerationMode::Diverse,
                temperature: self.config.temperature,
                cache: CacheMode::Ephemeral,
                timeout_ms: self.timeout_for(task),
                import_policy: ImportPolicy::Deny,
                allowlist: Vec::new(),
            },
            host: None,
            version: 1,
        }
    }

    fn timeout_for(&self, task: &EvalTask) -> u64 {
        task.timeout_ms.unwrap_or(self.config.default_timeout_ms)
    }

    fn compile_tests(&self, task: &EvalTask) -> Result<Arc<CompiledUnit>, FailureRecord> {
        self.pipeline.loader.compile_block(&task.tests).map_err(|f| {
            FailureRecord::new(FailureCategory::RuntimeError, Stage::Test, format!("tests: {}", f.detail))
        })
    }

    pub fn run_task(&self, task: &EvalTask, k: u32) -> Vec<SampleResult> {
        let tests = self.compile_tests(task);
        (0..k).map(|i| self.run_sample(task, i, &tests)).collect()
    }

    fn run_sample(
        &self,
        task: &EvalTask,
        sample_index: u32,
        tests: &Result<Arc<CompiledUnit>, FailureRecord>,
    ) -> SampleResult {
        let started = Instant::now();
        let directive = self.directive_for(task);
        let registry = FunctionRegistry::new();
        let input = GenerationInput {
            directive: &directive,
            base_dir: Path::new("."),
            prompt: &self.config.prompt,
            sample_index: Some(sample_index),
            keep_raw_response: false,
        };
        let generated = self.pipeline.generate(&input, &registry);
        let source_hash = generated.block.source_hash.clone();
        let verdict = match (generated.unit, &generated.block.failure) {
            (Some(unit), _) => self.check(task, unit, tests),
            (None, Some(f)) => Verdict::Fail(f.category),
            (None, None) => Verdict::Fail(FailureCategory::RuntimeError),
        };
        debug!(task = %task.task_id, sample_index, %verdict, "sample done");
        SampleResult {
            task_id: task.task_id.clone(),
            sample_index,
            verdict,
            elapsed_ms: started.elapsed().as_millis() as u64,
            source_hash,
        }
    }

    /// Runs `check(candidate)` with the candidate and the tests in separate
    /// namespaces.
    fn check(
        &self,
        task: &EvalTask,
        candidate: Arc<CompiledUnit>,
        tests: &Result<Arc<CompiledUnit>, FailureRecord>,
    ) -> Verdict {
        let tests = match tests {
            Ok(t) => t.clone(),
            Err(f) => return Verdict::Fail(f.category),
        };
        let invocation = Invocation {
            units: vec![("candidate".into(), candidate), ("tests".into(), tests)],
            scope: "tests".into(),
            function: "check".into(),
            args: vec![CallArg::Function {
                scope: "candidate".into(),
                name: task.entry_point.clone(),
            }],
            host: None,
        };
        let outcome = self.sandbox.invoke(&invocation, self.timeout_for(task));
        match outcome.status {
            OutcomeStatus::Ok => Verdict::Pass,
            OutcomeStatus::Timeout => Verdict::Fail(FailureCategory::Timeout),
            OutcomeStatus::RuntimeError if outcome.exception.as_deref() == Some("AssertionError") => {
                Verdict::Fail(FailureCategory::TestFailure)
            }
            OutcomeStatus::RuntimeError => Verdict::Fail(FailureCategory::RuntimeError),
        }
    }

    /// Runs every sample of every task on up to `parallelism` threads.
    /// The report does not depend on scheduling order.
    pub fn run_corpus(&self, tasks: &[EvalTask], k: u32) -> EvalReport {
        let jobs: Vec<(usize, u32)> = (0..tasks.len()).flat_map(|t| (0..k).map(move |i| (t, i))).collect();
        let compiled: Vec<OnceLock<Result<Arc<CompiledUnit>, FailureRecord>>> =
            tasks.iter().map(|_| OnceLock::new()).collect();
        let next = AtomicUsize::new(0);
        let results = Mutex::new(Vec::with_capacity(jobs.len()));
        let threads = self.config.parallelism.clamp(1, jobs.len().max(1));
        thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    let n = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&(t, i)) = jobs.get(n) else { break };
                    let task = &tasks[t];
                    let tests = compiled[t].get_or_init(|| self.compile_tests(task));
                    let r = self.run_sample(task, i, tests);
                    results.lock().push(r);
                });
            }
        });
        EvalReport::from_samples(tasks.len(), results.into_inner())
    }
}
