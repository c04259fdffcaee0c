//! Dynamic code orchestration runtime.
//!
//! Written-language directives are turned into executable code blocks on
//! demand: a directive is rendered into a prompt, sent to a completion
//! backend, the reply is parsed for source code, guarded, compiled inside a
//! Python worker, registered under its entry-point name and finally invoked
//! under a wall-clock guard. The [`eval`] module runs the same pipeline over
//! a task corpus and accounts for every failure by category.

pub mod code_loader;
pub mod directive_store;
pub mod eval;
pub mod failure;
pub mod hashing;
pub mod llm_client;
pub mod orchestrator;
pub mod prompt_builder;
pub mod response_parser;
pub mod sandbox;
pub mod timestamp;

pub use code_loader::{CodeLoader, CompiledUnit, FunctionHandle, FunctionRegistry};
pub use directive_store::{Directive, DirectiveStore, GenerationPolicy};
pub use failure::{FailureCategory, FailureRecord, Stage};
pub use llm_client::{CompletionBackend, CompletionRequest, CompletionResponse};
pub use orchestrator::{GeneratedBlock, InvocationResult, Orchestrator};
pub use sandbox::{InvocationOutcome, OutcomeStatus, Sandbox, WorkerPool};
