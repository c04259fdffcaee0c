//! Guards around generated code: import policy before compilation and
//! timeout-bounded invocation in killable worker processes.
//!
//! Arguments and results cross the process boundary as JSON. Supported
//! value kinds are null, booleans, numbers, strings, lists and string-keyed
//! maps; a result outside that set comes back as `{"$repr": "<repr>"}`.

mod imports;
mod worker;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use imports::{ImportGuard, ImportScanResult, StdModules};
pub use worker::{WorkerConfig, WorkerFault, WorkerPool, WorkerReply};

use crate::code_loader::{CompiledUnit, FunctionHandle};

pub const DEFAULT_MAX_WORKERS: usize = 4;

/// Starting state of the editor host for one call: the document in the
/// text area, a virtual file table, and the answers dialogs will give.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HostState {
    pub document: String,
    pub files: BTreeMap<String, String>,
    pub open_path: Option<String>,
    pub save_path: Option<String>,
    pub confirm: bool,
    pub answer: Option<String>,
}

impl Default for HostState {
    fn default() -> Self {
        let notes = "/home/user/notes.txt".to_string();
        Self {
            document: String::new(),
            files: BTreeMap::from([(
                notes.clone(),
                "Dynamic code orchestration demo file.\n".to_string(),
            )]),
            open_path: Some(notes),
            save_path: Some("/home/user/saved.txt".to_string()),
            confirm: true,
            answer: None,
        }
    }
}

/// Something the generated code did to the host: a dialog shown, a file
/// read or written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostEffect {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostReport {
    pub document: String,
    pub files: BTreeMap<String, String>,
    pub effects: Vec<HostEffect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Ok,
    Timeout,
    RuntimeError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationOutcome {
    pub status: OutcomeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    /// Exception type name for runtime errors raised by Python code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception: Option<String>,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub stdout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<HostReport>,
}

impl InvocationOutcome {
    fn runtime_error(message: String, exception: Option<String>, elapsed: Duration) -> Self {
        Self {
            status: OutcomeStatus::RuntimeError,
            value: None,
            error_message: Some(message),
            exception,
            elapsed_ms: elapsed.as_millis() as u64,
            stdout: String::new(),
            host: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == OutcomeStatus::Ok
    }
}

#[derive(Debug, Clone)]
pub enum CallArg {
    Value(Value),
    /// A function defined in another scope of the same call, passed as a
    /// live callable (how a test's `check` receives its candidate).
    Function { scope: String, name: String },
}

/// One guarded call. Units load into their scope in order; each scope is a
/// separate global namespace.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub units: Vec<(String, Arc<CompiledUnit>)>,
    pub scope: String,
    pub function: String,
    pub args: Vec<CallArg>,
    pub host: Option<HostState>,
}

impl Invocation {
    pub fn of_handle(handle: &FunctionHandle, args: &[Value]) -> Self {
        Self {
            units: vec![("block".to_string(), handle.unit.clone())],
            scope: "block".to_string(),
            function: handle.name.clone(),
            args: args.iter().cloned().map(CallArg::Value).collect(),
            host: None,
        }
    }

    fn to_request(&self) -> Value {
        let units: Vec<Value> = self
            .units
            .iter()
            .map(|(scope, unit)| json!({"scope": scope, "code": unit.code()}))
            .collect();
        let args: Vec<Value> = self
            .args
            .iter()
            .map(|a| match a {
                CallArg::Value(v) => json!({"value": v}),
                CallArg::Function { scope, name } => json!({"fn": {"scope": scope, "name": name}}),
            })
            .collect();
        json!({
            "op": "execute",
            "units": units,
            "host": self.host,
            "call": {"scope": self.scope, "name": self.function, "args": args},
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sandbox {
    pool: WorkerPool,
}

impl Sandbox {
    pub fn new(pool: WorkerPool) -> Self {
        Self { pool }
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    pub fn invoke_with_timeout(&self, handle: &FunctionHandle, args: &[Value], timeout_ms: u64) -> InvocationOutcome {
        self.invoke(&Invocation::of_handle(handle, args), timeout_ms)
    }

    /// Runs the call in a worker. Never fails: a timeout kills the worker
    /// and is reported as `Timeout`, everything else that goes wrong as
    /// `RuntimeError`.
    pub fn invoke(&self, invocation: &Invocation, timeout_ms: u64) -> InvocationOutcome {
        let timeout = Duration::from_millis(timeout_ms.max(1));
        match self.pool.request(&invocation.to_request(), timeout) {
            Ok((reply, elapsed)) => outcome_from_reply(reply, elapsed),
            Err(WorkerFault::Timeout { elapsed }) => InvocationOutcome {
                status: OutcomeStatus::Timeout,
                value: None,
                error_message: Some(format!("exceeded {timeout_ms} ms; worker terminated")),
                exception: None,
                elapsed_ms: elapsed.as_millis() as u64,
                stdout: String::new(),
                host: None,
            },
            Err(fault) => InvocationOutcome::runtime_error(fault.to_string(), None, Duration::ZERO),
        }
    }
}

fn outcome_from_reply(reply: WorkerReply, elapsed: Duration) -> InvocationOutcome {
    let mut outcome = match reply.status.as_str() {
        "ok" => InvocationOutcome {
            status: OutcomeStatus::Ok,
            value: reply.value,
            error_message: None,
            exception: None,
            elapsed_ms: elapsed.as_millis() as u64,
            stdout: String::new(),
            host: None,
        },
        "missing" => InvocationOutcome::runtime_error(
            format!(
                "Function not found or not callable: {}",
                reply.name.unwrap_or_default()
            ),
            None,
            elapsed,
        ),
        _ => InvocationOutcome::runtime_error(
            reply.message.unwrap_or_else(|| reply.status.clone()),
            reply.exception,
            elapsed,
        ),
    };
    outcome.stdout = reply.stdout;
    outcome.host = reply.host;
    outcome
}
