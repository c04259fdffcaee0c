//! Pool of killable Python worker processes.
//!
//! A CPython interpreter cannot preempt a spinning thread from inside, so
//! generated code only ever runs in a child process the host can SIGKILL.
//! Workers are reused across requests (each request gets fresh namespaces)
//! and replaced after a timeout, a crash, or `max_requests` served.

use std::collections::BTreeMap;
use std::env;
use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::debug;

use super::HostReport;

const WORKER_SOURCE: &str = include_str!("worker.py");

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    /// Interpreter to launch; `DCO_PYTHON` or `python3`.
    pub python: PathBuf,
    /// Upper bound on live worker processes.
    pub max_workers: usize,
    /// Requests served before a worker is recycled.
    pub max_requests: usize,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            python: env::var_os("DCO_PYTHON")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("python3")),
            max_workers: 4,
            max_requests: 256,
        }
    }
}

#[derive(Debug, Error)]
pub enum WorkerFault {
    #[error("worker timed out after {} ms", .elapsed.as_millis())]
    Timeout { elapsed: Duration },
    #[error("worker exited unexpectedly: {0}")]
    Crashed(String),
    #[error("cannot start worker: {0}")]
    Spawn(#[source] io::Error),
    #[error("worker protocol error: {0}")]
    Protocol(String),
}

/// One worker answer; which fields are set depends on `status`.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
pub struct WorkerReply {
    pub status: String,
    #[serde(default)]
    pub code: Option<String>,
    #[serde(default)]
    pub line: Option<u32>,
    #[serde(default)]
    pub message: Option<String>,
    #[serde(default)]
    pub exception: Option<String>,
    #[serde(default)]
    pub phase: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub defined: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub value: Option<Value>,
    #[serde(default)]
    pub host: Option<HostReport>,
    #[serde(default)]
    pub stdout: String,
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    replies: Receiver<String>,
    served: usize,
}

impl Worker {
    fn spawn(config: &WorkerConfig) -> io::Result<Worker> {
        let mut child = Command::new(&config.python)
            .args(["-I", "-B", "-c", WORKER_SOURCE])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, replies) = mpsc::channel();
        thread::Builder::new()
            .name("dco-worker-reader".into())
            .spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    let Ok(line) = line else { break };
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            })?;
        Ok(Worker {
            child,
            stdin,
            replies,
            served: 0,
        })
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Default)]
struct PoolState {
    idle: Vec<Worker>,
    live: usize,
}

struct PoolInner {
    config: WorkerConfig,
    state: Mutex<PoolState>,
    freed: Condvar,
    spawned: AtomicU64,
    killed: AtomicU64,
}

#[derive(Clone)]
pub struct WorkerPool {
    inner: Arc<PoolInner>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool")
            .field("config", &self.inner.config)
            .field("live", &self.live_workers())
            .finish()
    }
}

impl Default for WorkerPool {
    fn default() -> Self {
        Self::new(WorkerConfig::default())
    }
}

struct Lease<'a> {
    pool: &'a PoolInner,
    worker: Option<Worker>,
    healthy: bool,
}

impl Lease<'_> {
    fn worker(&mut self) -> &mut Worker {
        self.worker.as_mut().expect("leased worker")
    }
}

impl Drop for Lease<'_> {
    fn drop(&mut self) {
        let Some(worker) = self.worker.take() else { return };
        let mut state = self.pool.state.lock();
        if self.healthy && worker.served < self.pool.config.max_requests {
            state.idle.push(worker);
        } else {
            state.live -= 1;
            drop(state);
            if !self.healthy {
                self.pool.killed.fetch_add(1, Ordering::Relaxed);
            }
            drop(worker);
        }
        self.pool.freed.notify_one();
    }
}

impl WorkerPool {
    pub fn new(config: WorkerConfig) -> Self {
        assert!(config.max_workers > 0, "worker pool needs at least one slot");
        Self {
            inner: Arc::new(PoolInner {
                config,
                state: Mutex::new(PoolState::default()),
                freed: Condvar::new(),
                spawned: AtomicU64::new(0),
                killed: AtomicU64::new(0),
            }),
        }
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.inner.config
    }

    /// Worker processes currently alive, idle or busy.
    pub fn live_workers(&self) -> usize {
        self.inner.state.lock().live
    }

    pub fn spawned_total(&self) -> u64 {
        self.inner.spawned.load(Ordering::Relaxed)
    }

    /// Workers terminated because of a timeout or a crash.
    pub fn killed_total(&self) -> u64 {
        self.inner.killed.load(Ordering::Relaxed)
    }

    fn checkout(&self) -> Result<Lease<'_>, WorkerFault> {
        let inner = &*self.inner;
        let mut state = inner.state.lock();
        loop {
            if let Some(worker) = state.idle.pop() {
                return Ok(Lease {
                    pool: inner,
                    worker: Some(worker),
                    healthy: true,
                });
            }
            if state.live < inner.config.max_workers {
                state.live += 1;
                drop(state);
                return match Worker::spawn(&inner.config) {
                    Ok(worker) => {
                        inner.spawned.fetch_add(1, Ordering::Relaxed);
                        debug!(pid = worker.child.id(), "spawned worker");
                        Ok(Lease {
                            pool: inner,
                            worker: Some(worker),
                            healthy: true,
                        })
                    }
                    Err(e) => {
                        inner.state.lock().live -= 1;
                        inner.freed.notify_one();
                        Err(WorkerFault::Spawn(e))
                    }
                };
            }
            inner.freed.wait(&mut state);
        }
    }

    /// Sends one request and waits at most `timeout` for the reply. On
    /// timeout the worker is killed before this returns, and the reported
    /// elapsed time is never below `timeout`.
    pub fn request(&self, request: &Value, timeout: Duration) -> Result<(WorkerReply, Duration), WorkerFault> {
        let mut line = serde_json::to_string(request).map_err(|e| WorkerFault::Protocol(e.to_string()))?;
        line.push('\n');
        // A reused worker may have died while idle; the request was never
        // delivered in that case, so one fresh attempt is safe.
        for attempt in 0..2 {
            let mut lease = self.checkout()?;
            let reused = lease.worker().served > 0;
            let started = Instant::now();
            let written = {
                let w = lease.worker();
                w.stdin.write_all(line.as_bytes()).and_then(|_| w.stdin.flush())
            };
            if let Err(e) = written {
                lease.healthy = false;
                if reused && attempt == 0 {
                    continue;
                }
                return Err(WorkerFault::Crashed(e.to_string()));
            }
            return match lease.worker().replies.recv_timeout(timeout) {
                Ok(reply) => {
                    let elapsed = started.elapsed();
                    lease.worker().served += 1;
                    let parsed: WorkerReply = serde_json::from_str(&reply).map_err(|e| {
                        lease.healthy = false;
                        WorkerFault::Protocol(e.to_string())
                    })?;
                    if parsed.status == "protocol_error" {
                        lease.healthy = false;
                        return Err(WorkerFault::Protocol(parsed.message.unwrap_or_default()));
                    }
                    Ok((parsed, elapsed))
                }
                Err(RecvTimeoutError::Timeout) => {
                    let mut worker = lease.worker.take().expect("leased worker");
                    let _ = worker.child.kill();
                    let _ = worker.child.wait();
                    let elapsed = started.elapsed().max(timeout);
                    lease.worker = Some(worker);
                    lease.healthy = false;
                    Err(WorkerFault::Timeout { elapsed })
                }
                Err(RecvTimeoutError::Disconnected) => {
                    lease.healthy = false;
                    let status = lease.worker().child.wait().map(|s| s.to_string()).unwrap_or_default();
                    Err(WorkerFault::Crashed(format!("worker process ended ({status})")))
                }
            };
        }
        unreachable!("second attempt always returns")
    }
}
