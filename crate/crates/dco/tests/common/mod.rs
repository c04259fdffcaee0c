#![allow(dead_code)]

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

pub const WARNING: &str = "If there is already content in the text area - warn the user!";

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dco")
}

/// A scratch directory holding a copy of the editor directives and
/// skeleton, so tests can edit directives without touching the repo.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = data_dir();
        fs::create_dir_all(dir.path().join("skeleton")).unwrap();
        fs::copy(
            data.join("skeleton/DynamicTextEditor.py"),
            dir.path().join("skeleton/DynamicTextEditor.py"),
        )
        .unwrap();
        fs::copy(data.join("editor.directives.json"), dir.path().join("directives.json")).unwrap();
        fs::copy(data.join("editor.mock.json"), dir.path().join("mock.json")).unwrap();
        Self { dir }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&self, name: &str, content: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, content).unwrap();
        p
    }

    /// Global flags pointing at this workspace, using the mock backend and
    /// recording every reply so tests can count backend calls.
    pub fn mock_args(&self) -> Vec<String> {
        vec![
            "--directives".into(),
            self.path("directives.json").display().to_string(),
            "--backend".into(),
            "mock".into(),
            "--mock-script".into(),
            self.path("mock.json").display().to_string(),
            "--blocks-path".into(),
            self.path("blocks.jsonl").display().to_string(),
            "--record".into(),
            self.path("calls.jsonl").display().to_string(),
        ]
    }

    /// Number of replies the backend has produced so far.
    pub fn backend_calls(&self) -> usize {
        fs::read_to_string(self.path("calls.jsonl"))
            .map(|s| s.lines().count())
            .unwrap_or(0)
    }

    pub fn dco(&self, extra: &[&str]) -> Output {
        let mut args = self.mock_args();
        args.extend(extra.iter().map(|s| s.to_string()));
        run_dco(&args, self.dir.path())
    }
}

pub fn run_dco(args: &[String], cwd: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .env_remove("DCO_MODEL")
        .env_remove("DCO_ENDPOINT")
        .env_remove("DCO_API_KEY")
        .output()
        .unwrap()
}

pub fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// A running `dco serve` child, killed on drop.
pub struct Service {
    pub child: Child,
    pub base: String,
    pub client: reqwest::blocking::Client,
}

impl Service {
    pub fn start(args: &[String], cwd: &Path) -> Self {
        Self::start_with_env(args, cwd, &[])
    }

    pub fn start_with_env(args: &[String], cwd: &Path, env: &[(&str, &str)]) -> Self {
        let port = free_port();
        let mut cmd = Command::new(bin());
        cmd.args(args)
            .args(["serve", "--port", &port.to_string()])
            .current_dir(cwd)
            .env_remove("DCO_MODEL")
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        for (k, v) in env {
            cmd.env(k, v);
        }
        let child = cmd.spawn().unwrap();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .unwrap();
        let svc = Self {
            child,
            base: format!("http://127.0.0.1:{port}"),
            client,
        };
        let started = Instant::now();
        while started.elapsed() < Duration::from_secs(20) {
            if svc.client.get(svc.url("/api/health")).send().is_ok_and(|r| r.status().is_success()) {
                return svc;
            }
            thread::sleep(Duration::from_millis(25));
        }
        panic!("service did not come up on port {port}");
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(self.url(path)).send().unwrap();
        (r.status().as_u16(), r.json().unwrap_or(Value::Null))
    }

    pub fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.post(self.url(path)).json(&body).send().unwrap();
        (r.status().as_u16(), r.json().unwrap_or(Value::Null))
    }

    pub fn put(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.put(self.url(path)).json(&body).send().unwrap();
        (r.status().as_u16(), r.json().unwrap_or(Value::Null))
    }

    /// Live child processes of the service (its Python workers).
    pub fn child_processes(&self) -> usize {
        let pid = self.child.id();
        let Ok(tasks) = fs::read_dir(format!("/proc/{pid}/task")) else {
            return 0;
        };
        tasks
            .flatten()
            .filter_map(|t| fs::read_to_string(t.path().join("children")).ok())
            .map(|c| c.split_whitespace().count())
            .sum()
    }

    pub fn stop(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
