use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dco_core::orchestrator::PurgeScope;

#[derive(Debug, Parser)]
#[command(name = "dco", version, about = "Turn written directives into running code")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Http,
    Replay,
    Mock,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Directive file (JSON).
    #[arg(long, global = true, default_value = "data/editor.directives.json")]
    pub directives: PathBuf,

    /// Completion backend. `http` reads DCO_ENDPOINT and DCO_API_KEY.
    #[arg(long, global = true, value_enum, default_value_t = BackendChoice::Http)]
    pub backend: BackendChoice,

    /// Recorded replies for the replay backend (JSONL).
    #[arg(long, global = true)]
    pub fixtures: Option<PathBuf>,

    /// Scripted replies for the mock backend.
    #[arg(long, global = true, default_value = "data/editor.mock.json")]
    pub mock_script: PathBuf,

    /// Append every backend reply to this fixture file.
    #[arg(long, global = true)]
    pub record: Option<PathBuf>,

    /// Generated block records (JSONL).
    #[arg(long, global = true, default_value = "blocks.jsonl")]
    pub blocks_path: PathBuf,

    /// Drop raw backend replies from stored blocks.
    #[arg(long, global = true)]
    pub drop_raw_responses: bool,

    /// Model identifier sent to the backend.
    #[arg(long, global = true, env = "DCO_MODEL", default_value = dco_core::prompt_builder::DEFAULT_MODEL)]
    pub model: String,

    /// Standard-library module list used by the import guard.
    #[arg(long, global = true)]
    pub std_modules: Option<PathBuf>,

    /// Python interpreter for workers.
    #[arg(long, global = true, env = "DCO_PYTHON", default_value = "python3")]
    pub python: PathBuf,

    /// Maximum live worker processes.
    #[arg(long, global = true, default_value_t = dco_core::sandbox::DEFAULT_MAX_WORKERS, value_parser = clap::value_parser!(usize))]
    pub max_workers: usize,

    /// Default per-call timeout for corpus tasks that do not set one.
    #[arg(long, global = true, default_value_t = dco_core::directive_store::DEFAULT_TIMEOUT_MS)]
    pub timeout_ms: u64,

    /// Concurrent evaluation samples.
    #[arg(long, global = true, default_value_t = 1)]
    pub parallelism: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List directives.
    List,
    /// Print one directive.
    Show { id: String },
    /// Generate a fresh block for a directive.
    Generate { id: String },
    /// Invoke a directive's entry point, generating its block if needed.
    Invoke {
        id: String,
        /// JSON array of positional arguments.
        #[arg(long, default_value = "[]")]
        args: String,
        /// JSON object with the editor host's starting state.
        #[arg(long)]
        host: Option<String>,
    },
    /// Replace a directive's text and save the directive file.
    Update {
        id: String,
        #[arg(long)]
        text: String,
    },
    /// List stored blocks.
    Blocks {
        #[arg(long)]
        directive: Option<String>,
    },
    /// Delete stored block records.
    Purge {
        /// `all`, `failed_only` or `older-than:<ms>`.
        #[arg(long, default_value = "all", value_parser = parse_scope)]
        scope: PurgeScope,
    },
    /// Run a corpus and write a report.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
        k: u32,
        #[arg(long)]
        report: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080, value_parser = clap::value_parser!(u16).range(1..))]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
}

fn parse_scope(s: &str) -> Result<PurgeScope, String> {
    match s {
        "all" => Ok(PurgeScope::All),
        "failed_only" | "failed-only" => Ok(PurgeScope::FailedOnly),
        _ => s
            .strip_prefix("older-than:")
            .or_else(|| s.strip_prefix("older_than:"))
            .and_then(|ms| ms.parse().ok())
            .map(PurgeScope::OlderThan)
            .ok_or_else(|| format!("invalid scope {s:?}; expected all, failed_only or older-than:<ms>")),
    }
}
