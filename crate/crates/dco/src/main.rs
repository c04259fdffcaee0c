mod app;
mod cli;
mod server;

use std::io::{self, Write};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Parser;
use dco_core::eval::{load_corpus, write_report, Evaluator};
use dco_core::sandbox::HostState;
use serde_json::{json, Value};
use tracing_subscriber::EnvFilter;

use crate::app::{DomainFailure, UsageError};
use crate::cli::{Cli, Command};

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    let mut out = io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(flag: &str, raw: &str) -> Result<T> {
    serde_json::from_str(raw).map_err(|e| UsageError(format!("{flag}: {e}")).into())
}

fn run(cli: Cli) -> Result<()> {
    let opts = &cli.global;
    match cli.command {
        Command::List => {
            let store = app::directives(opts)?;
            let list: Vec<_> = store.list();
            print_json(&list.iter().map(|d| d.as_ref()).collect::<Vec<_>>())
        }
        Command::Show { id } => {
            let store = app::directives(opts)?;
            print_json(store.get(&id)?.as_ref())
        }
        Command::Update { id, text } => {
            let store = app::directives(opts)?;
            let updated = store.update_text(&id, &text)?;
            store.save(&opts.directives)?;
            print_json(updated.as_ref())
        }
        Command::Generate { id } => {
            let store = app::directives(opts)?;
            store.get(&id)?;
            let orch = app::orchestrator(opts, store)?;
            let block = orch.regenerate(&id)?;
            print_json(&block)?;
            match &block.failure {
                Some(f) => Err(DomainFailure(f.to_string()).into()),
                None => Ok(()),
            }
        }
        Command::Invoke { id, args, host } => {
            let args: Vec<Value> = parse_json("--args", &args)?;
            let host: Option<HostState> = host.map(|h| parse_json("--host", &h)).transpose()?;
            let store = app::directives(opts)?;
            store.get(&id)?;
            let orch = app::orchestrator(opts, store)?;
            orch.restore();
            let result = orch.invoke_action_with_host(&id, &args, host)?;
            print_json(&result)?;
            match &result.failure {
                Some(f) => Err(DomainFailure(f.to_string()).into()),
                None => Ok(()),
            }
        }
        Command::Blocks { directive } => {
            print_json(&app::blocks(opts)?.list(directive.as_deref()))
        }
        Command::Purge { scope } => {
            let purged = app::blocks(opts)?.purge(scope)?.len();
            print_json(&json!({ "purged": purged }))
        }
        Command::Eval { corpus, k, report } => {
            let evaluator = Evaluator::new(
                app::backend(opts)?,
                app::pool(opts)?,
                app::guard(opts)?,
                app::eval_config(opts)?,
            );
            let tasks = load_corpus(&corpus)?;
            let result = evaluator.run_corpus(&tasks, k);
            write_report(&result, &report).with_context(|| format!("writing {}", report.display()))?;
            print_json(&json!({
                "tasks": result.tasks,
                "samples": result.samples,
                "pass_count": result.pass_count,
                "pass_rate": result.pass_rate,
                "pass_rate_extractable": result.pass_rate_extractable,
                "category_counts": result.category_counts,
                "report": report,
            }))
        }
        Command::Serve { port, bind } => {
            let orch = app::orchestrator(opts, app::directives(opts)?)?;
            let restored = orch.restore();
            tracing::info!(restored, "blocks re-registered");
            let state = server::AppState {
                orchestrator: Arc::new(orch),
                directives_path: opts.directives.clone(),
            };
            server::serve(state, &bind, port)
        }
    }
}
