use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use dco_core::code_loader::scan_top_level_defs;
use dco_core::directive_store::{CacheMode, Directive, DirectiveSet, DirectiveStore, GenerationMode, ImportPolicy};
use dco_core::llm_client::{CompletionBackend, CountingBackend, MockBackend, MockEntry, MockScript};
use dco_core::orchestrator::{BlockStore, Orchestrator, OrchestratorConfig, PurgeScope};
use dco_core::sandbox::{HostState, ImportGuard, Invocation, OutcomeStatus, Sandbox, StdModules, WorkerConfig, WorkerPool};
use dco_core::{FailureCategory, Stage};

const WARNING: &str = "If there is already content in the text area - warn the user!";

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn editor_store() -> Arc<DirectiveStore> {
    Arc::new(DirectiveStore::load(&data_dir().join("editor.directives.json")).unwrap())
}

fn editor_mock() -> Arc<CountingBackend> {
    let mock = MockBackend::load(&data_dir().join("editor.mock.json")).unwrap();
    Arc::new(CountingBackend::new(Arc::new(mock)))
}

fn orchestrator(store: Arc<DirectiveStore>, backend: Arc<dyn CompletionBackend>, blocks: BlockStore) -> Orchestrator {
    Orchestrator::new(
        store,
        backend,
        WorkerPool::new(WorkerConfig::default()),
        ImportGuard::new(StdModules::default()),
        blocks,
        OrchestratorConfig::default(),
    )
}

fn fence(src: &str) -> String {
    format!("```python\n{src}```")
}

fn scripted(entries: &[(&str, &str)]) -> Arc<CountingBackend> {
    let script = MockScript {
        default: None,
        entries: entries
            .iter()
            .map(|(d, r)| MockEntry {
                directive: d.to_string(),
                version: None,
                sample: None,
                prompt_contains: None,
                responses: vec![],
                response: Some(r.to_string()),
            })
            .collect(),
    };
    Arc::new(CountingBackend::new(Arc::new(MockBackend::new(script))))
}

fn single(directive: Directive) -> Arc<DirectiveStore> {
    Arc::new(DirectiveStore::new(DirectiveSet {
        directives: vec![directive],
        base_dir: PathBuf::from("."),
    }))
}

#[test]
fn open_file_walkthrough() {
    let backend = editor_mock();
    let orch = orchestrator(editor_store(), backend.clone(), BlockStore::in_memory());
    let started = Instant::now();
    let r = orch.invoke_action("open_file", &[]).unwrap();
    assert!(r.is_ok(), "{r:?}");
    assert!(r.block.is_ready());
    let handle = orch.registry().resolve("onOpenDynamic").expect("bound");
    assert_eq!(Some(&handle.meta.source_hash), r.block.source_hash.as_ref());
    let host = r.outcome.unwrap().host.unwrap();
    assert_eq!(host.document, "Dynamic code orchestration demo file.\n");
    assert!(host.effects.iter().any(|e| e.kind == "askopenfilename"), "{:?}", host.effects);
    assert!(started.elapsed() < Duration::from_secs(5));
    assert_eq!(backend.calls(), 1);
}

#[test]
fn edit_forces_regeneration() {
    let backend = editor_mock();
    let store = editor_store();
    let orch = orchestrator(store.clone(), backend.clone(), BlockStore::in_memory());
    let first = orch.invoke_action("open_file", &[]).unwrap();
    assert!(first.is_ok());
    assert!(!first.block.source.contains("showwarning"));

    let text = format!("{} {WARNING}", store.get("open_file").unwrap().text);
    let updated = store.update_text("open_file", &text).unwrap();
    assert_eq!(updated.version, 2);

    let second = orch.invoke_action("open_file", &[]).unwrap();
    assert!(second.is_ok(), "{second:?}");
    assert_eq!(backend.calls(), 2);
    assert_eq!(second.block.directive_version, 2);
    assert_ne!(first.block.source_hash, second.block.source_hash);
    assert!(second.block.source.contains("messagebox.showwarning"));
}

#[test]
fn warning_branch_fires_on_nonempty_document() {
    let store = editor_store();
    let text = format!("{} {WARNING}", store.get("open_file").unwrap().text);
    store.update_text("open_file", &text).unwrap();
    let orch = orchestrator(store, editor_mock(), BlockStore::in_memory());
    let host = HostState {
        document: "unsaved work".into(),
        ..Default::default()
    };
    let r = orch.invoke_action_with_host("open_file", &[], Some(host)).unwrap();
    let report = r.outcome.unwrap().host.unwrap();
    assert!(report.effects.iter().any(|e| e.kind == "showwarning"), "{:?}", report.effects);
    assert_eq!(report.document, "Dynamic code orchestration demo file.\n");
}

#[test]
fn cache_and_ephemeral_call_counts() {
    let backend = editor_mock();
    let orch = orchestrator(editor_store(), backend.clone(), BlockStore::in_memory());
    for _ in 0..10 {
        assert!(orch.invoke_action("save_file", &[]).unwrap().is_ok());
    }
    assert_eq!(backend.calls(), 1);

    let mut d = Directive::new("add", "add", "Add two numbers.");
    d.policy.cache = CacheMode::Ephemeral;
    let backend = scripted(&[("add", &fence("def add(a, b):\n    return a + b\n"))]);
    let orch = orchestrator(single(d), backend.clone(), BlockStore::in_memory());
    for _ in 0..10 {
        let r = orch.invoke_action("add", &[2.into(), 3.into()]).unwrap();
        assert_eq!(r.outcome.unwrap().value, Some(5.into()));
    }
    assert_eq!(backend.calls(), 10);
}

#[test]
fn single_flight() {
    let backend = editor_mock();
    let orch = Arc::new(orchestrator(editor_store(), backend.clone(), BlockStore::in_memory()));
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let orch = orch.clone();
            thread::spawn(move || orch.invoke_action("new_file", &[]).unwrap().is_ok())
        })
        .collect();
    for h in handles {
        assert!(h.join().unwrap());
    }
    assert_eq!(backend.calls(), 1);
}

#[test]
fn failure_stages_short_circuit() {
    let cases = [
        ("Here is how you would do it, in words.", FailureCategory::ExtractionFailure, Stage::Extract),
        ("```\ndef f():\n    import numpy\n    return 1\n```", FailureCategory::DisallowedImport, Stage::Guard),
        ("```\ndef f(:\n```", FailureCategory::CompileError, Stage::Compile),
        ("```\ndef g():\n    return 1\n```", FailureCategory::MissingEntryPoint, Stage::Register),
        ("```\nx = 1 / 0\ndef f():\n    return 1\n```", FailureCategory::RuntimeError, Stage::Register),
    ];
    for (reply, category, stage) in cases {
        let pool = WorkerPool::new(WorkerConfig::default());
        let orch = Orchestrator::new(
            single(Directive::new("f", "f", "Make f.")),
            scripted(&[("f", reply)]),
            pool.clone(),
            ImportGuard::new(StdModules::default()),
            BlockStore::in_memory(),
            OrchestratorConfig::default(),
        );
        let r = orch.invoke_action("f", &[]).unwrap();
        let failure = r.failure.expect(reply);
        assert_eq!((failure.category, failure.stage), (category, stage), "{reply}");
        assert!(r.outcome.is_none());
        assert!(!r.block.is_ready());
        assert!(orch.registry().is_empty());
        if stage <= Stage::Guard {
            assert_eq!(pool.spawned_total(), 0, "no worker should start before compile");
        }
        if stage == Stage::Extract {
            assert!(r.block.source_hash.is_none());
        }
    }
}

#[test]
fn strip_policy_removes_violations_then_runs() {
    let mut d = Directive::new("f", "f", "Make f.");
    d.policy.import_policy = ImportPolicy::Strip;
    let reply = fence("def f():\n    import requests\n    import json\n    return json.dumps([1])\n");
    let orch = orchestrator(single(d), scripted(&[("f", &reply)]), BlockStore::in_memory());
    let r = orch.invoke_action("f", &[]).unwrap();
    assert!(r.is_ok(), "{r:?}");
    assert!(!r.block.source.contains("requests"));
    assert_eq!(r.outcome.unwrap().value, Some("[1]".into()));
}

#[test]
fn registry_binds_every_top_level_function() {
    let src = "import math\n\ndef helper(x):\n    return x * 2\n\nasync def later():\n    pass\n\nclass C:\n    def method(self):\n        pass\n\ndef f(x):\n    def inner():\n        return 1\n    return helper(x) + inner()\n";
    let orch = orchestrator(
        single(Directive::new("f", "f", "Make f.")),
        scripted(&[("f", &fence(src))]),
        BlockStore::in_memory(),
    );
    let r = orch.invoke_action("f", &[20.into()]).unwrap();
    assert_eq!(r.outcome.unwrap().value, Some(41.into()));
    let mut expected = scan_top_level_defs(src);
    expected.sort();
    assert_eq!(orch.registry().names(), expected);
}

#[test]
fn runaway_call_is_killed() {
    let mut d = Directive::new("spin", "spin", "Loop.");
    d.policy.timeout_ms = 500;
    let orch = orchestrator(
        single(d),
        scripted(&[("spin", &fence("def spin():\n    while True:\n        pass\n"))]),
        BlockStore::in_memory(),
    );
    let r = orch.invoke_action("spin", &[]).unwrap();
    let outcome = r.outcome.unwrap();
    assert_eq!(outcome.status, OutcomeStatus::Timeout);
    assert!((500..=1500).contains(&outcome.elapsed_ms), "{}", outcome.elapsed_ms);
    let failure = r.failure.unwrap();
    assert_eq!((failure.category, failure.stage), (FailureCategory::Timeout, Stage::Invoke));
    assert!(orch.pool().killed_total() >= 1);
}

#[test]
fn diverse_ephemeral_samples_may_differ() {
    let mut d = Directive::new("add", "add", "Add two numbers.");
    d.policy.mode = GenerationMode::Diverse;
    d.policy.temperature = 0.8;
    d.policy.cache = CacheMode::Ephemeral;
    let script = MockScript {
        default: None,
        entries: vec![MockEntry {
            directive: "add".into(),
            version: None,
            sample: None,
            prompt_contains: None,
            responses: vec![
                fence("def add(a, b):\n    return a + b\n"),
                fence("def add(x, y):\n    total = x + y\n    return total\n"),
            ],
            response: None,
        }],
    };
    let orch = orchestrator(single(d), Arc::new(MockBackend::new(script)), BlockStore::in_memory());
    let a = orch.invoke_action("add", &[1.into(), 2.into()]).unwrap();
    let b = orch.invoke_action("add", &[1.into(), 2.into()]).unwrap();
    assert_ne!(a.block.source_hash, b.block.source_hash);
    assert_eq!(a.outcome.unwrap().value, b.outcome.unwrap().value);
}

#[test]
fn purge_and_restore() {
    let dir = tempfile::tempdir().unwrap();
    let blocks_path = dir.path().join("blocks.jsonl");
    let backend = editor_mock();
    {
        let orch = orchestrator(editor_store(), backend.clone(), BlockStore::open(&blocks_path).unwrap());
        for id in ["new_file", "open_file", "save_file"] {
            assert!(orch.invoke_action(id, &[]).unwrap().is_ok());
        }
        assert_eq!(backend.calls(), 3);
    }
    // Restart with blocks intact: everything resolves without the backend.
    {
        let orch = orchestrator(editor_store(), backend.clone(), BlockStore::open(&blocks_path).unwrap());
        assert_eq!(orch.restore(), 3);
        for name in ["onNewDynamic", "onOpenDynamic", "onSaveDynamic"] {
            assert!(orch.registry().resolve(name).is_some(), "{name}");
        }
        assert!(orch.invoke_action("open_file", &[]).unwrap().is_ok());
        assert_eq!(backend.calls(), 3);
        let held = orch.registry().resolve("onSaveDynamic").unwrap();
        assert_eq!(orch.purge_blocks(PurgeScope::All).unwrap(), 3);
        assert!(orch.registry().is_empty());
        // A handle resolved before the purge still runs.
        let mut call = Invocation::of_handle(&held, &[]);
        call.host = Some(HostState::default());
        let outcome = Sandbox::new(orch.pool().clone()).invoke(&call, 2000);
        assert_eq!(outcome.status, OutcomeStatus::Ok, "{outcome:?}");
        assert!(orch.invoke_action("open_file", &[]).unwrap().is_ok());
        assert_eq!(backend.calls(), 4);
    }
    {
        let orch = orchestrator(editor_store(), backend.clone(), BlockStore::open(&blocks_path).unwrap());
        assert_eq!(orch.restore(), 1);
        assert_eq!(orch.purge_blocks(PurgeScope::FailedOnly).unwrap(), 0);
    }
}

#[test]
fn unknown_directive() {
    let orch = orchestrator(editor_store(), editor_mock(), BlockStore::in_memory());
    assert!(matches!(
        orch.invoke_action("missing_id", &[]),
        Err(dco_core::directive_store::DirectiveError::UnknownDirective(_))
    ));
}
