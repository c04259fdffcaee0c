use std::sync::Arc;

use dco_core::eval::{EvalConfig, EvalReport, EvalTask, Evaluator, Verdict};
use dco_core::llm_client::{CompletionBackend, MockBackend, MockEntry, MockScript};
use dco_core::sandbox::{ImportGuard, StdModules, WorkerConfig, WorkerPool};
use dco_core::FailureCategory;

const ADD_CHECK: &str = "def check(candidate):\n    assert candidate(2, 3) == 5\n    assert candidate(-1, 1) == 0\n";

fn task(id: &str, tests: &str) -> EvalTask {
    EvalTask {
        task_id: id.into(),
        prompt: "def add(a, b):\n    \"\"\"Return a + b.\"\"\"\n".into(),
        entry_point: "add".into(),
        tests: tests.into(),
        timeout_ms: Some(300),
        canonical_solution: None,
    }
}

fn envelope(code: &str) -> String {
    serde_json::json!({ "code": code }).to_string()
}

fn per_sample(id: &str, replies: &[String]) -> Vec<MockEntry> {
    replies
        .iter()
        .enumerate()
        .map(|(i, r)| MockEntry {
            directive: id.into(),
            version: None,
            sample: Some(i as u32),
            prompt_contains: None,
            responses: vec![],
            response: Some(r.clone()),
        })
        .collect()
}

fn evaluator(entries: Vec<MockEntry>, parallelism: usize) -> Evaluator {
    let backend: Arc<dyn CompletionBackend> = Arc::new(MockBackend::new(MockScript { default: None, entries }));
    Evaluator::new(
        backend,
        WorkerPool::new(WorkerConfig::default()),
        ImportGuard::new(StdModules::default()),
        EvalConfig {
            parallelism,
            ..EvalConfig::default()
        },
    )
}

fn verdicts(eval: &Evaluator, t: &EvalTask, k: u32) -> Vec<Verdict> {
    eval.run_task(t, k).into_iter().map(|s| s.verdict).collect()
}

#[test]
fn correct_code_passes_every_sample() {
    let good = envelope("def add(a, b):\n    return a + b\n");
    let eval = evaluator(per_sample("t", &vec![good; 4]), 1);
    assert_eq!(verdicts(&eval, &task("t", ADD_CHECK), 4), vec![Verdict::Pass; 4]);
}

#[test]
fn off_by_one_fails_tests() {
    let bad = envelope("def add(a, b):\n    return a + b + 1\n");
    let eval = evaluator(per_sample("t", &vec![bad; 3]), 1);
    let results = eval.run_task(&task("t", ADD_CHECK), 3);
    for r in &results {
        assert_eq!(r.verdict, Verdict::Fail(FailureCategory::TestFailure));
        assert!(r.source_hash.is_some());
    }
}

#[test]
fn scripted_schedule_timeout_then_passes() {
    let k = 4;
    let mut replies = vec![envelope("def add(a, b):\n    while True:\n        pass\n")];
    replies.extend((1..k).map(|_| envelope("def add(a, b):\n    return b + a\n")));
    let eval = evaluator(per_sample("t", &replies), 1);
    let mut expected = vec![Verdict::Fail(FailureCategory::Timeout)];
    expected.extend(vec![Verdict::Pass; k - 1]);
    assert_eq!(verdicts(&eval, &task("t", ADD_CHECK), k as u32), expected);
}

#[test]
fn runtime_errors_are_not_test_failures() {
    let raising = envelope("def add(a, b):\n    return a + b + None\n");
    let eval = evaluator(per_sample("t", &[raising]), 1);
    assert_eq!(
        verdicts(&eval, &task("t", ADD_CHECK), 1),
        vec![Verdict::Fail(FailureCategory::RuntimeError)]
    );
}

#[test]
fn broken_tests_count_as_runtime_errors() {
    let good = envelope("def add(a, b):\n    return a + b\n");
    let eval = evaluator(per_sample("t", &[good]), 1);
    assert_eq!(
        verdicts(&eval, &task("t", "def check(candidate)\n    pass\n"), 1),
        vec![Verdict::Fail(FailureCategory::RuntimeError)]
    );
}

#[test]
fn samples_are_isolated() {
    // Sample 0 defines a global the tests would notice if it leaked.
    let leaky = envelope("LEAK = 1\ndef add(a, b):\n    return a + b\n");
    let clean = envelope("def add(a, b):\n    return a + b\n");
    let check = "def check(candidate):\n    assert 'LEAK' not in candidate.__globals__\n";
    let eval = evaluator(per_sample("t", &[leaky, clean]), 1);
    assert_eq!(
        verdicts(&eval, &task("t", check), 2),
        vec![Verdict::Fail(FailureCategory::TestFailure), Verdict::Pass]
    );
}

#[test]
fn empty_corpus() {
    let eval = evaluator(vec![], 4);
    let r = eval.run_corpus(&[], 1);
    assert_eq!(r, EvalReport::from_samples(0, vec![]));
    assert_eq!(r.pass_rate, 0.0);
}

#[test]
fn backend_errors_become_verdicts() {
    let eval = evaluator(vec![], 1);
    assert_eq!(
        verdicts(&eval, &task("unscripted", ADD_CHECK), 2),
        vec![Verdict::Fail(FailureCategory::BackendError); 2]
    );
}

#[test]
fn parallel_and_serial_agree() {
    let good = envelope("def add(a, b):\n    return a + b\n");
    let bad = envelope("def add(a, b):\n    return 0\n");
    let mut entries = Vec::new();
    let tasks: Vec<EvalTask> = (0..6).map(|i| task(&format!("t{i}"), ADD_CHECK)).collect();
    for (i, t) in tasks.iter().enumerate() {
        let replies = if i % 2 == 0 { [good.clone(), bad.clone(), "nope".to_string()] } else { [bad.clone(), good.clone(), good.clone()] };
        entries.extend(per_sample(&t.task_id, &replies));
    }
    let serial = evaluator(entries.clone(), 1).run_corpus(&tasks, 3);
    let parallel = evaluator(entries, 4).run_corpus(&tasks, 3);
    let strip = |mut r: EvalReport| {
        r.per_sample.iter_mut().for_each(|s| s.elapsed_ms = 0);
        r
    };
    let (serial, parallel) = (strip(serial), strip(parallel));
    assert_eq!(serial, parallel);
    assert_eq!(serial.pass_count + serial.failed_count(), 18);
    assert_eq!(serial.pass_count, 9);
    assert_eq!(serial.category_counts[&FailureCategory::ExtractionFailure], 3);
}
