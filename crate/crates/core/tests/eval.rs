//! Experiment runs over the 20-task fixture.

mod common;

use homeagent_core::agent::Assets;
use homeagent_core::eval::{
    parse_dataset, report_json, report_table, run_experiment, Ablation, EvalError, EvalReport, ExperimentSetup,
    LatencyClock, RunMode,
};
use homeagent_core::memory::TaskMemory;
use homeagent_core::pipeline::PipelineConfig;

fn setup(assets: &Assets) -> ExperimentSetup<'_> {
    ExperimentSetup {
        assets,
        gateway: assets.scripted_gateway(common::playbook()),
        config: PipelineConfig::default(),
        clock: LatencyClock::Simulated,
    }
}

fn cold_then_warm(ablation: Ablation) -> (EvalReport, EvalReport, TaskMemory) {
    let assets = common::assets();
    let setup = setup(&assets);
    let dataset = common::dataset();
    let (cold, memory) = run_experiment(&dataset, RunMode::Cold, ablation, &setup, None).unwrap();
    let (warm, memory) = run_experiment(&dataset, RunMode::Warm, ablation, &setup, Some(memory)).unwrap();
    (cold, warm, memory)
}

#[test]
fn fixture_dataset_mixes_rephrasings_and_exact_repeats() {
    let dataset = common::dataset();
    assert_eq!(dataset.len(), 20);
    assert_eq!(dataset.iter().filter(|t| t.rephrased_text.is_some()).count(), 17);
}

#[test]
fn warm_runs_reuse_memory() {
    let (cold, warm, memory) = cold_then_warm(Ablation::Full);
    assert_eq!(cold.aggregate.tasks, 20);
    assert!(warm.aggregate.total_calls < cold.aggregate.total_calls);
    assert!(warm.aggregate.str_lenient >= cold.aggregate.str_lenient);
    assert!(!memory.is_empty());
    memory.check_integrity().unwrap();
    // Tasks without a rephrasing repeat their cold text exactly and hit memory.
    let dataset = common::dataset();
    for t in dataset.iter().filter(|t| t.rephrased_text.is_none()) {
        let r = warm.records.iter().find(|r| r.task_id == t.task_id).unwrap();
        let calls = |s: &str| r.provider_calls.get(s).copied().unwrap_or(0);
        assert_eq!(calls("Decompose") + calls("Derive"), 0, "{}", t.task_id);
    }
    // Rules of thumb the fixture is built around: no failures, strict within lenient.
    for r in cold.records.iter().chain(&warm.records) {
        assert!(r.failure.is_none(), "{}: {:?}", r.task_id, r.failure);
    }
    assert!(cold.aggregate.str_strict <= cold.aggregate.str_lenient);
    let calls: u64 = cold.records.iter().map(|r| u64::from(r.total_calls())).sum();
    assert_eq!(calls, cold.aggregate.total_calls);
}

#[test]
fn ablations_order_as_expected() {
    let (nomem_cold, nomem_warm, memory) = cold_then_warm(Ablation::NoMem);
    assert_eq!(nomem_warm.aggregate.total_calls, nomem_cold.aggregate.total_calls);
    assert!(memory.is_empty());
    let (_, full_warm, _) = cold_then_warm(Ablation::Full);
    let (_, nodecomp_warm, _) = cold_then_warm(Ablation::NoDecomp);
    assert!(full_warm.aggregate.total_calls < nodecomp_warm.aggregate.total_calls);
    // Queries still go through decomposition; nothing else does.
    for r in nodecomp_warm.records.iter().filter(|r| !r.task_id.starts_with('q')) {
        assert!(!r.provider_calls.contains_key("Decompose"), "{}", r.task_id);
    }
}

#[test]
fn reports_are_deterministic() {
    let a = cold_then_warm(Ablation::Full);
    let b = cold_then_warm(Ablation::Full);
    assert_eq!(report_json(&a.0), report_json(&b.0));
    assert_eq!(report_json(&a.1), report_json(&b.1));
    let ids: Vec<&str> = a.0.records.iter().map(|r| r.task_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    let parsed: EvalReport = serde_json::from_str(&report_json(&a.0)).unwrap();
    assert_eq!(parsed, a.0);
    assert!(report_table(&a.0).lines().count() > 20);
}

#[test]
fn warm_runs_need_a_snapshot() {
    let assets = common::assets();
    let setup = setup(&assets);
    let dataset = common::dataset();
    assert!(matches!(
        run_experiment(&dataset, RunMode::Warm, Ablation::Full, &setup, None),
        Err(EvalError::MissingMemorySnapshot)
    ));
    // Without memory there is nothing to restore, so no snapshot is needed.
    assert!(run_experiment(&dataset[..2], RunMode::Warm, Ablation::NoMem, &setup, None).is_ok());
}

#[test]
fn dataset_errors_carry_line_numbers() {
    let good = r#"{"task_id":"a","instruction_text":"x","instruction_type":"Direct Control Command","ground_truth":[{"device":"fan","capability":"switch","command":"on"}]}"#;
    assert_eq!(parse_dataset(&format!("{good}\n\n")).unwrap().len(), 1);
    match parse_dataset(&format!("{good}\n{good}\n")) {
        Err(EvalError::Dataset { line, message }) => {
            assert_eq!(line, 2);
            assert!(message.contains("duplicate"));
        }
        other => panic!("expected a duplicate error, got {other:?}"),
    }
    assert!(matches!(
        parse_dataset("{oops"),
        Err(EvalError::Dataset { line: 1, .. })
    ));
    assert!(matches!(
        homeagent_core::eval::load_dataset("/nonexistent/tasks.jsonl"),
        Err(EvalError::Io(_))
    ));
}
