//! Acceptance checks: one PASS/FAIL line per criterion, with the tolerance
//! applied and the measured runtime against its budget.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::oracle::{
    approved, ledger_trial, metric_trials, preference_oracle, recall_trials, tables_as_oracle, TAU_SUBTASK, TAU_TASK,
};
use common::{cmd, expected_decompose, expected_derive, fired, fridge_rule, oscillating_home, recording_agent, s};
use homeagent_core::agent::Agent;
use homeagent_core::domain::{InstructionType, ProposalStatus, Provenance, Scalar, Subtask, TaskProposal};
use homeagent_core::eval::{
    aggregate, run_experiment, Ablation, EvalRecord, EvalReport, ExperimentSetup, LatencyClock, RunMode,
};
use homeagent_core::home::LogRecord;
use homeagent_core::llm::{HashEmbedder, StageTag};
use homeagent_core::memory::{MemoryScope, TaskMemory};
use homeagent_core::pipeline::{Feedback, PipelineConfig};
use homeagent_core::preference::{extract_baseline, Direction, EnvProperty, Level, PropertyTarget};
use num_rational::BigRational;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = fn() -> Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

const SLEEP: &str = "Make the bedroom ready for sleep";

fn agent(config: PipelineConfig) -> Agent {
    let assets = common::assets();
    let gw = assets.scripted_gateway(common::playbook());
    Agent::new(assets.pipeline(config, gw).unwrap(), &assets)
}

fn calls(p: &TaskProposal, stage: &str) -> u32 {
    p.call_trace.iter().filter(|(s, _)| s == stage).map(|(_, n)| n).sum()
}

fn listing_fidelity() -> Result<String, String> {
    let (mut agent, rec) = recording_agent();
    let p = agent.propose("p", SLEEP, &mut |_| {});
    ensure(p.status() == ProposalStatus::AwaitingReview, || {
        format!("proposal {:?}: {:?}", p.status(), p.failure)
    })?;
    let seen = rec.seen.lock().unwrap().clone();
    let response = |stage: StageTag, key: &str| -> Result<Value, String> {
        let (_, _, text) = seen
            .iter()
            .find(|(s, k, _)| *s == stage && k == key)
            .ok_or_else(|| format!("no {stage:?} call for `{key}`"))?;
        serde_json::from_str(text).map_err(|e| e.to_string())
    };
    ensure(response(StageTag::Decompose, SLEEP)? == expected_decompose(), || {
        "Decompose output differs".into()
    })?;
    let derive = response(StageTag::Derive, "Adjust air conditioner temperature")?;
    ensure(derive == expected_derive(), || "Derive output differs".into())?;

    let got: Vec<(&str, &str)> = p
        .subtasks
        .iter()
        .take(3)
        .map(|s| (s.description.as_str(), s.device_name.as_str()))
        .collect();
    let want = [
        ("Adjust air conditioner temperature", "air conditioner"),
        ("Set humidifier level", "humidifier"),
        ("Dim the sleep light", "sleep light"),
    ];
    ensure(got == want, || format!("subtasks {got:?}"))?;
    let mut slots: Vec<&str> = p.subtasks[0].resolutions.iter().map(|r| r.slot.name()).collect();
    slots.sort();
    ensure(slots == ["mode_value", "temperature_value"], || {
        format!("slots {slots:?}")
    })?;
    Ok("subtask set and 3 commands equal the reference JSON; slots [mode_value], [temperature_value]".into())
}

fn cold_warm(ablation: Ablation) -> (EvalReport, EvalReport) {
    let assets = common::assets();
    let setup = ExperimentSetup {
        assets: &assets,
        gateway: assets.scripted_gateway(common::playbook()),
        config: PipelineConfig::default(),
        clock: LatencyClock::Simulated,
    };
    let dataset = common::dataset();
    let (cold, memory) = run_experiment(&dataset, RunMode::Cold, ablation, &setup, None).unwrap();
    let (warm, _) = run_experiment(&dataset, RunMode::Warm, ablation, &setup, Some(memory)).unwrap();
    (cold, warm)
}

fn warm_reuse() -> Result<String, String> {
    let (cold, warm) = cold_warm(Ablation::Full);
    let (c, w) = (cold.aggregate.total_calls, warm.aggregate.total_calls);
    ensure(w < c, || format!("warm {w} >= cold {c}"))?;

    let mut agent = agent(PipelineConfig::default());
    let mut p = agent.propose("p1", SLEEP, &mut |_| {});
    agent
        .feedback(&mut p, &Feedback::Approve, &mut |_| {})
        .map_err(|e| e.to_string())?;
    let again = agent.propose("p2", SLEEP, &mut |_| {});
    let dd = calls(&again, "Decompose") + calls(&again, "Derive");
    ensure(dd == 0, || format!("exact hit made {dd} Decompose+Derive calls"))?;
    Ok(format!(
        "calls cold {c} > warm {w} over {} tasks; exact hit Decompose+Derive = 0",
        cold.aggregate.tasks
    ))
}

fn ablation_ordering() -> Result<String, String> {
    let (nomem_cold, nomem_warm) = cold_warm(Ablation::NoMem);
    let (_, full_warm) = cold_warm(Ablation::Full);
    let (_, nodecomp_warm) = cold_warm(Ablation::NoDecomp);
    let (nc, nw) = (nomem_cold.aggregate.total_calls, nomem_warm.aggregate.total_calls);
    let (fw, dw) = (full_warm.aggregate.total_calls, nodecomp_warm.aggregate.total_calls);
    ensure(nc == nw, || format!("NoMem cold {nc} != warm {nw}"))?;
    ensure(fw < dw, || format!("Full warm {fw} >= NoDecomp warm {dw}"))?;
    Ok(format!(
        "NoMem warm {nw} = cold {nc}; Full warm {fw} < NoDecomp warm {dw}"
    ))
}

fn ac(setpoint: f64) -> Subtask {
    let mut st = Subtask::new(
        "Adjust air conditioner temperature",
        "air conditioner",
        Provenance::FreshlyDecomposed,
    );
    st.commands = vec![
        cmd("air conditioner", "switch", "on", vec![]),
        cmd(
            "air conditioner",
            "thermostatCoolingSetpoint",
            "setCoolingSetpoint",
            vec![Scalar::Decimal(setpoint)],
        ),
    ];
    st
}

fn memory_structure() -> Result<String, String> {
    let corpus = common::assets().corpus;
    let mut mem = TaskMemory::new();
    let mut sleep = TaskProposal::new("p1", SLEEP, InstructionType::DirectControl);
    sleep.context_keyword = "sleeping".into();
    let mut light = Subtask::new("Dim the sleep light", "sleep light", Provenance::FreshlyDecomposed);
    light.commands = vec![cmd("sleep light", "switchLevel", "setLevel", vec![Scalar::Integer(10)])];
    sleep.subtasks = vec![ac(20.0), light];
    let mut cool = TaskProposal::new(
        "p2",
        "Cool the bedroom down to 22 degrees",
        InstructionType::DirectControl,
    );
    cool.context_keyword = "normal".into();
    cool.subtasks = vec![ac(22.0)];
    for p in [sleep, cool] {
        mem.commit_proposal(
            &approved(p),
            &HashEmbedder,
            TAU_TASK,
            TAU_SUBTASK,
            MemoryScope::Full,
            &corpus,
        )
        .map_err(|e| e.to_string())?;
    }
    let shared: Vec<_> = mem.subtasks().filter(|n| n.device_name == "air conditioner").collect();
    ensure(shared.len() == 1, || {
        format!("{} air-conditioner subtask nodes", shared.len())
    })?;
    ensure(shared[0].in_edges.len() == 2, || {
        format!("{} in-edges", shared[0].in_edges.len())
    })?;

    let stats = recall_trials(&[1, 2, 3]);
    ensure(stats.min_nodes >= 1000, || {
        format!("graph of only {} nodes", stats.min_nodes)
    })?;
    ensure(stats.mismatches == 0, || {
        format!("{} of {} recalls differ", stats.mismatches, stats.queries)
    })?;
    Ok(format!(
        "shared subtask: 1 node, 2 in-edges; recall {}/{} match brute force on graphs >= {} nodes (tolerance 0 mismatches)",
        stats.queries - stats.mismatches,
        stats.queries,
        stats.min_nodes
    ))
}

fn metric_oracle() -> Result<String, String> {
    let (flags, mismatches) = metric_trials(50, 50);
    ensure(mismatches == 0, || format!("{mismatches} of 50 pairs differ"))?;
    let records: Vec<EvalRecord> = flags
        .iter()
        .enumerate()
        .map(|(i, f)| EvalRecord {
            task_id: format!("x{i:02}"),
            instruction: String::new(),
            status: ProposalStatus::Approved,
            generated: Vec::new(),
            flags: *f,
            latency_ms: 0,
            cost_usd: "0.00".into(),
            provider_calls: BTreeMap::new(),
            correction_rounds: 0,
            escalated: false,
            failure: None,
        })
        .collect();
    let agg = aggregate(&records, &vec![BigRational::from_integer(0.into()); records.len()]);
    Ok(format!(
        "50/50 pairs match; STR strict {:.2}% lenient {:.2}%, ECR {:.2}% ICR {:.2}% SER {:.2}%",
        agg.str_strict, agg.str_lenient, agg.ecr, agg.icr, agg.ser
    ))
}

fn self_correction() -> Result<String, String> {
    let mut notes = Vec::new();
    for limit in 1..=5 {
        let mut a = agent(PipelineConfig {
            retry_limit: limit,
            ..PipelineConfig::default()
        });
        let before = a.home.fingerprint();
        let fixed = a.propose("p1", "Put the air conditioner in dehumidify mode", &mut |_| {});
        let r = fixed.correction_rounds_used;
        ensure(fixed.escalation.is_none() && (1..=limit).contains(&r), || {
            format!("limit {limit}: fixed in {r} rounds")
        })?;
        let mode = fixed.subtasks[0].commands[0].arguments[0].as_concrete().cloned();
        ensure(mode == Some(s("dry")), || format!("limit {limit}: mode {mode:?}"))?;

        let stuck = a.propose("p2", "Set the humidifier to 95 percent humidity", &mut |_| {});
        ensure(
            stuck.escalation.is_some()
                && stuck.correction_rounds_used == limit
                && calls(&stuck, "SelfCorrect") == limit,
            || {
                format!(
                    "limit {limit}: escalation after {} rounds",
                    stuck.correction_rounds_used
                )
            },
        )?;
        ensure(a.home.fingerprint() == before, || {
            format!("limit {limit}: live home changed")
        })?;
        notes.push(format!("{limit}:{r}"));
    }
    Ok(format!(
        "limit:rounds-to-fix {}; non-converging escalates at exactly the limit; home hash unchanged",
        notes.join(" ")
    ))
}

fn preference_transfer() -> Result<String, String> {
    let assets = common::assets();
    let raw = std::fs::read_to_string(common::fixtures().join("logs/interactions.jsonl")).map_err(|e| e.to_string())?;
    let entries = raw.lines().filter(|l| !l.trim().is_empty()).count();
    let tables = extract_baseline(assets.prefs.logs(), &assets.effects, &assets.bins, &assets.corpus)
        .map_err(|e| e.to_string())?;
    ensure(tables_as_oracle(&tables) == preference_oracle(&raw), || {
        "baseline differs from the tally".into()
    })?;

    let mut a = agent(PipelineConfig::default());
    let mut p = a.propose("p1", SLEEP, &mut |_| {});
    a.feedback(&mut p, &Feedback::Approve, &mut |_| {})
        .map_err(|e| e.to_string())?;
    a.home.remove_device("air conditioner").map_err(|e| e.to_string())?;
    let again = a.propose("p2", SLEEP, &mut |_| {});
    let fan = again.subtasks.iter().find(|s| s.device_name == "fan").ok_or_else(|| {
        format!(
            "no fan subtask in {:?}",
            again.subtasks.iter().map(|s| &s.description).collect::<Vec<_>>()
        )
    })?;
    let want = PropertyTarget {
        property: EnvProperty::Temperature,
        level: Level::Low,
        direction: Direction::Decreases,
    };
    ensure(fan.targets.contains(&want), || format!("fan targets {:?}", fan.targets))?;
    Ok(format!(
        "{entries}-entry log: {} context tables equal the tally; AC removed -> `{}` on fan targets (temperature, low)",
        tables.len(),
        fan.description
    ))
}

fn trigger_semantics() -> Result<String, String> {
    let mut h = common::home();
    h.install_rule(fridge_rule()).map_err(|e| e.to_string())?;
    let mut edges = 0;
    let mut firings = 0;
    let mut duplicate_firings = 0;
    for round in 0..5 {
        firings += fired(
            &h.emit_event("fridge", "contact", s("open"))
                .map_err(|e| e.to_string())?,
            "fridge-open",
        );
        edges += 1;
        for _ in 0..round {
            duplicate_firings += fired(&h.emit_event("fridge", "contact", s("open")).unwrap(), "fridge-open");
        }
        firings += fired(&h.emit_event("fridge", "contact", s("closed")).unwrap(), "fridge-open");
    }
    ensure(firings == edges, || {
        format!("{firings} firings for {edges} rising edges")
    })?;
    ensure(duplicate_firings == 0, || {
        format!("{duplicate_firings} firings on duplicate emits")
    })?;

    for cap in [1usize, 3, 8] {
        let mut h = oscillating_home(cap);
        let records = h.emit_event("motion sensor", "motion", s("active")).unwrap();
        let capped = h
            .log()
            .iter()
            .filter(|r| matches!(r, LogRecord::CycleCap { depth, .. } if *depth == cap))
            .count();
        ensure(records.len() == cap && capped == 1, || {
            format!("cap {cap}: {} actions, {capped} cap records", records.len())
        })?;
    }
    Ok(format!(
        "{firings} firings for {edges} edges, 0 on duplicates; cascade stopped at caps 1, 3, 8"
    ))
}

fn cost_accounting() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1ed9e5);
    for trial in 0..1000 {
        ledger_trial(&mut rng).map_err(|e| format!("trial {trial}: {e}"))?;
    }
    Ok("1000/1000 random sequences exact to 1e-10 USD (tolerance 0)".into())
}

fn main() -> ExitCode {
    let checks: [(&str, Check, Duration); 9] = [
        ("listing fidelity", listing_fidelity, Duration::from_secs(1)),
        ("warm-reuse call reduction", warm_reuse, Duration::from_secs(30)),
        ("ablation ordering", ablation_ordering, Duration::from_secs(60)),
        ("memory structure", memory_structure, Duration::from_secs(60)),
        ("metric oracle", metric_oracle, Duration::from_secs(60)),
        ("self-correction", self_correction, Duration::from_secs(60)),
        ("preference transfer", preference_transfer, Duration::from_secs(60)),
        ("trigger semantics", trigger_semantics, Duration::from_secs(60)),
        ("cost accounting", cost_accounting, Duration::from_secs(60)),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in checks.iter().enumerate() {
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = started.elapsed();
        let (verdict, detail) = match result {
            Ok(d) if elapsed < *budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the time budget")),
            Err(e) => ("FAIL", e),
        };
        failed += usize::from(verdict == "FAIL");
        println!(
            "{verdict} {}. {name}: {detail} [{:.3}s, budget {}s]",
            i + 1,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
