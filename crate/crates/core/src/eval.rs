//! Evaluation harness: labeled task datasets, cold/warm experiments,
//! ablations, STR/ECR/ICR/SER scoring and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use num_rational::BigRational;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Assets;
use crate::capability::{validate_command, SchemaCorpus};
use crate::domain::{AttributeRef, CommandTriple, DeviceCommand, DeviceDescriptor, InstructionType, ProposalStatus};
use crate::llm::{format_decimal, Gateway};
use crate::memory::{MemoryScope, TaskMemory};
use crate::pipeline::{PipelineConfig, PipelineError, RunContext};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error("cannot read dataset: {0}")]
    Io(String),
    #[error("a warm run needs the memory snapshot of a cold run")]
    MissingMemorySnapshot,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetTask {
    pub task_id: String,
    pub instruction_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rephrased_text: Option<String>,
    pub instruction_type: InstructionType,
    pub ground_truth: Vec<CommandTriple>,
}

/// Parses a line-delimited dataset; blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<DatasetTask>, EvalError> {
    let mut tasks = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Dataset { line: i + 1, message };
        let task: DatasetTask = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if task.ground_truth.is_empty() && task.instruction_type != InstructionType::DeviceQuery {
            return Err(err(format!("task `{}` has no ground truth", task.task_id)));
        }
        if !seen.insert(task.task_id.clone()) {
            return Err(err(format!("duplicate task id `{}`", task.task_id)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetTask>, EvalError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| EvalError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_dataset(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Cold,
    Warm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Full,
    /// Derive straight from the instruction; memory at task level only.
    NoDecomp,
    /// Memory reads and writes disabled.
    NoMem,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoDecomp, Ablation::NoMem];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoDecomp => "nodecomp",
            Ablation::NoMem => "nomem",
        }
    }

    pub fn configure(self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoDecomp => {
                c.decompose = false;
                c.memory = MemoryScope::TaskOnly;
            }
            Ablation::NoMem => c.memory = MemoryScope::Off,
        }
        c
    }
}

/// How per-task latency is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyClock {
    /// Sum of provider-reported latencies: deterministic under a playbook.
    Simulated,
    /// Wall time around the session plus provider-reported latency.
    Monotonic,
}

/// Outcome flags of one task; the three error flags are independent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// Every ground-truth triple generated and valid; extras allowed.
    pub success: bool,
    /// As `success`, and no extra triples.
    pub success_strict: bool,
    pub excessive: bool,
    pub insufficient: bool,
    pub syntax_error: bool,
}

/// Scores generated triples (each with whether it passed validation)
/// against the ground truth. Parameters never enter the comparison.
pub fn score_triples(generated: &[(CommandTriple, bool)], ground_truth: &[CommandTriple]) -> Flags {
    let produced: BTreeSet<&CommandTriple> = generated.iter().map(|(t, _)| t).collect();
    let gt: BTreeSet<&CommandTriple> = ground_truth.iter().collect();
    let insufficient = !gt.is_subset(&produced);
    let excessive = produced.iter().any(|t| !gt.contains(t));
    let syntax_error = generated.iter().any(|(_, valid)| !valid);
    let gt_valid = generated
        .iter()
        .filter(|(t, _)| gt.contains(t))
        .all(|(_, valid)| *valid);
    let success = !insufficient && gt_valid;
    Flags {
        success,
        success_strict: success && !excessive,
        excessive,
        insufficient,
        syntax_error,
    }
}

/// Scores concrete commands and query targets. Commands are checked with
/// the schema validator; a query is valid when its attribute exists on the
/// device's capability.
pub fn score(
    commands: &[DeviceCommand],
    queries: &[AttributeRef],
    ground_truth: &[CommandTriple],
    env: &[DeviceDescriptor],
    corpus: &SchemaCorpus,
) -> Flags {
    let mut generated: Vec<(CommandTriple, bool)> = commands
        .iter()
        .map(|c| (c.triple(), validate_command(c, env, corpus).is_empty()))
        .collect();
    generated.extend(queries.iter().map(|q| {
        let valid = env
            .iter()
            .any(|d| d.device_name == q.device_name && d.capabilities.contains(&q.capability_name))
            && corpus
                .get(&q.capability_name)
                .is_some_and(|c| c.attribute(&q.attribute_name).is_some());
        (q.triple(), valid)
    }));
    score_triples(&generated, ground_truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task_id: String,
    pub instruction: String,
    pub status: ProposalStatus,
    pub generated: Vec<CommandTriple>,
    #[serde(flatten)]
    pub flags: Flags,
    pub latency_ms: u64,
    pub cost_usd: String,
    pub provider_calls: BTreeMap<String, u32>,
    pub correction_rounds: u32,
    pub escalated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl EvalRecord {
    pub fn total_calls(&self) -> u32 {
        self.provider_calls.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tasks: usize,
    /// Percentages rounded to two decimals.
    pub str_lenient: f64,
    pub str_strict: f64,
    pub ecr: f64,
    pub icr: f64,
    pub ser: f64,
    pub mean_latency_ms: f64,
    pub total_cost_usd: String,
    pub mean_cost_usd: String,
    pub total_calls: u64,
    pub mean_calls: f64,
    pub calls_by_stage: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: RunMode,
    pub ablation: Ablation,
    pub clock: LatencyClock,
    pub aggregate: Aggregate,
    pub records: Vec<EvalRecord>,
}

fn pct(n: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    round2(100.0 * n as f64 / total as f64)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Aggregates records; costs are summed exactly from the ledger values.
pub fn aggregate(records: &[EvalRecord], costs: &[BigRational]) -> Aggregate {
    let n = records.len();
    let count = |f: fn(&Flags) -> bool| records.iter().filter(|r| f(&r.flags)).count();
    let total_cost: BigRational = costs.iter().fold(BigRational::zero(), |a, c| a + c);
    let mean_cost = if n == 0 {
        BigRational::zero()
    } else {
        &total_cost / BigRational::from_integer((n as i64).into())
    };
    let mut calls_by_stage = BTreeMap::new();
    for r in records {
        for (stage, c) in &r.provider_calls {
            *calls_by_stage.entry(stage.clone()).or_insert(0u64) += u64::from(*c);
        }
    }
    let total_calls: u64 = calls_by_stage.values().sum();
    let mean = |x: f64| if n == 0 { 0.0 } else { round2(x / n as f64) };
    Aggregate {
        tasks: n,
        str_lenient: pct(count(|f| f.success), n),
        str_strict: pct(count(|f| f.success_strict), n),
        ecr: pct(count(|f| f.excessive), n),
        icr: pct(count(|f| f.insufficient), n),
        ser: pct(count(|f| f.syntax_error), n),
        mean_latency_ms: mean(records.iter().map(|r| r.latency_ms as f64).sum()),
        total_cost_usd: format_decimal(&total_cost, 8),
        mean_cost_usd: format_decimal(&mean_cost, 8),
        total_calls,
        mean_calls: mean(total_calls as f64),
        calls_by_stage,
    }
}

/// Everything a run needs besides the dataset.
pub struct ExperimentSetup<'a> {
    pub assets: &'a Assets,
    pub gateway: Arc<Gateway>,
    pub config: PipelineConfig,
    pub clock: LatencyClock,
}

/// Runs every task in order: build a proposal, auto-approve it (feedback
/// is disabled) unless it failed or escalated, and score the result. Each
/// task starts from a fresh copy of the home; memory and preference logs
/// carry over between tasks. Returns the report and the final memory.
pub fn run_experiment(
    dataset: &[DatasetTask],
    mode: RunMode,
    ablation: Ablation,
    setup: &ExperimentSetup<'_>,
    snapshot: Option<TaskMemory>,
) -> Result<(EvalReport, TaskMemory), EvalError> {
    let config = ablation.configure(&setup.config);
    let mut memory = match (mode, config.memory) {
        (_, MemoryScope::Off) | (RunMode::Cold, _) => TaskMemory::new(),
        (RunMode::Warm, _) => snapshot.ok_or(EvalError::MissingMemorySnapshot)?,
    };
    let pipeline = setup.assets.pipeline(config, Arc::clone(&setup.gateway))?;
    let mut prefs = setup.assets.prefs.clone();
    let corpus = Arc::clone(&setup.assets.corpus);
    let mut records = Vec::with_capacity(dataset.len());
    let mut costs = Vec::with_capacity(dataset.len());
    let tag = match mode {
        RunMode::Cold => "cold",
        RunMode::Warm => "warm",
    };
    for task in dataset {
        let session = format!("{tag}-{}-{}", ablation.name(), task.task_id);
        let instruction = match mode {
            RunMode::Warm => task.rephrased_text.as_deref().unwrap_or(&task.instruction_text),
            RunMode::Cold => &task.instruction_text,
        };
        let started = Instant::now();
        let mut home = setup.assets.home.clone();
        let tables = prefs.tables(pipeline.effects(), &setup.assets.bins, &corpus).clone();
        let mut proposal = pipeline.run(
            &session,
            instruction,
            RunContext {
                home: &home,
                memory: &memory,
                tables: &tables,
            },
            &mut |_| {},
        );
        let escalated = proposal.escalation.is_some();
        if proposal.status() == ProposalStatus::AwaitingReview && !escalated {
            if let Err(e) = pipeline.approve(&mut proposal, &mut memory, &mut prefs, &mut home) {
                tracing::warn!(task = %task.task_id, error = %e, "approval failed");
                proposal.notices.push(format!("approval failed: {e}"));
            }
        }
        let wall = started.elapsed().as_millis() as u64;
        let entries = setup.gateway.ledger().session_entries(&session);
        let simulated: u64 = entries.iter().map(|e| e.latency_ms).sum();
        let latency_ms = match setup.clock {
            LatencyClock::Simulated => simulated,
            LatencyClock::Monotonic => simulated + wall,
        };
        let cost = setup.gateway.ledger().session_cost(&session);

        let (commands, queries): (Vec<DeviceCommand>, Vec<AttributeRef>) =
            if proposal.status() == ProposalStatus::Failed {
                (Vec::new(), Vec::new())
            } else {
                (
                    proposal.action_commands().cloned().collect(),
                    proposal.query_targets().cloned().collect(),
                )
            };
        let env = setup.assets.home.descriptors();
        let flags = score(&commands, &queries, &task.ground_truth, &env, &corpus);
        let mut generated: Vec<CommandTriple> = commands.iter().map(DeviceCommand::triple).collect();
        generated.extend(queries.iter().map(AttributeRef::triple));
        records.push(EvalRecord {
            task_id: task.task_id.clone(),
            instruction: instruction.to_string(),
            status: proposal.status(),
            generated,
            flags,
            latency_ms,
            cost_usd: format_decimal(&cost, 8),
            provider_calls: proposal.call_trace.iter().cloned().collect(),
            correction_rounds: proposal.correction_rounds_used,
            escalated,
            failure: proposal.failure.clone(),
        });
        costs.push(cost);
    }
    // Deterministic ordering by task id, as the report contract requires.
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].task_id.cmp(&records[b].task_id));
    let records: Vec<EvalRecord> = order.iter().map(|&i| records[i].clone()).collect();
    let costs: Vec<BigRational> = order.iter().map(|&i| costs[i].clone()).collect();
    let report = EvalReport {
        mode,
        ablation,
        clock: setup.clock,
        aggregate: aggregate(&records, &costs),
        records,
    };
    Ok((report, memory))
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

/// Plain-text table: one aggregate row, then one row per task.
pub fn report_table(report: &EvalReport) -> String {
    let a = &report.aggregate;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:<9} {:>5} {:>12} {:>11} {:>8} {:>8} {:>8} {:>12} {:>12} {:>8}",
        "mode",
        "ablation",
        "tasks",
        "STR(lenient)",
        "STR(strict)",
        "ECR",
        "ICR",
        "SER",
        "latency(ms)",
        "cost(USD)",
        "calls"
    );
    let mode = match report.mode {
        RunMode::Cold => "cold",
        RunMode::Warm => "warm",
    };
    let _ = writeln!(
        out,
        "{:<6} {:<9} {:>5} {:>11.2}% {:>10.2}% {:>7.2}% {:>7.2}% {:>7.2}% {:>12.2} {:>12} {:>8}",
        mode,
        report.ablation.name(),
        a.tasks,
        a.str_lenient,
        a.str_strict,
        a.ecr,
        a.icr,
        a.ser,
        a.mean_latency_ms,
        a.mean_cost_usd,
        a.total_calls
    );
    if !report.records.is_empty() {
        out.push('\n');
        let _ = writeln!(
            out,
            "{:<8} {:<15} {:>7} {:>6} {:>6} {:>6} {:>6} {:>10}",
            "task", "status", "success", "strict", "excess", "insuff", "syntax", "calls"
        );
        for r in &report.records {
            let yes = |b: bool| if b { "yes" } else { "-" };
            let _ = writeln!(
                out,
                "{:<8} {:<15} {:>7} {:>6} {:>6} {:>6} {:>6} {:>10}",
                r.task_id,
                format!("{:?}", r.status),
                yes(r.flags.success),
                yes(r.flags.success_strict),
                yes(r.flags.excessive),
                yes(r.flags.insufficient),
                yes(r.flags.syntax_error),
                r.total_calls()
            );
        }
    }
    out
}
