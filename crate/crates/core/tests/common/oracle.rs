//! Independent oracles shared by the integration suites and the acceptance
//! target. None of them call the code they check except to obtain inputs.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use homeagent_core::domain::{
    AttributeRef, CommandTriple, DeviceCommand, InstructionType, ProposalStatus, Provenance, Scalar, Subtask,
    SubtaskRole, TaskProposal,
};
use homeagent_core::eval::{score, Flags};
use homeagent_core::llm::{
    format_decimal, ChatMessage, ChatProvider, ChatRequest, ChatResponse, Embedder, Gateway, HashEmbedder, LlmError,
    Price, PricingTable, StageTag,
};
use homeagent_core::memory::{MemoryScope, NodeId, TaskMemory};
use homeagent_core::preference::{Level, PreferenceTables};
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::{cmd, s};

pub const TAU_TASK: f64 = 0.85;
pub const TAU_SUBTASK: f64 = 0.80;

pub fn approved(mut p: TaskProposal) -> TaskProposal {
    p.transition(ProposalStatus::AwaitingReview).unwrap();
    p.transition(ProposalStatus::Approved).unwrap();
    p
}

// ---- scoring ----

/// (device, capability, command, valid arguments, broken arguments)
pub type PoolEntry = (&'static str, &'static str, &'static str, Vec<Scalar>, Vec<Scalar>);

pub fn pool() -> Vec<PoolEntry> {
    vec![
        (
            "fan",
            "fanSpeed",
            "setFanSpeed",
            vec![Scalar::Integer(2)],
            vec![Scalar::Integer(9)],
        ),
        ("fan", "switch", "on", vec![], vec![s("max")]),
        (
            "sleep light",
            "switchLevel",
            "setLevel",
            vec![Scalar::Integer(10)],
            vec![Scalar::Integer(150)],
        ),
        (
            "air conditioner",
            "thermostatCoolingSetpoint",
            "setCoolingSetpoint",
            vec![Scalar::Decimal(20.0)],
            vec![Scalar::Decimal(40.0)],
        ),
        (
            "air conditioner",
            "airConditionerMode",
            "setAirConditionerMode",
            vec![s("cool")],
            vec![s("turbo")],
        ),
        (
            "humidifier",
            "humiditySetpoint",
            "setHumiditySetpoint",
            vec![Scalar::Integer(45)],
            vec![Scalar::Integer(95)],
        ),
        (
            "tv",
            "audioVolume",
            "setVolume",
            vec![Scalar::Integer(20)],
            vec![Scalar::Integer(120)],
        ),
        ("tv", "switch", "off", vec![], vec![Scalar::Integer(1)]),
        ("door lock", "lock", "lock", vec![], vec![s("now")]),
        ("blind", "windowShade", "close", vec![], vec![Scalar::Boolean(true)]),
        ("dining light", "switch", "on", vec![], vec![s("bright")]),
        (
            "kitchen light",
            "switchLevel",
            "setLevel",
            vec![Scalar::Integer(60)],
            vec![s("sixty")],
        ),
    ]
}

/// Triples that can never be valid: unknown device or a capability the device lacks.
pub fn never_valid() -> Vec<DeviceCommand> {
    vec![
        cmd("garage door", "lock", "lock", vec![]),
        cmd("speaker", "fanSpeed", "setFanSpeed", vec![Scalar::Integer(1)]),
        cmd("fridge", "switch", "on", vec![]),
    ]
}

fn query(device: &str, capability: &str, attribute: &str) -> AttributeRef {
    AttributeRef {
        device_name: device.into(),
        capability_name: capability.into(),
        attribute_name: attribute.into(),
    }
}

fn triple(device: &str, capability: &str, command: &str) -> CommandTriple {
    CommandTriple::new(device, capability, command)
}

pub struct Case {
    pub commands: Vec<DeviceCommand>,
    pub queries: Vec<AttributeRef>,
    pub gt: Vec<CommandTriple>,
    /// Every generated item as (device, capability, name, valid) for the oracle.
    pub items: Vec<(String, String, String, bool)>,
}

pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let pool = pool();
    let mut picks: Vec<usize> = (0..pool.len()).collect();
    picks.shuffle(rng);
    let gt_n = rng.gen_range(1..=4);
    let gt_idx = &picks[..gt_n];
    let mut case = Case {
        commands: Vec::new(),
        queries: Vec::new(),
        gt: gt_idx
            .iter()
            .map(|&i| triple(pool[i].0, pool[i].1, pool[i].2))
            .collect(),
        items: Vec::new(),
    };
    // Each ground-truth command is emitted (maybe twice, maybe broken) or dropped.
    for &i in gt_idx {
        let (d, c, n, ok, bad) = &pool[i];
        let copies = [0, 1, 1, 1, 2][rng.gen_range(0..5)];
        for _ in 0..copies {
            let valid = rng.gen_bool(0.8);
            case.commands
                .push(cmd(d, c, n, if valid { ok.clone() } else { bad.clone() }));
            case.items.push((d.to_string(), c.to_string(), n.to_string(), valid));
        }
    }
    // Extras outside the ground truth.
    for &i in &picks[gt_n..] {
        if rng.gen_bool(0.12) {
            let (d, c, n, ok, bad) = &pool[i];
            let valid = rng.gen_bool(0.7);
            case.commands
                .push(cmd(d, c, n, if valid { ok.clone() } else { bad.clone() }));
            case.items.push((d.to_string(), c.to_string(), n.to_string(), valid));
        }
    }
    if rng.gen_bool(0.15) {
        let bad = never_valid().choose(rng).unwrap().clone();
        case.items.push((
            bad.device_name.clone(),
            bad.capability_name.clone(),
            bad.command_name.clone(),
            false,
        ));
        case.commands.push(bad);
    }
    // Occasionally a query, valid or not; when valid it may be part of the truth.
    if rng.gen_bool(0.2) {
        let (q, valid) = if rng.gen_bool(0.7) {
            (query("thermostat", "temperatureMeasurement", "temperature"), true)
        } else {
            (query("thermostat", "lock", "lock"), false)
        };
        if valid && rng.gen_bool(0.5) {
            case.gt.push(q.triple());
        }
        case.items.push((
            q.device_name.clone(),
            q.capability_name.clone(),
            q.attribute_name.clone(),
            valid,
        ));
        case.queries.push(q);
    }
    case.commands.shuffle(rng);
    case
}

/// Plain list scans, no sets.
pub fn metric_oracle(case: &Case) -> Flags {
    let key = |t: &CommandTriple| (t.device.clone(), t.capability.clone(), t.command.clone());
    let gt: Vec<(String, String, String)> = case.gt.iter().map(key).collect();
    let same = |item: &(String, String, String, bool), g: &(String, String, String)| {
        item.0 == g.0 && item.1 == g.1 && item.2 == g.2
    };
    let mut insufficient = false;
    for g in &gt {
        if !case.items.iter().any(|it| same(it, g)) {
            insufficient = true;
        }
    }
    let mut excessive = false;
    let mut syntax_error = false;
    let mut gt_items_valid = true;
    for it in &case.items {
        let in_gt = gt.iter().any(|g| same(it, g));
        if !in_gt {
            excessive = true;
        }
        if !it.3 {
            syntax_error = true;
            if in_gt {
                gt_items_valid = false;
            }
        }
    }
    let success = !insufficient && gt_items_valid;
    Flags {
        success,
        success_strict: success && !excessive,
        excessive,
        insufficient,
        syntax_error,
    }
}

/// Scores `n` random pairs; returns the per-pair flags and the number of
/// pairs where `score` and the oracle disagree.
pub fn metric_trials(seed: u64, n: usize) -> (Vec<Flags>, usize) {
    let assets = super::assets();
    let env = assets.home.descriptors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flags = Vec::with_capacity(n);
    let mut mismatches = 0;
    for _ in 0..n {
        let case = random_case(&mut rng);
        let got = score(&case.commands, &case.queries, &case.gt, &env, &assets.corpus);
        mismatches += usize::from(got != metric_oracle(&case));
        flags.push(got);
    }
    (flags, mismatches)
}

// ---- preference tally ----

pub type OracleTable = BTreeMap<&'static str, (Level, u32)>;

fn level_of(lo: f64, hi: f64, v: f64) -> Level {
    if v < lo {
        Level::Low
    } else if v > hi {
        Level::High
    } else {
        Level::Medium
    }
}

/// Level observations of one raw command, per the bin configuration.
fn observations(cap: &str, command: &str, value: Option<f64>) -> Vec<(&'static str, Level)> {
    match (cap, command, value) {
        ("thermostatCoolingSetpoint", "setCoolingSetpoint", Some(v)) => vec![("temperature", level_of(21.0, 25.0, v))],
        ("switchLevel", "setLevel", Some(v)) => vec![("brightness", level_of(34.0, 66.0, v))],
        ("humiditySetpoint", "setHumiditySetpoint", Some(v)) => vec![("humidity", level_of(35.0, 55.0, v))],
        // Speed range 0..5 in thirds, inverted: a fast fan means a cool room.
        ("fanSpeed", "setFanSpeed", Some(v)) => {
            let l = if v < 5.0 / 3.0 {
                Level::High
            } else if v > 10.0 / 3.0 {
                Level::Low
            } else {
                Level::Medium
            };
            vec![("temperature", l)]
        }
        ("audioVolume", "setVolume", Some(v)) => vec![("noise", level_of(100.0 / 3.0, 200.0 / 3.0, v))],
        ("audioVolume", "mute", _) => vec![("noise", Level::Low)],
        _ => vec![],
    }
}

/// +1 for security-raising, -1 for security-lowering actions.
fn security(device: &str, cap: &str, command: &str) -> Option<i8> {
    match (device, cap, command) {
        (_, "lock", "lock") => Some(1),
        (_, "lock", "unlock") => Some(-1),
        ("home camera", "switch", "on") => Some(1),
        ("home camera", "switch", "off") => Some(-1),
        ("smart window", "windowShade", "open") => Some(-1),
        _ => None,
    }
}

#[derive(Default)]
struct OracleTally {
    counts: BTreeMap<&'static str, [u32; 3]>,
    up: u32,
    total: u32,
}

impl OracleTally {
    fn table(&self) -> OracleTable {
        let mut t = OracleTable::new();
        for (p, c) in &self.counts {
            let top = *c.iter().max().unwrap();
            let winners: Vec<usize> = (0..3).filter(|i| c[*i] == top).collect();
            let level = if winners.len() > 1 {
                Level::Medium
            } else {
                [Level::Low, Level::Medium, Level::High][winners[0]]
            };
            t.insert(p, (level, c.iter().sum()));
        }
        if self.total > 0 {
            let frac = self.up as f64 / self.total as f64;
            t.insert("security", (level_of(1.0 / 3.0, 2.0 / 3.0, frac), self.total));
        }
        t
    }
}

pub fn preference_oracle(raw: &str) -> BTreeMap<String, OracleTable> {
    let mut tallies: BTreeMap<String, OracleTally> = BTreeMap::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).unwrap();
        let ctx = v["context_keyword"].as_str().unwrap().to_lowercase();
        let dev = &v["command"]["device"];
        let device = dev["name"].as_str().unwrap();
        let cap = dev["capability"]["name"].as_str().unwrap();
        let command = dev["capability"]["command"].as_str().unwrap();
        let value = dev["capability"]["value"]
            .as_object()
            .and_then(|o| o.values().next())
            .and_then(Value::as_f64);
        let mut targets = vec!["normal".to_string()];
        if ctx != "normal" {
            targets.push(ctx);
        }
        for t in targets {
            let tally = tallies.entry(t).or_default();
            for (p, l) in observations(cap, command, value) {
                let idx = match l {
                    Level::Low => 0,
                    Level::Medium => 1,
                    Level::High => 2,
                };
                tally.counts.entry(p).or_default()[idx] += 1;
            }
            if let Some(s) = security(device, cap, command) {
                tally.total += 1;
                tally.up += u32::from(s > 0);
            }
        }
    }
    tallies.into_iter().map(|(k, t)| (k, t.table())).collect()
}

/// The extracted tables in the oracle's shape.
pub fn tables_as_oracle(tables: &PreferenceTables) -> BTreeMap<String, OracleTable> {
    tables
        .iter()
        .map(|(ctx, t)| {
            let entries = t
                .levels
                .iter()
                .map(|(p, l)| (p.name(), (*l, t.support[p])))
                .collect::<OracleTable>();
            (ctx.clone(), entries)
        })
        .collect()
}

// ---- memory recall ----

/// Fixed random unit vectors per text, in a low dimension so that
/// near-threshold similarities are common.
struct TableEmbedder(HashMap<String, Vec<f64>>);

impl Embedder for TableEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        self.0.get(text).cloned().ok_or(LlmError::EmptyText)
    }
}

const DIM: usize = 6;

fn unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn near(rng: &mut ChaCha8Rng, base: &[f64], noise: f64) -> Vec<f64> {
    let v: Vec<f64> = base.iter().map(|x| x + rng.gen_range(-noise..noise)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Best candidate by (similarity desc, id asc) among those at or above tau.
fn oracle_best(cands: Vec<(NodeId, &[f64])>, q: &[f64], tau: f64) -> Option<NodeId> {
    let mut scored: Vec<(NodeId, f64)> = cands
        .into_iter()
        .map(|(id, e)| (id, oracle_cos(q, e)))
        .filter(|(_, c)| *c >= tau)
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.first().map(|(id, _)| *id)
}

const DEVICES: [(&str, &str, &str); 4] = [
    ("fan", "switch", "on"),
    ("tv", "switch", "off"),
    ("speaker", "switch", "on"),
    ("home camera", "switch", "on"),
];

fn random_graph(seed: u64) -> (TaskMemory, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = super::assets().corpus;
    let mut table = HashMap::new();
    let pool: Vec<(String, usize)> = (0..500)
        .map(|i| (format!("subtask {i}"), rng.gen_range(0..DEVICES.len())))
        .collect();
    for (text, _) in &pool {
        table.insert(text.clone(), unit(&mut rng));
    }
    let mut mem = TaskMemory::new();
    let mut task_no = 0;
    while {
        let c = mem.counts();
        c.tasks + c.subtasks + c.contexts < 1000
    } {
        task_no += 1;
        let text = format!("task {task_no}");
        table.insert(text.clone(), unit(&mut rng));
        let mut p = TaskProposal::new(format!("p{task_no}"), &text, InstructionType::DirectControl);
        p.context_keyword = ["sleeping", "movie", "normal"][rng.gen_range(0..3)].into();
        for _ in 0..rng.gen_range(1..=4) {
            let (desc, dev) = &pool[rng.gen_range(0..pool.len())];
            let (device, cap, command) = DEVICES[*dev];
            let mut st = Subtask::new(desc.clone(), device, Provenance::FreshlyDecomposed);
            st.commands = vec![cmd(device, cap, command, vec![])];
            p.subtasks.push(st);
        }
        let embedder = TableEmbedder(table.clone());
        mem.commit_proposal(
            &approved(p),
            &embedder,
            TAU_TASK,
            TAU_SUBTASK,
            MemoryScope::Full,
            &corpus,
        )
        .unwrap();
    }
    mem.check_integrity().unwrap();
    (mem, rng)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RecallStats {
    pub queries: usize,
    pub hits: usize,
    pub mismatches: usize,
    pub min_nodes: usize,
}

/// Builds a random graph of at least 1000 nodes per seed and compares 600
/// task and 600 subtask recalls each against a linear scan.
pub fn recall_trials(seeds: &[u64]) -> RecallStats {
    let mut stats = RecallStats {
        min_nodes: usize::MAX,
        ..RecallStats::default()
    };
    for &seed in seeds {
        let (mem, mut rng) = random_graph(seed);
        let c = mem.counts();
        stats.min_nodes = stats.min_nodes.min(c.tasks + c.subtasks + c.contexts);
        let tasks: Vec<_> = mem.tasks().collect();
        let subtasks: Vec<_> = mem.subtasks().collect();
        for i in 0..600 {
            let tau = rng.gen_range(0.5..0.97);
            let q = match i % 3 {
                0 => unit(&mut rng),
                1 => {
                    let base = &tasks[rng.gen_range(0..tasks.len())].embedding;
                    near(&mut rng, base, 0.3)
                }
                _ => {
                    let base = &subtasks[rng.gen_range(0..subtasks.len())].embedding;
                    near(&mut rng, base, 0.3)
                }
            };
            stats.queries += 2;

            let want = oracle_best(
                tasks.iter().map(|t| (t.node_id, t.embedding.as_slice())).collect(),
                &q,
                tau,
            );
            let got = mem.match_task(&q, tau).map(|(t, _)| t.node_id);
            stats.mismatches += usize::from(want != got);
            stats.hits += usize::from(got.is_some());

            let (device, _, _) = DEVICES[rng.gen_range(0..DEVICES.len())];
            let cands = subtasks
                .iter()
                .filter(|n| n.device_name == device && n.role == SubtaskRole::Action)
                .map(|n| (n.node_id, n.embedding.as_slice()))
                .collect();
            let want = oracle_best(cands, &q, tau);
            let got = mem
                .match_subtask(&q, device, SubtaskRole::Action, tau)
                .map(|(n, _)| n.node_id);
            stats.mismatches += usize::from(want != got);
            stats.hits += usize::from(got.is_some());
            // Role filtering: nothing was stored as a query subtask.
            stats.mismatches += usize::from(mem.match_subtask(&q, device, SubtaskRole::Query, -1.0).is_some());
        }
    }
    stats
}

// ---- cost ledger ----

pub const SCALE_DIGITS: u32 = 10;

/// Answers `Request: model|input|output` with exactly those token counts.
struct Metered;

impl ChatProvider for Metered {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let key = req.key();
        let parts: Vec<&str> = key.split('|').collect();
        Ok(ChatResponse {
            text: "{}".into(),
            model_id: parts[0].to_string(),
            input_tokens: parts[1].parse().unwrap(),
            output_tokens: parts[2].parse().unwrap(),
            latency_ms: 1,
        })
    }
}

/// Renders `units` × 1e-4 as a decimal string, e.g. 25000 → "2.5000".
fn price_text(units: u64) -> String {
    format!("{}.{:04}", units / 10_000, units % 10_000)
}

/// Independent rendering of `n` × 1e-10 with trailing zeros trimmed to two places.
pub fn oracle_decimal(n: u128) -> String {
    let scale = 10u128.pow(SCALE_DIGITS);
    let mut frac = format!("{:0>10}", n % scale);
    while frac.len() > 2 && frac.ends_with('0') {
        frac.pop();
    }
    format!("{}.{frac}", n / scale)
}

fn scaled(r: &BigRational) -> Result<BigInt, String> {
    let v = r * BigRational::from_integer(BigInt::from(10u64).pow(SCALE_DIGITS));
    if v.is_integer() {
        Ok(v.to_integer())
    } else {
        Err(format!("cost {r} is not a multiple of 1e-10"))
    }
}

const STAGES: [StageTag; 8] = StageTag::ALL;

/// One random price table and call sequence; compares the ledger against
/// integer arithmetic at 1e-10 USD.
pub fn ledger_trial(rng: &mut ChaCha8Rng) -> Result<(), String> {
    // Price table in units of 1e-4 USD per million tokens.
    let mut oracle_prices: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut table = PricingTable::default();
    let models = ["alpha", "beta", "gamma"];
    for m in &models[..rng.gen_range(1..=3)] {
        let p = (rng.gen_range(0..400_000), rng.gen_range(0..1_200_000));
        table.insert(*m, Price::per_million(&price_text(p.0), &price_text(p.1)).unwrap());
        oracle_prices.insert(m.to_string(), p);
    }
    if rng.gen_bool(0.5) {
        let p = (rng.gen_range(0..50_000), rng.gen_range(0..50_000));
        table.insert(
            "default",
            Price::per_million(&price_text(p.0), &price_text(p.1)).unwrap(),
        );
        oracle_prices.insert("default".into(), p);
    }
    let gateway = Gateway::new(Arc::new(Metered), Arc::new(HashEmbedder), table);

    let mut total: u128 = 0;
    let mut per_session: BTreeMap<String, u128> = BTreeMap::new();
    let mut calls: BTreeMap<(String, StageTag), u32> = BTreeMap::new();
    let mut tokens = (0u64, 0u64);
    for _ in 0..rng.gen_range(0..40) {
        let model = ["alpha", "beta", "gamma", "unpriced"][rng.gen_range(0..4)];
        let input: u64 = rng.gen_range(0..200_000);
        let output: u64 = rng.gen_range(0..50_000);
        let session = format!("s{}", rng.gen_range(0..3));
        let stage = STAGES[rng.gen_range(0..STAGES.len())];
        let req = ChatRequest::new(
            stage,
            vec![ChatMessage::user(format!("Request: {model}|{input}|{output}"))],
        );
        gateway.chat(&session, req).map_err(|e| e.to_string())?;

        let (pi, po) = oracle_prices
            .get(model)
            .or_else(|| oracle_prices.get("default"))
            .copied()
            .unwrap_or((0, 0));
        let cost = input as u128 * pi as u128 + output as u128 * po as u128;
        total += cost;
        *per_session.entry(session.clone()).or_default() += cost;
        *calls.entry((session, stage)).or_default() += 1;
        tokens.0 += input;
        tokens.1 += output;
    }

    let ledger = gateway.ledger();
    let got = ledger.total_cost();
    check(scaled(&got)? == BigInt::from(total), || {
        format!("total {got} != {total}e-10")
    })?;
    let text = format_decimal(&got, SCALE_DIGITS as usize);
    check(text == oracle_decimal(total), || {
        format!("rendered {text} != {}", oracle_decimal(total))
    })?;
    check(ledger.total_tokens() == tokens, || {
        format!("tokens {:?} != {tokens:?}", ledger.total_tokens())
    })?;
    for (session, cost) in &per_session {
        let got = scaled(&ledger.session_cost(session))?;
        check(got == BigInt::from(*cost), || format!("{session}: {got} != {cost}"))?;
        let trace: BTreeMap<StageTag, u32> = gateway.call_trace(session).into_iter().collect();
        let expected: BTreeMap<StageTag, u32> = calls
            .iter()
            .filter(|((s, _), _)| s == session)
            .map(|((_, stage), n)| (*stage, *n))
            .collect();
        check(trace == expected, || {
            format!("{session}: trace {trace:?} != {expected:?}")
        })?;
    }
    Ok(())
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}
