//! Device-agnostic preferences over six environmental properties.
//!
//! Interaction logs (context keyword + concrete command) are binned into
//! low/medium/high observations per property; a table per context records
//! the majority level and its support. Commands reach properties through an
//! effect map, which is how a preference learned on one device (an air
//! conditioner's setpoint) transfers to another (a fan's speed).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capability::SchemaCorpus;
use crate::domain::{DeviceCommand, ParamValue, TaskProposal};

pub const NORMAL_CONTEXT: &str = "normal";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreferenceError {
    #[error("no interaction logs to extract preferences from")]
    EmptyLogs,
    #[error("unparseable preference table: {0}")]
    UnparseableTable(String),
    #[error("preference tables lack the `normal` table")]
    MissingNormalTable,
    #[error("configuration: {0}")]
    Config(String),
    #[error("interaction log line {line}: {message}")]
    Log { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvProperty {
    AirQuality,
    Brightness,
    Humidity,
    Noise,
    Temperature,
    Security,
}

impl EnvProperty {
    pub const ALL: [EnvProperty; 6] = [
        EnvProperty::AirQuality,
        EnvProperty::Brightness,
        EnvProperty::Humidity,
        EnvProperty::Noise,
        EnvProperty::Temperature,
        EnvProperty::Security,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvProperty::AirQuality => "air_quality",
            EnvProperty::Brightness => "brightness",
            EnvProperty::Humidity => "humidity",
            EnvProperty::Noise => "noise",
            EnvProperty::Temperature => "temperature",
            EnvProperty::Security => "security",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for EnvProperty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Medium,
    High,
}

impl Level {
    fn inverted(self) -> Level {
        match self {
            Level::Low => Level::High,
            Level::Medium => Level::Medium,
            Level::High => Level::Low,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increases,
    Decreases,
}

/// One effect-map row. `devices` restricts the row to named devices (for
/// generic capabilities such as `switch`, whose effect depends on what is
/// being switched); empty means any device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEntry {
    pub capability: String,
    pub command: String,
    pub property: EnvProperty,
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub devices: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EffectMap {
    pub effects: Vec<EffectEntry>,
}

impl EffectMap {
    pub fn parse(text: &str) -> Result<Self, PreferenceError> {
        toml::from_str(text).map_err(|e| PreferenceError::Config(format!("effect map: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PreferenceError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PreferenceError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    /// (property, direction) pairs a command affects, deduplicated, in map order.
    pub fn effects_of(&self, cmd: &DeviceCommand) -> Vec<(EnvProperty, Direction)> {
        let mut out = Vec::new();
        for e in &self.effects {
            let applies = e.capability == cmd.capability_name
                && e.command == cmd.command_name
                && (e.devices.is_empty() || e.devices.contains(&cmd.device_name));
            if applies && !out.contains(&(e.property, e.direction)) {
                out.push((e.property, e.direction));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionLogEntry {
    pub tick: u64,
    pub context_keyword: String,
    pub command: DeviceCommand,
}

/// How one kind of command argument turns into a level observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRule {
    pub capability: String,
    pub command: String,
    pub property: EnvProperty,
    /// Argument position; absent for commands that imply a fixed level.
    #[serde(default)]
    pub argument: Option<usize>,
    #[serde(default)]
    pub low_below: Option<f64>,
    #[serde(default)]
    pub high_above: Option<f64>,
    /// Split the argument's schema range into thirds instead of fixed cut points.
    #[serde(default)]
    pub tertiles: bool,
    /// Higher argument means a lower property level (fan speed vs temperature).
    #[serde(default)]
    pub inverse: bool,
    /// Level implied by an argument-less command (e.g. mute → low noise).
    #[serde(default)]
    pub level: Option<Level>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinConfig {
    pub observations: Vec<ObservationRule>,
}

impl BinConfig {
    pub fn parse(text: &str) -> Result<Self, PreferenceError> {
        toml::from_str(text).map_err(|e| PreferenceError::Config(format!("bin config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PreferenceError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PreferenceError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTable {
    pub context_keyword: String,
    pub levels: BTreeMap<EnvProperty, Level>,
    pub support: BTreeMap<EnvProperty, u32>,
}

impl PreferenceTable {
    pub fn empty(context: &str) -> Self {
        PreferenceTable {
            context_keyword: context.to_string(),
            levels: BTreeMap::new(),
            support: BTreeMap::new(),
        }
    }

    pub fn level(&self, p: EnvProperty) -> Option<Level> {
        self.levels.get(&p).copied()
    }
}

pub type PreferenceTables = BTreeMap<String, PreferenceTable>;

/// Lowercase, trimmed keyword; empty becomes `normal`.
pub fn normalize_keyword(k: &str) -> String {
    let k = k.trim().trim_matches('"').trim().to_lowercase();
    if k.is_empty() {
        NORMAL_CONTEXT.to_string()
    } else {
        k
    }
}

/// Majority level; any tie for the top count resolves to medium.
pub fn majority(counts: &BTreeMap<Level, u32>) -> Option<Level> {
    let top = *counts.values().max()?;
    if top == 0 {
        return None;
    }
    let leaders: Vec<Level> = counts.iter().filter(|(_, c)| **c == top).map(|(l, _)| *l).collect();
    Some(if leaders.len() == 1 { leaders[0] } else { Level::Medium })
}

fn bin_value(rule: &ObservationRule, value: f64, corpus: &SchemaCorpus) -> Option<Level> {
    let level = if rule.tertiles {
        let spec = corpus
            .get(&rule.capability)?
            .command(&rule.command)?
            .arguments
            .get(rule.argument?)?;
        let (lo, hi) = (spec.min?, spec.max?);
        let span = hi - lo;
        let offset = value - lo;
        if 3.0 * offset < span {
            Level::Low
        } else if 3.0 * offset > 2.0 * span {
            Level::High
        } else {
            Level::Medium
        }
    } else if rule.low_below.is_some_and(|b| value < b) {
        Level::Low
    } else if rule.high_above.is_some_and(|b| value > b) {
        Level::High
    } else {
        Level::Medium
    };
    Some(if rule.inverse { level.inverted() } else { level })
}

/// Level observations a single command contributes.
fn observe(cmd: &DeviceCommand, config: &BinConfig, corpus: &SchemaCorpus) -> Vec<(EnvProperty, Level)> {
    config
        .observations
        .iter()
        .filter(|r| r.capability == cmd.capability_name && r.command == cmd.command_name)
        .filter_map(|r| match r.argument {
            None => r.level.map(|l| (r.property, l)),
            Some(i) => {
                let v = cmd.arguments.get(i).and_then(ParamValue::as_concrete)?.as_f64()?;
                bin_value(r, v, corpus).map(|l| (r.property, l))
            }
        })
        .collect()
}

#[derive(Default)]
struct Tally {
    bins: BTreeMap<EnvProperty, BTreeMap<Level, u32>>,
    security_up: u32,
    security_total: u32,
}

impl Tally {
    fn add(&mut self, cmd: &DeviceCommand, effects: &EffectMap, config: &BinConfig, corpus: &SchemaCorpus) {
        for (p, l) in observe(cmd, config, corpus) {
            *self.bins.entry(p).or_default().entry(l).or_default() += 1;
        }
        for (p, d) in effects.effects_of(cmd) {
            if p == EnvProperty::Security {
                self.security_total += 1;
                if d == Direction::Increases {
                    self.security_up += 1;
                }
            }
        }
    }

    fn into_table(self, context: &str) -> PreferenceTable {
        let mut table = PreferenceTable::empty(context);
        for (p, counts) in &self.bins {
            if let Some(level) = majority(counts) {
                table.levels.insert(*p, level);
                table.support.insert(*p, counts.values().sum());
            }
        }
        if self.security_total > 0 {
            let (up, n) = (self.security_up, self.security_total);
            let level = if 3 * up < n {
                Level::Low
            } else if 3 * up > 2 * n {
                Level::High
            } else {
                Level::Medium
            };
            table.levels.insert(EnvProperty::Security, level);
            table.support.insert(EnvProperty::Security, n);
        }
        table
    }
}

/// Deterministic extractor: one table per observed context plus `normal`
/// over all logs.
pub fn extract_baseline(
    logs: &[InteractionLogEntry],
    effects: &EffectMap,
    config: &BinConfig,
    corpus: &SchemaCorpus,
) -> Result<PreferenceTables, PreferenceError> {
    if logs.is_empty() {
        return Err(PreferenceError::EmptyLogs);
    }
    let mut per_context: BTreeMap<String, Tally> = BTreeMap::new();
    let mut overall = Tally::default();
    for entry in logs {
        let ctx = normalize_keyword(&entry.context_keyword);
        if ctx != NORMAL_CONTEXT {
            per_context
                .entry(ctx)
                .or_default()
                .add(&entry.command, effects, config, corpus);
        }
        overall.add(&entry.command, effects, config, corpus);
    }
    let mut tables: PreferenceTables = per_context
        .into_iter()
        .map(|(ctx, tally)| (ctx.clone(), tally.into_table(&ctx)))
        .collect();
    tables.insert(NORMAL_CONTEXT.to_string(), overall.into_table(NORMAL_CONTEXT));
    Ok(tables)
}

/// Properties each context has evidence for, via the effect map. Used to
/// strip fabricated entries from model-produced tables.
pub fn observed_properties(
    logs: &[InteractionLogEntry],
    effects: &EffectMap,
) -> BTreeMap<String, BTreeSet<EnvProperty>> {
    let mut out: BTreeMap<String, BTreeSet<EnvProperty>> = BTreeMap::new();
    for entry in logs {
        let props: Vec<EnvProperty> = effects.effects_of(&entry.command).into_iter().map(|(p, _)| p).collect();
        let ctx = normalize_keyword(&entry.context_keyword);
        out.entry(ctx).or_default().extend(props.iter().copied());
        out.entry(NORMAL_CONTEXT.to_string()).or_default().extend(props);
    }
    out
}

/// Parses a model-produced table set. Accepts
/// `{"<ctx>": {"<property>": "low"}}` or
/// `{"<ctx>": {"<property>": {"level": "low", "support": 3}}}`, optionally
/// wrapped in `{"tables": ...}`. Entries without log evidence are dropped.
pub fn parse_llm_tables(
    value: &serde_json::Value,
    logs: &[InteractionLogEntry],
    effects: &EffectMap,
) -> Result<PreferenceTables, PreferenceError> {
    let bad = |m: String| PreferenceError::UnparseableTable(m);
    let root = value.get("tables").unwrap_or(value);
    let obj = root
        .as_object()
        .ok_or_else(|| bad("expected an object of contexts".into()))?;
    let evidence = observed_properties(logs, effects);
    let mut tables = PreferenceTables::new();
    for (ctx, props) in obj {
        let ctx = normalize_keyword(ctx);
        let props = props
            .as_object()
            .ok_or_else(|| bad(format!("context `{ctx}` is not an object")))?;
        let mut table = PreferenceTable::empty(&ctx);
        for (name, v) in props {
            let p = EnvProperty::from_name(name).ok_or_else(|| bad(format!("unknown property `{name}`")))?;
            let (level, support) = match v {
                serde_json::Value::String(_) => (v.clone(), None),
                serde_json::Value::Object(o) => (
                    o.get("level").cloned().unwrap_or_default(),
                    o.get("support").and_then(serde_json::Value::as_u64),
                ),
                _ => return Err(bad(format!("property `{name}` has no level"))),
            };
            let level: Level = serde_json::from_value(level).map_err(|e| bad(format!("`{name}`: {e}")))?;
            let has_evidence = evidence.get(&ctx).is_some_and(|s| s.contains(&p));
            if has_evidence {
                table.levels.insert(p, level);
                table.support.insert(p, support.unwrap_or(1) as u32);
            }
        }
        tables.insert(ctx, table);
    }
    if !tables.contains_key(NORMAL_CONTEXT) {
        return Err(PreferenceError::MissingNormalTable);
    }
    Ok(tables)
}

/// Exact normalized match, else the `normal` table.
pub fn select_table<'t>(tables: &'t PreferenceTables, keyword: &str) -> Result<&'t PreferenceTable, PreferenceError> {
    let key = normalize_keyword(keyword);
    tables
        .get(&key)
        .or_else(|| tables.get(NORMAL_CONTEXT))
        .ok_or(PreferenceError::MissingNormalTable)
}

/// A preference the Refine stage should honor for one subtask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PropertyTarget {
    pub property: EnvProperty,
    pub level: Level,
    pub direction: Direction,
}

/// Pairs every affected property of the commands with the table's level;
/// properties the table has no evidence for are skipped.
pub fn property_targets(
    commands: &[DeviceCommand],
    effects: &EffectMap,
    table: &PreferenceTable,
) -> Vec<PropertyTarget> {
    let mut out = Vec::new();
    for cmd in commands {
        for (property, direction) in effects.effects_of(cmd) {
            if let Some(level) = table.level(property) {
                let t = PropertyTarget {
                    property,
                    level,
                    direction,
                };
                if !out.contains(&t) {
                    out.push(t);
                }
            }
        }
    }
    out
}

/// Append-only interaction log with lazily rebuilt tables.
#[derive(Debug, Clone, Default)]
pub struct PreferenceStore {
    logs: Vec<InteractionLogEntry>,
    built: Option<(usize, PreferenceTables)>,
}

impl PreferenceStore {
    pub fn new(logs: Vec<InteractionLogEntry>) -> Self {
        PreferenceStore { logs, built: None }
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, PreferenceError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PreferenceError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Ok(Self::new(parse_log_jsonl(&text)?))
    }

    pub fn logs(&self) -> &[InteractionLogEntry] {
        &self.logs
    }

    pub fn export_jsonl(&self) -> String {
        self.logs
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }

    fn next_tick(&self) -> u64 {
        self.logs.last().map_or(1, |e| e.tick + 1)
    }

    /// Logs the final concrete action commands of an approved proposal
    /// under its context keyword.
    pub fn append_feedback_logs(&mut self, proposal: &TaskProposal) -> Vec<InteractionLogEntry> {
        let context = normalize_keyword(&proposal.context_keyword);
        let mut added = Vec::new();
        let concrete = proposal.action_commands().filter(|c| c.is_concrete());
        for (tick, cmd) in (self.next_tick()..).zip(concrete) {
            let e = InteractionLogEntry {
                tick,
                context_keyword: context.clone(),
                command: cmd.clone(),
            };
            added.push(e.clone());
            self.logs.push(e);
        }
        added
    }

    /// Baseline tables, rebuilt only when logs changed since the last build.
    /// With no logs at all, the only table is an empty `normal`.
    pub fn tables(&mut self, effects: &EffectMap, config: &BinConfig, corpus: &SchemaCorpus) -> &PreferenceTables {
        let stale = self.built.as_ref().is_none_or(|(n, _)| *n != self.logs.len());
        if stale {
            let tables = match extract_baseline(&self.logs, effects, config, corpus) {
                Ok(t) => t,
                Err(_) => {
                    PreferenceTables::from([(NORMAL_CONTEXT.to_string(), PreferenceTable::empty(NORMAL_CONTEXT))])
                }
            };
            self.built = Some((self.logs.len(), tables));
        }
        &self.built.as_ref().expect("just built").1
    }

    /// Installs externally extracted tables (e.g. from the model) for the
    /// current log snapshot.
    pub fn set_tables(&mut self, tables: PreferenceTables) {
        self.built = Some((self.logs.len(), tables));
    }
}

pub fn parse_log_jsonl(text: &str) -> Result<Vec<InteractionLogEntry>, PreferenceError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PreferenceError::Log {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
