//! Deterministic virtual smart home.
//!
//! Devices hold attribute maps whose values always satisfy their schema.
//! Commands mutate attributes through the effects declared in the capability
//! corpus. Trigger-action rules are edge-triggered conjunctions evaluated
//! after every injected event; rule-fired actions cascade breadth-first up to
//! a configurable depth. Time is a logical tick incremented per log record.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::capability::{
    resolve_command, validate_command, validate_predicate, EffectSource, SchemaCorpus, ValueSpec, Violation,
};
use crate::domain::{
    DeviceCommand, DeviceDescriptor, ParamKind, ParamValue, Scalar, TriggerActionRule, TriggerPredicate,
};

pub const DEFAULT_CASCADE_CAP: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomeError {
    #[error("environment file: {0}")]
    Load(String),
    #[error("device `{device}` lists unknown capability `{capability}`")]
    UnknownCapability { device: String, capability: String },
    #[error("device `{device}` declares attribute `{attribute}` twice")]
    DuplicateAttribute { device: String, attribute: String },
    #[error("device `{device}` listed twice")]
    DuplicateDevice { device: String },
    #[error("device `{device}` capability `{capability}` listed twice")]
    DuplicateCapability { device: String, capability: String },
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("device `{device}` has no attribute `{attribute}`")]
    UnknownAttribute { device: String, attribute: String },
    #[error("invalid value for `{device}.{attribute}`: {reason}")]
    InvalidValue {
        device: String,
        attribute: String,
        reason: String,
    },
    #[error("rule actions are invalid: {}", join(.0))]
    InvalidRuleActions(Vec<Violation>),
    #[error("rule triggers are invalid: {}", join(.0))]
    InvalidRuleTriggers(Vec<Violation>),
    #[error("rule must have at least one trigger and one action")]
    EmptyRule,
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ExecutionError {
    Violations { violations: Vec<Violation> },
    DeviceUnavailable { device: String },
    Fault { message: String },
}

impl std::fmt::Display for ExecutionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExecutionError::Violations { violations } => f.write_str(&join(violations)),
            ExecutionError::DeviceUnavailable { device } => write!(f, "device `{device}` is unavailable"),
            ExecutionError::Fault { message } => write!(f, "device fault: {message}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok { changes: BTreeMap<String, Scalar> },
    Error(ExecutionError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Cause {
    Direct,
    RuleFired { rule_id: String },
}

/// Result of running one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub tick: u64,
    pub command: DeviceCommand,
    pub outcome: Outcome,
    pub cause: Cause,
}

impl ExecutionRecord {
    pub fn is_error(&self) -> bool {
        matches!(self.outcome, Outcome::Error(_))
    }

    pub fn error(&self) -> Option<&ExecutionError> {
        match &self.outcome {
            Outcome::Error(e) => Some(e),
            Outcome::Ok { .. } => None,
        }
    }
}

/// Everything that happens in the home, in tick order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Execution(ExecutionRecord),
    Event {
        tick: u64,
        device: String,
        attribute: String,
        value: Scalar,
    },
    RuleInstalled {
        tick: u64,
        rule_id: String,
        replaced: bool,
    },
    RuleRemoved {
        tick: u64,
        rule_id: String,
    },
    Availability {
        tick: u64,
        device: String,
        available: bool,
    },
    CycleCap {
        tick: u64,
        depth: usize,
        pending_rules: Vec<String>,
    },
}

impl LogRecord {
    pub fn tick(&self) -> u64 {
        match self {
            LogRecord::Execution(r) => r.tick,
            LogRecord::Event { tick, .. }
            | LogRecord::RuleInstalled { tick, .. }
            | LogRecord::RuleRemoved { tick, .. }
            | LogRecord::Availability { tick, .. }
            | LogRecord::CycleCap { tick, .. } => *tick,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeState {
    pub capability: String,
    pub value: Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceState {
    pub descriptor: DeviceDescriptor,
    pub attributes: BTreeMap<String, AttributeState>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstalledRule {
    pub rule: TriggerActionRule,
    /// Conjunction value at the last evaluation; firing needs false → true.
    pub holds: bool,
}

/// Injected runtime failure for matching commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub device: String,
    #[serde(default)]
    pub command: Option<String>,
    pub message: String,
    /// Number of matching executions that fail; `None` means forever.
    #[serde(default)]
    pub remaining: Option<u32>,
}

#[derive(Deserialize)]
struct RawEnvironment {
    #[serde(default)]
    name: String,
    devices: Vec<RawDevice>,
}

#[derive(Deserialize)]
struct RawDevice {
    device_name: String,
    #[serde(default)]
    room: String,
    capabilities: Vec<String>,
    #[serde(default)]
    attributes: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct HomeState {
    name: String,
    corpus: Arc<SchemaCorpus>,
    devices: BTreeMap<String, DeviceState>,
    rules: BTreeMap<String, InstalledRule>,
    log: Vec<LogRecord>,
    clock: u64,
    cascade_cap: usize,
    faults: Vec<Fault>,
}

fn fallback_initial(spec: &ValueSpec) -> Scalar {
    if let Some(d) = &spec.default {
        return d.clone();
    }
    match spec.kind {
        ParamKind::String => Scalar::String(
            spec.enum_values
                .as_ref()
                .and_then(|e| e.first())
                .cloned()
                .unwrap_or_default(),
        ),
        ParamKind::Boolean => Scalar::Boolean(false),
        ParamKind::Integer => Scalar::Integer(spec.min.unwrap_or(0.0) as i64),
        ParamKind::Decimal => Scalar::Decimal(spec.min.unwrap_or(0.0)),
    }
}

impl HomeState {
    pub fn load(path: impl AsRef<Path>, corpus: Arc<SchemaCorpus>) -> Result<Self, HomeError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| HomeError::Load(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text, corpus)
    }

    pub fn from_json(text: &str, corpus: Arc<SchemaCorpus>) -> Result<Self, HomeError> {
        let raw: RawEnvironment = serde_json::from_str(text).map_err(|e| HomeError::Load(e.to_string()))?;
        let mut devices = BTreeMap::new();
        for d in raw.devices {
            if devices.contains_key(&d.device_name) {
                return Err(HomeError::DuplicateDevice { device: d.device_name });
            }
            let mut attributes = BTreeMap::new();
            for (i, cap) in d.capabilities.iter().enumerate() {
                if d.capabilities[..i].contains(cap) {
                    return Err(HomeError::DuplicateCapability {
                        device: d.device_name.clone(),
                        capability: cap.clone(),
                    });
                }
                let schema = corpus.get(cap).ok_or_else(|| HomeError::UnknownCapability {
                    device: d.device_name.clone(),
                    capability: cap.clone(),
                })?;
                for spec in &schema.attributes {
                    if attributes.contains_key(&spec.name) {
                        return Err(HomeError::DuplicateAttribute {
                            device: d.device_name.clone(),
                            attribute: spec.name.clone(),
                        });
                    }
                    attributes.insert(
                        spec.name.clone(),
                        AttributeState {
                            capability: cap.clone(),
                            value: fallback_initial(spec),
                        },
                    );
                }
            }
            for (attr, raw_value) in &d.attributes {
                let state = attributes.get(attr).ok_or_else(|| HomeError::UnknownAttribute {
                    device: d.device_name.clone(),
                    attribute: attr.clone(),
                })?;
                let spec = corpus
                    .get(&state.capability)
                    .and_then(|s| s.attribute(attr))
                    .expect("attribute came from this schema");
                let value = Scalar::coerce(raw_value, spec.kind)
                    .filter(|v| spec.check(v).is_none())
                    .ok_or_else(|| HomeError::InvalidValue {
                        device: d.device_name.clone(),
                        attribute: attr.clone(),
                        reason: format!("{raw_value} does not satisfy the schema"),
                    })?;
                let value = spec.normalize(value);
                attributes.get_mut(attr).expect("checked").value = value;
            }
            devices.insert(
                d.device_name.clone(),
                DeviceState {
                    descriptor: DeviceDescriptor {
                        device_name: d.device_name,
                        room: d.room,
                        available: true,
                        capabilities: d.capabilities,
                    },
                    attributes,
                },
            );
        }
        Ok(HomeState {
            name: raw.name,
            corpus,
            devices,
            rules: BTreeMap::new(),
            log: Vec::new(),
            clock: 0,
            cascade_cap: DEFAULT_CASCADE_CAP,
            faults: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn corpus(&self) -> &SchemaCorpus {
        &self.corpus
    }

    pub fn with_cascade_cap(mut self, cap: usize) -> Self {
        self.cascade_cap = cap;
        self
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn descriptors(&self) -> Vec<DeviceDescriptor> {
        self.devices.values().map(|d| d.descriptor.clone()).collect()
    }

    pub fn devices(&self) -> &BTreeMap<String, DeviceState> {
        &self.devices
    }

    pub fn device(&self, name: &str) -> Option<&DeviceState> {
        self.devices.get(name)
    }

    pub fn rules(&self) -> impl Iterator<Item = &InstalledRule> {
        self.rules.values()
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn execution_records(&self) -> impl Iterator<Item = &ExecutionRecord> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Execution(e) => Some(e),
            _ => None,
        })
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub fn inject_fault(&mut self, fault: Fault) {
        self.faults.push(fault);
    }

    pub fn clear_faults(&mut self) {
        self.faults.clear();
    }

    fn take_fault(&mut self, cmd: &DeviceCommand) -> Option<String> {
        let idx = self.faults.iter().position(|f| {
            f.device == cmd.device_name
                && f.command.as_ref().is_none_or(|c| *c == cmd.command_name)
                && f.remaining != Some(0)
        })?;
        let fault = &mut self.faults[idx];
        if let Some(n) = fault.remaining.as_mut() {
            *n -= 1;
        }
        Some(fault.message.clone())
    }

    /// Schema-validates and applies one command. Errors never change attributes.
    fn apply(&mut self, cmd: &DeviceCommand, cause: Cause) -> ExecutionRecord {
        let outcome = self.try_apply(cmd);
        let record = ExecutionRecord {
            tick: self.tick(),
            command: cmd.clone(),
            outcome,
            cause,
        };
        self.log.push(LogRecord::Execution(record.clone()));
        record
    }

    fn try_apply(&mut self, cmd: &DeviceCommand) -> Outcome {
        let env = self.descriptors();
        let violations = validate_command(cmd, &env, &self.corpus);
        if !violations.is_empty() {
            return Outcome::Error(ExecutionError::Violations { violations });
        }
        let device = &self.devices[&cmd.device_name];
        if !device.descriptor.available {
            return Outcome::Error(ExecutionError::DeviceUnavailable {
                device: cmd.device_name.clone(),
            });
        }
        if let Some(message) = self.take_fault(cmd) {
            return Outcome::Error(ExecutionError::Fault { message });
        }
        let corpus = Arc::clone(&self.corpus);
        let (_, schema) = resolve_command(cmd, &env, &corpus).expect("validated above");
        let mut changes = BTreeMap::new();
        for effect in &schema.sets {
            let value = match &effect.source {
                EffectSource::Constant(v) => v.clone(),
                EffectSource::Argument(i) => match &cmd.arguments[*i] {
                    ParamValue::Concrete(v) => schema.arguments[*i].normalize(v.clone()),
                    ParamValue::Placeholder { .. } => unreachable!("validated concrete"),
                },
            };
            changes.insert(effect.attribute.clone(), value);
        }
        let device = self.devices.get_mut(&cmd.device_name).expect("validated");
        for (attr, value) in &changes {
            if let Some(state) = device.attributes.get_mut(attr) {
                state.value = value.clone();
            }
        }
        Outcome::Ok { changes }
    }

    /// Executes a command directly. Rule truth values are refreshed without
    /// firing, so a later event does not see a stale edge.
    pub fn execute(&mut self, cmd: &DeviceCommand) -> ExecutionRecord {
        let record = self.apply(cmd, Cause::Direct);
        if !record.is_error() {
            self.refresh_rule_truths();
        }
        record
    }

    pub fn query(&self, device: &str, attribute: &str) -> Result<Scalar, HomeError> {
        let d = self
            .devices
            .get(device)
            .ok_or_else(|| HomeError::UnknownDevice(device.to_string()))?;
        d.attributes
            .get(attribute)
            .map(|a| a.value.clone())
            .ok_or_else(|| HomeError::UnknownAttribute {
                device: device.to_string(),
                attribute: attribute.to_string(),
            })
    }

    pub fn set_availability(&mut self, device: &str, available: bool) -> Result<(), HomeError> {
        let d = self
            .devices
            .get_mut(device)
            .ok_or_else(|| HomeError::UnknownDevice(device.to_string()))?;
        d.descriptor.available = available;
        let tick = self.tick();
        self.log.push(LogRecord::Availability {
            tick,
            device: device.to_string(),
            available,
        });
        Ok(())
    }

    pub fn remove_device(&mut self, device: &str) -> Result<(), HomeError> {
        self.devices
            .remove(device)
            .map(|_| ())
            .ok_or_else(|| HomeError::UnknownDevice(device.to_string()))
    }

    fn predicate_holds(&self, p: &TriggerPredicate) -> bool {
        self.devices
            .get(&p.device_name)
            .and_then(|d| d.attributes.get(&p.attribute_name))
            .is_some_and(|a| p.comparator.holds(&a.value, &p.value))
    }

    fn conjunction_holds(&self, rule: &TriggerActionRule) -> bool {
        rule.triggers.iter().all(|p| self.predicate_holds(p))
    }

    fn refresh_rule_truths(&mut self) {
        let truths: Vec<(String, bool)> = self
            .rules
            .iter()
            .map(|(id, r)| (id.clone(), self.conjunction_holds(&r.rule)))
            .collect();
        for (id, holds) in truths {
            self.rules.get_mut(&id).expect("present").holds = holds;
        }
    }

    /// Rules whose conjunction went false → true since the last evaluation,
    /// in rule-id order. Updates stored truth values.
    fn rising_edges(&mut self) -> Vec<String> {
        let mut fired = Vec::new();
        let ids: Vec<String> = self.rules.keys().cloned().collect();
        for id in ids {
            let now = self.conjunction_holds(&self.rules[&id].rule);
            let entry = self.rules.get_mut(&id).expect("present");
            if now && !entry.holds {
                fired.push(id.clone());
            }
            entry.holds = now;
        }
        fired
    }

    pub fn install_rule(&mut self, rule: TriggerActionRule) -> Result<(), HomeError> {
        if rule.triggers.is_empty() || rule.actions.is_empty() {
            return Err(HomeError::EmptyRule);
        }
        let env = self.descriptors();
        let trigger_violations: Vec<Violation> = rule
            .triggers
            .iter()
            .flat_map(|p| validate_predicate(p, &env, &self.corpus))
            .collect();
        if !trigger_violations.is_empty() {
            return Err(HomeError::InvalidRuleTriggers(trigger_violations));
        }
        let action_violations: Vec<Violation> = rule
            .actions
            .iter()
            .flat_map(|c| validate_command(c, &env, &self.corpus))
            .collect();
        if !action_violations.is_empty() {
            return Err(HomeError::InvalidRuleActions(action_violations));
        }
        let holds = self.conjunction_holds(&rule);
        let rule_id = rule.rule_id.clone();
        let replaced = self
            .rules
            .insert(rule_id.clone(), InstalledRule { rule, holds })
            .is_some();
        let tick = self.tick();
        self.log.push(LogRecord::RuleInstalled {
            tick,
            rule_id,
            replaced,
        });
        Ok(())
    }

    pub fn remove_rule(&mut self, rule_id: &str) -> bool {
        let removed = self.rules.remove(rule_id).is_some();
        if removed {
            let tick = self.tick();
            self.log.push(LogRecord::RuleRemoved {
                tick,
                rule_id: rule_id.to_string(),
            });
        }
        removed
    }

    /// Sets a sensed attribute and runs the rule cascade. Returns the
    /// execution records of all rule-fired actions.
    pub fn emit_event(
        &mut self,
        device: &str,
        attribute: &str,
        value: Scalar,
    ) -> Result<Vec<ExecutionRecord>, HomeError> {
        let d = self
            .devices
            .get(device)
            .ok_or_else(|| HomeError::UnknownDevice(device.to_string()))?;
        let state = d.attributes.get(attribute).ok_or_else(|| HomeError::UnknownAttribute {
            device: device.to_string(),
            attribute: attribute.to_string(),
        })?;
        let spec = self
            .corpus
            .get(&state.capability)
            .and_then(|s| s.attribute(attribute))
            .expect("attribute from corpus");
        if let Some(f) = spec.check(&value) {
            return Err(HomeError::InvalidValue {
                device: device.to_string(),
                attribute: attribute.to_string(),
                reason: format!("{f:?}"),
            });
        }
        let value = spec.normalize(value);
        self.devices
            .get_mut(device)
            .expect("checked")
            .attributes
            .get_mut(attribute)
            .expect("checked")
            .value = value.clone();
        let tick = self.tick();
        self.log.push(LogRecord::Event {
            tick,
            device: device.to_string(),
            attribute: attribute.to_string(),
            value,
        });
        Ok(self.cascade())
    }

    fn cascade(&mut self) -> Vec<ExecutionRecord> {
        let mut records = Vec::new();
        let mut wave = self.rising_edges();
        let mut depth = 0;
        while !wave.is_empty() {
            if depth >= self.cascade_cap {
                let tick = self.tick();
                self.log.push(LogRecord::CycleCap {
                    tick,
                    depth,
                    pending_rules: wave,
                });
                break;
            }
            depth += 1;
            for rule_id in &wave {
                let actions = self.rules[rule_id].rule.actions.clone();
                for action in &actions {
                    records.push(self.apply(
                        action,
                        Cause::RuleFired {
                            rule_id: rule_id.clone(),
                        },
                    ));
                }
            }
            wave = self.rising_edges();
        }
        records
    }

    /// SHA-256 over the serialized devices, rules, log and clock.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            devices: &'a BTreeMap<String, DeviceState>,
            rules: &'a BTreeMap<String, InstalledRule>,
            log: &'a [LogRecord],
            clock: u64,
        }
        let bytes = serde_json::to_vec(&View {
            devices: &self.devices,
            rules: &self.rules,
            log: &self.log,
            clock: self.clock,
        })
        .expect("home state serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Event log as line-delimited JSON.
    pub fn export_log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    /// JSON view of all device states for dashboards.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "clock": self.clock,
            "devices": self.devices.values().map(|d| serde_json::json!({
                "device_name": d.descriptor.device_name,
                "room": d.descriptor.room,
                "available": d.descriptor.available,
                "capabilities": d.descriptor.capabilities,
                "attributes": d.attributes.iter().map(|(k, v)| (k.clone(), v.value.to_json())).collect::<serde_json::Map<_, _>>(),
            })).collect::<Vec<_>>(),
        })
    }
}
