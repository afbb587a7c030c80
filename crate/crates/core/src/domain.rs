//! Shared vocabulary: instructions, parameter values, device commands,
//! subtasks, trigger-action rules and task proposals.
//!
//! `DeviceCommand` serializes to the derive-stage wire shape
//! (`{"desc", "device": {"name", "capability": {"name", "command", "value"}}}`),
//! so every place that carries commands speaks the same JSON.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

/// Errors raised while building or decoding domain values.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid placeholder `{0}`: expected `[identifier]`")]
    InvalidPlaceholder(String),
    #[error("decimal payload must be finite, got {0}")]
    NonFiniteDecimal(f64),
    #[error("malformed value object: {0}")]
    MalformedValue(String),
    #[error("empty field `{0}`")]
    EmptyField(&'static str),
    #[error("unknown instruction type `{0}`")]
    UnknownInstructionType(String),
    #[error("subtask `{0}` has no commands")]
    EmptyCommands(String),
    #[error("decompose output does not match the expected shape: {0}")]
    DecomposeShape(String),
    #[error("derive output does not match the expected shape: {0}")]
    DeriveShape(String),
    #[error("illegal status transition {from:?} -> {to:?}")]
    IllegalTransition { from: ProposalStatus, to: ProposalStatus },
}

pub type Result<T, E = DomainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InstructionType {
    #[serde(rename = "Trigger-Action Rule")]
    TriggerAction,
    #[serde(rename = "Direct Control Command")]
    DirectControl,
    #[serde(rename = "Device Query")]
    DeviceQuery,
}

impl InstructionType {
    pub const ALL: [InstructionType; 3] = [
        InstructionType::TriggerAction,
        InstructionType::DirectControl,
        InstructionType::DeviceQuery,
    ];

    pub fn wire_name(self) -> &'static str {
        match self {
            InstructionType::TriggerAction => "Trigger-Action Rule",
            InstructionType::DirectControl => "Direct Control Command",
            InstructionType::DeviceQuery => "Device Query",
        }
    }

    /// Parses the exact wire name; case and surrounding whitespace are
    /// tolerated since model output is not always tidy.
    pub fn from_wire(name: &str) -> Result<Self> {
        let trimmed = name.trim().trim_matches('"').trim();
        Self::ALL
            .into_iter()
            .find(|t| t.wire_name().eq_ignore_ascii_case(trimmed))
            .ok_or_else(|| DomainError::UnknownInstructionType(name.to_string()))
    }
}

impl fmt::Display for InstructionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Decimal,
    Integer,
    String,
    Boolean,
}

impl ParamKind {
    pub fn wire_name(self) -> &'static str {
        match self {
            ParamKind::Decimal => "decimal",
            ParamKind::Integer => "integer",
            ParamKind::String => "string",
            ParamKind::Boolean => "boolean",
        }
    }

    fn from_wire(name: &str) -> Option<Self> {
        match name {
            "decimal" => Some(ParamKind::Decimal),
            "integer" => Some(ParamKind::Integer),
            "string" => Some(ParamKind::String),
            "boolean" => Some(ParamKind::Boolean),
            _ => None,
        }
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

/// A concrete parameter value.
#[derive(Debug, Clone, PartialEq)]
pub enum Scalar {
    Decimal(f64),
    Integer(i64),
    String(String),
    Boolean(bool),
}

impl Scalar {
    pub fn kind(&self) -> ParamKind {
        match self {
            Scalar::Decimal(_) => ParamKind::Decimal,
            Scalar::Integer(_) => ParamKind::Integer,
            Scalar::String(_) => ParamKind::String,
            Scalar::Boolean(_) => ParamKind::Boolean,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Decimal(v) => Some(*v),
            Scalar::Integer(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::String(s) => Some(s),
            _ => None,
        }
    }

    /// Converts a loosely typed JSON scalar into a value of `kind`.
    /// Integers widen to decimals; integral decimals narrow to integers.
    pub fn coerce(value: &Value, kind: ParamKind) -> Option<Scalar> {
        match (kind, value) {
            (ParamKind::Decimal, Value::Number(n)) => n.as_f64().filter(|v| v.is_finite()).map(Scalar::Decimal),
            (ParamKind::Decimal, Value::String(s)) => numeric_prefix(s).filter(|v| v.is_finite()).map(Scalar::Decimal),
            (ParamKind::Integer, Value::Number(n)) => n
                .as_i64()
                .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
                .map(Scalar::Integer),
            (ParamKind::Integer, Value::String(s)) => numeric_prefix(s)
                .filter(|f| f.fract() == 0.0)
                .map(|f| Scalar::Integer(f as i64)),
            (ParamKind::String, Value::String(s)) => Some(Scalar::String(s.clone())),
            (ParamKind::Boolean, Value::Bool(b)) => Some(Scalar::Boolean(*b)),
            (ParamKind::Boolean, Value::String(s)) => match s.as_str() {
                "true" => Some(Scalar::Boolean(true)),
                "false" => Some(Scalar::Boolean(false)),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            Scalar::Decimal(v) => Value::from(*v),
            Scalar::Integer(v) => Value::from(*v),
            Scalar::String(s) => Value::from(s.clone()),
            Scalar::Boolean(b) => Value::from(*b),
        }
    }
}

/// Leading number of strings such as `"20°C"` or `"22.5"`.
fn numeric_prefix(s: &str) -> Option<f64> {
    let s = s.trim();
    let end = s
        .char_indices()
        .take_while(|(i, c)| c.is_ascii_digit() || *c == '.' || (*i == 0 && (*c == '-' || *c == '+')))
        .map(|(i, c)| i + c.len_utf8())
        .last()?;
    s[..end].parse().ok()
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Decimal(v) => write!(f, "{v}"),
            Scalar::Integer(v) => write!(f, "{v}"),
            Scalar::String(s) => f.write_str(s),
            Scalar::Boolean(b) => write!(f, "{b}"),
        }
    }
}

impl Serialize for Scalar {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ParamValue::Concrete(self.clone()).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match ParamValue::deserialize(deserializer)? {
            ParamValue::Concrete(s) => Ok(s),
            ParamValue::Placeholder { slot, .. } => Err(serde::de::Error::custom(format!(
                "expected a concrete value, found placeholder {slot}"
            ))),
        }
    }
}

/// Placeholder slot name, stored without brackets.
///
/// The bracketed form is `[` identifier `]` where the identifier starts with
/// a letter or underscore and continues with ASCII alphanumerics or `_`.
/// Nested and empty brackets are rejected.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot(String);

impl Slot {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if is_identifier(&name) {
            Ok(Slot(name))
        } else {
            Err(DomainError::InvalidPlaceholder(name))
        }
    }

    /// Parses `[name]`.
    pub fn parse_bracketed(text: &str) -> Result<Self> {
        let inner = text
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .ok_or_else(|| DomainError::InvalidPlaceholder(text.to_string()))?;
        Slot::new(inner).map_err(|_| DomainError::InvalidPlaceholder(text.to_string()))
    }

    /// Accepts either `name` or `[name]`.
    pub fn parse_loose(text: &str) -> Result<Self> {
        let t = text.trim();
        if t.starts_with('[') {
            Slot::parse_bracketed(t)
        } else {
            Slot::new(t)
        }
    }

    pub fn name(&self) -> &str {
        &self.0
    }

    pub fn bracketed(&self) -> String {
        format!("[{}]", self.0)
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.0)
    }
}

impl Serialize for Slot {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Slot {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Slot::parse_loose(&s).map_err(serde::de::Error::custom)
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// True when the text looks like an attempt at a placeholder.
fn looks_bracketed(s: &str) -> bool {
    s.starts_with('[') || s.ends_with(']')
}

/// A command argument: a concrete value or a named slot awaiting a value.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Concrete(Scalar),
    Placeholder { kind: ParamKind, slot: Slot },
}

impl ParamValue {
    pub fn concrete(s: Scalar) -> Result<Self> {
        if let Scalar::Decimal(v) = s {
            if !v.is_finite() {
                return Err(DomainError::NonFiniteDecimal(v));
            }
        }
        Ok(ParamValue::Concrete(s))
    }

    pub fn placeholder(kind: ParamKind, slot: &str) -> Result<Self> {
        Ok(ParamValue::Placeholder {
            kind,
            slot: Slot::parse_loose(slot)?,
        })
    }

    pub fn kind(&self) -> ParamKind {
        match self {
            ParamValue::Concrete(s) => s.kind(),
            ParamValue::Placeholder { kind, .. } => *kind,
        }
    }

    pub fn is_placeholder(&self) -> bool {
        matches!(self, ParamValue::Placeholder { .. })
    }

    pub fn as_concrete(&self) -> Option<&Scalar> {
        match self {
            ParamValue::Concrete(s) => Some(s),
            ParamValue::Placeholder { .. } => None,
        }
    }

    pub fn slot(&self) -> Option<&Slot> {
        match self {
            ParamValue::Placeholder { slot, .. } => Some(slot),
            ParamValue::Concrete(_) => None,
        }
    }

    /// `{"decimal": 20}` or `{"decimal": "[temperature_value]"}`.
    pub fn to_wire(&self) -> Value {
        let mut map = Map::new();
        let payload = match self {
            ParamValue::Concrete(s) => s.to_json(),
            ParamValue::Placeholder { slot, .. } => Value::String(slot.bracketed()),
        };
        map.insert(self.kind().wire_name().to_string(), payload);
        Value::Object(map)
    }

    pub fn from_wire(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .filter(|o| o.len() == 1)
            .ok_or_else(|| DomainError::MalformedValue(value.to_string()))?;
        let (key, payload) = obj.iter().next().expect("len checked");
        let kind = ParamKind::from_wire(key).ok_or_else(|| DomainError::MalformedValue(value.to_string()))?;
        Self::from_payload(kind, payload)
    }

    fn from_payload(kind: ParamKind, payload: &Value) -> Result<Self> {
        if let Value::String(s) = payload {
            if looks_bracketed(s) {
                return Ok(ParamValue::Placeholder {
                    kind,
                    slot: Slot::parse_bracketed(s)?,
                });
            }
        }
        let scalar = match (kind, payload) {
            (ParamKind::Decimal, Value::Number(n)) => Scalar::Decimal(
                n.as_f64()
                    .ok_or_else(|| DomainError::MalformedValue(payload.to_string()))?,
            ),
            (ParamKind::Integer, Value::Number(n)) => Scalar::Integer(
                n.as_i64()
                    .ok_or_else(|| DomainError::MalformedValue(payload.to_string()))?,
            ),
            (ParamKind::String, Value::String(s)) => Scalar::String(s.clone()),
            (ParamKind::Boolean, Value::Bool(b)) => Scalar::Boolean(*b),
            _ => return Err(DomainError::MalformedValue(payload.to_string())),
        };
        ParamValue::concrete(scalar)
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Concrete(s) => write!(f, "{s}"),
            ParamValue::Placeholder { slot, .. } => write!(f, "{slot}"),
        }
    }
}

impl Serialize for ParamValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_wire().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParamValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        ParamValue::from_wire(&v).map_err(serde::de::Error::custom)
    }
}

/// One API-level device command.
///
/// Arguments are positional: names come from the capability schema, the way
/// the platform API and the derive wire shape carry them.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceCommand {
    pub description: String,
    pub device_name: String,
    pub capability_name: String,
    pub command_name: String,
    pub arguments: Vec<ParamValue>,
}

impl DeviceCommand {
    pub fn new(
        description: impl Into<String>,
        device: impl Into<String>,
        capability: impl Into<String>,
        command: impl Into<String>,
        arguments: Vec<ParamValue>,
    ) -> Result<Self> {
        let cmd = DeviceCommand {
            description: description.into(),
            device_name: device.into(),
            capability_name: capability.into(),
            command_name: command.into(),
            arguments,
        };
        cmd.check()?;
        Ok(cmd)
    }

    fn check(&self) -> Result<()> {
        if self.device_name.trim().is_empty() {
            return Err(DomainError::EmptyField("device.name"));
        }
        if self.capability_name.trim().is_empty() {
            return Err(DomainError::EmptyField("capability.name"));
        }
        if self.command_name.trim().is_empty() {
            return Err(DomainError::EmptyField("capability.command"));
        }
        Ok(())
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &Slot> {
        self.arguments.iter().filter_map(ParamValue::slot)
    }

    pub fn is_concrete(&self) -> bool {
        self.arguments.iter().all(|a| !a.is_placeholder())
    }

    /// The (device, capability, command) triple used for ground-truth matching.
    pub fn triple(&self) -> CommandTriple {
        CommandTriple::new(&self.device_name, &self.capability_name, &self.command_name)
    }

    pub fn to_wire(&self) -> Value {
        let value = match self.arguments.as_slice() {
            [] => Value::Object(Map::new()),
            [single] => single.to_wire(),
            many => Value::Array(many.iter().map(ParamValue::to_wire).collect()),
        };
        serde_json::json!({
            "desc": self.description,
            "device": {
                "name": self.device_name,
                "capability": {
                    "name": self.capability_name,
                    "command": self.command_name,
                    "value": value,
                }
            }
        })
    }

    pub fn from_wire(v: &Value) -> Result<Self> {
        let shape = |m: &str| DomainError::DeriveShape(format!("{m} in {v}"));
        let device = v.get("device").ok_or_else(|| shape("missing `device`"))?;
        let capability = device
            .get("capability")
            .ok_or_else(|| shape("missing `device.capability`"))?;
        let text = |val: Option<&Value>, what: &str| -> Result<String> {
            val.and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| shape(&format!("missing `{what}`")))
        };
        let arguments = match capability.get("value") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Object(o)) if o.is_empty() => Vec::new(),
            Some(obj @ Value::Object(_)) => vec![ParamValue::from_wire(obj)?],
            Some(Value::Array(items)) => items.iter().map(ParamValue::from_wire).collect::<Result<_>>()?,
            Some(other) => return Err(DomainError::MalformedValue(other.to_string())),
        };
        DeviceCommand::new(
            v.get("desc").and_then(Value::as_str).unwrap_or_default(),
            text(device.get("name"), "device.name")?,
            text(capability.get("name"), "capability.name")?,
            text(capability.get("command"), "capability.command")?,
            arguments,
        )
    }
}

impl Serialize for DeviceCommand {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_wire().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DeviceCommand {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        DeviceCommand::from_wire(&v).map_err(serde::de::Error::custom)
    }
}

/// (device, capability, command-or-attribute), compared case-sensitively.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CommandTriple {
    pub device: String,
    pub capability: String,
    pub command: String,
}

impl CommandTriple {
    pub fn new(device: &str, capability: &str, command: &str) -> Self {
        CommandTriple {
            device: device.to_string(),
            capability: capability.to_string(),
            command: command.to_string(),
        }
    }
}

impl fmt::Display for CommandTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.device, self.capability, self.command)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    FreshlyDecomposed,
    ReusedFromMemory,
    AddedByPreference,
    AddedByUser,
}

/// Which part of an instruction a subtask serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubtaskRole {
    #[default]
    Action,
    Trigger,
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Eq,
    Lt,
    Gt,
    Le,
    Ge,
}

impl Comparator {
    pub fn holds(self, current: &Scalar, reference: &Scalar) -> bool {
        if let (Some(a), Some(b)) = (current.as_f64(), reference.as_f64()) {
            return match self {
                Comparator::Eq => a == b,
                Comparator::Lt => a < b,
                Comparator::Gt => a > b,
                Comparator::Le => a <= b,
                Comparator::Ge => a >= b,
            };
        }
        match self {
            Comparator::Eq => current == reference,
            _ => false,
        }
    }
}

/// `device.attribute <cmp> value`; the value is always concrete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerPredicate {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub device_name: String,
    pub capability_name: String,
    pub attribute_name: String,
    pub comparator: Comparator,
    pub value: Scalar,
}

impl TriggerPredicate {
    pub fn triple(&self) -> CommandTriple {
        CommandTriple::new(&self.device_name, &self.capability_name, &self.attribute_name)
    }

    pub fn to_wire(&self) -> Value {
        serde_json::json!({
            "desc": self.description,
            "device": {
                "name": self.device_name,
                "capability": {
                    "name": self.capability_name,
                    "attribute": self.attribute_name,
                    "comparator": self.comparator,
                    "value": ParamValue::Concrete(self.value.clone()).to_wire(),
                }
            }
        })
    }

    pub fn from_wire(v: &Value) -> Result<Self> {
        let shape = |m: &str| DomainError::DeriveShape(format!("{m} in {v}"));
        let device = v.get("device").ok_or_else(|| shape("missing `device`"))?;
        let cap = device.get("capability").ok_or_else(|| shape("missing `capability`"))?;
        let text = |val: Option<&Value>, what: &str| -> Result<String> {
            val.and_then(Value::as_str)
                .filter(|s| !s.trim().is_empty())
                .map(str::to_string)
                .ok_or_else(|| shape(&format!("missing `{what}`")))
        };
        let comparator = match cap.get("comparator") {
            None => Comparator::Eq,
            Some(c) => serde_json::from_value(c.clone()).map_err(|e| shape(&e.to_string()))?,
        };
        let value = match ParamValue::from_wire(cap.get("value").ok_or_else(|| shape("missing `value`"))?)? {
            ParamValue::Concrete(s) => s,
            ParamValue::Placeholder { slot, .. } => {
                return Err(shape(&format!("trigger value must be concrete, found {slot}")))
            }
        };
        Ok(TriggerPredicate {
            description: v.get("desc").and_then(Value::as_str).unwrap_or_default().to_string(),
            device_name: text(device.get("name"), "device.name")?,
            capability_name: text(cap.get("name"), "capability.name")?,
            attribute_name: text(cap.get("attribute"), "capability.attribute")?,
            comparator,
            value,
        })
    }
}

/// Attribute targeted by a device query.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeRef {
    pub device_name: String,
    pub capability_name: String,
    pub attribute_name: String,
}

impl AttributeRef {
    pub fn triple(&self) -> CommandTriple {
        CommandTriple::new(&self.device_name, &self.capability_name, &self.attribute_name)
    }
}

/// Where a concrete argument value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueSource {
    Preference,
    Memory,
    /// Schema default used for lack of evidence; flagged for review.
    Default,
    User,
    SelfCorrection,
}

/// Record of a placeholder that has been filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotResolution {
    pub command: usize,
    pub argument: usize,
    pub slot: Slot,
    pub source: ValueSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtask {
    pub description: String,
    pub device_name: String,
    #[serde(default)]
    pub role: SubtaskRole,
    #[serde(default)]
    pub commands: Vec<DeviceCommand>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<TriggerPredicate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<AttributeRef>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resolutions: Vec<SlotResolution>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<crate::preference::PropertyTarget>,
}

impl Subtask {
    pub fn new(description: impl Into<String>, device: impl Into<String>, provenance: Provenance) -> Self {
        Subtask {
            description: description.into(),
            device_name: device.into(),
            role: SubtaskRole::Action,
            commands: Vec::new(),
            condition: None,
            query: None,
            provenance,
            resolutions: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn with_role(mut self, role: SubtaskRole) -> Self {
        self.role = role;
        self
    }

    /// Whether the derive stage has produced this subtask's executable part.
    pub fn is_derived(&self) -> bool {
        match self.role {
            SubtaskRole::Action => !self.commands.is_empty(),
            SubtaskRole::Trigger => self.condition.is_some(),
            SubtaskRole::Query => self.query.is_some(),
        }
    }

    /// Every placeholder slot appearing in this subtask's commands.
    pub fn slot_inventory(&self) -> Vec<Slot> {
        let mut slots: Vec<Slot> = self.commands.iter().flat_map(|c| c.placeholders().cloned()).collect();
        slots.sort();
        slots.dedup();
        slots
    }

    pub fn has_placeholders(&self) -> bool {
        self.commands.iter().any(|c| !c.is_concrete())
    }

    pub fn flagged_defaults(&self) -> impl Iterator<Item = &SlotResolution> {
        self.resolutions.iter().filter(|r| r.source == ValueSource::Default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerActionRule {
    pub rule_id: String,
    pub triggers: Vec<TriggerPredicate>,
    pub actions: Vec<DeviceCommand>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProposalStatus {
    Drafting,
    AwaitingReview,
    Approved,
    Rejected,
    Failed,
}

impl ProposalStatus {
    pub fn can_transition(self, to: ProposalStatus) -> bool {
        use ProposalStatus::*;
        matches!(
            (self, to),
            (Drafting, AwaitingReview) | (Drafting, Failed) | (AwaitingReview, Approved) | (AwaitingReview, Rejected)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            ProposalStatus::Approved | ProposalStatus::Rejected | ProposalStatus::Failed
        )
    }
}

/// A pipeline result awaiting (or past) human review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProposal {
    pub proposal_id: String,
    pub instruction_text: String,
    pub instruction_type: InstructionType,
    pub context_keyword: String,
    pub subtasks: Vec<Subtask>,
    status: ProposalStatus,
    pub correction_rounds_used: u32,
    pub call_trace: Vec<(String, u32)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escalation: Option<Vec<crate::home::ExecutionRecord>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub query_results: Vec<QueryResult>,
    /// Why the pipeline gave up, for `Failed` proposals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub target: AttributeRef,
    pub value: Option<Scalar>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskProposal {
    pub fn new(proposal_id: impl Into<String>, instruction: impl Into<String>, kind: InstructionType) -> Self {
        TaskProposal {
            proposal_id: proposal_id.into(),
            instruction_text: instruction.into(),
            instruction_type: kind,
            context_keyword: String::new(),
            subtasks: Vec::new(),
            status: ProposalStatus::Drafting,
            correction_rounds_used: 0,
            call_trace: Vec::new(),
            notices: Vec::new(),
            escalation: None,
            query_results: Vec::new(),
            failure: None,
        }
    }

    pub fn status(&self) -> ProposalStatus {
        self.status
    }

    /// The only way to change status; rejects edges outside the state graph.
    pub fn transition(&mut self, to: ProposalStatus) -> Result<()> {
        if !self.status.can_transition(to) {
            return Err(DomainError::IllegalTransition { from: self.status, to });
        }
        self.status = to;
        Ok(())
    }

    pub fn action_commands(&self) -> impl Iterator<Item = &DeviceCommand> {
        self.subtasks
            .iter()
            .filter(|s| s.role == SubtaskRole::Action)
            .flat_map(|s| s.commands.iter())
    }

    pub fn conditions(&self) -> impl Iterator<Item = &TriggerPredicate> {
        self.subtasks.iter().filter_map(|s| s.condition.as_ref())
    }

    pub fn query_targets(&self) -> impl Iterator<Item = &AttributeRef> {
        self.subtasks.iter().filter_map(|s| s.query.as_ref())
    }

    pub fn placeholder_count(&self) -> usize {
        self.subtasks
            .iter()
            .flat_map(|s| s.commands.iter())
            .map(|c| c.placeholders().count())
            .sum()
    }

    /// Builds the rule installed for a trigger-action proposal.
    pub fn to_rule(&self) -> Option<TriggerActionRule> {
        let triggers: Vec<_> = self.conditions().cloned().collect();
        let actions: Vec<_> = self.action_commands().cloned().collect();
        if self.instruction_type != InstructionType::TriggerAction || triggers.is_empty() || actions.is_empty() {
            return None;
        }
        Some(TriggerActionRule {
            rule_id: format!("rule-{}", self.proposal_id),
            triggers,
            actions,
        })
    }
}

/// A device as the platform reports it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub device_name: String,
    #[serde(default)]
    pub room: String,
    #[serde(default = "default_true")]
    pub available: bool,
    pub capabilities: Vec<String>,
}

fn default_true() -> bool {
    true
}

// ---------------------------------------------------------------------------
// Stage wire shapes
// ---------------------------------------------------------------------------

const SUBTASK_LIST: &str = "possible subtask list";

fn subtask_list_json(subtasks: &[&Subtask]) -> Value {
    Value::Array(
        subtasks
            .iter()
            .map(|s| serde_json::json!({"subtask": s.description, "device": s.device_name}))
            .collect(),
    )
}

/// Decompose-stage JSON for a proposal.
pub fn serialize_decompose_output(proposal: &TaskProposal) -> String {
    decompose_value(proposal).to_string()
}

pub fn decompose_value(proposal: &TaskProposal) -> Value {
    let by_role =
        |role: SubtaskRole| -> Vec<&Subtask> { proposal.subtasks.iter().filter(|s| s.role == role).collect() };
    let mut root = Map::new();
    root.insert("CommandType".into(), Value::from(proposal.instruction_type.wire_name()));
    match proposal.instruction_type {
        InstructionType::DirectControl => {
            root.insert(
                "Action".into(),
                serde_json::json!({"name": proposal.instruction_text, SUBTASK_LIST: subtask_list_json(&by_role(SubtaskRole::Action))}),
            );
        }
        InstructionType::TriggerAction => {
            root.insert(
                "Trigger".into(),
                serde_json::json!({"name": proposal.instruction_text, SUBTASK_LIST: subtask_list_json(&by_role(SubtaskRole::Trigger))}),
            );
            root.insert(
                "Action".into(),
                serde_json::json!({"name": proposal.instruction_text, SUBTASK_LIST: subtask_list_json(&by_role(SubtaskRole::Action))}),
            );
        }
        InstructionType::DeviceQuery => {
            let attrs: Vec<Value> = by_role(SubtaskRole::Query)
                .into_iter()
                .map(|s| {
                    let mut item = serde_json::json!({"subtask": s.description, "device": s.device_name});
                    if let Some(q) = &s.query {
                        item["capability"] = Value::from(q.capability_name.clone());
                        item["attribute"] = Value::from(q.attribute_name.clone());
                    }
                    item
                })
                .collect();
            root.insert(
                "Query".into(),
                serde_json::json!({"name": proposal.instruction_text, "attributes": attrs}),
            );
        }
    }
    Value::Object(root)
}

/// Parsed Decompose-stage response.
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposeOutput {
    pub command_type: Option<InstructionType>,
    pub subtasks: Vec<Subtask>,
}

/// Parses Decompose JSON. `expected` selects which parts must be present.
pub fn parse_decompose_output(value: &Value, expected: InstructionType) -> Result<DecomposeOutput> {
    let shape = |m: &str| DomainError::DecomposeShape(m.to_string());
    let command_type = value
        .get("CommandType")
        .and_then(Value::as_str)
        .map(InstructionType::from_wire)
        .transpose()?;
    let parse_list = |part: &str, role: SubtaskRole| -> Result<Vec<Subtask>> {
        let obj = value
            .get(part)
            .ok_or_else(|| shape(&format!("missing `{part}` object")))?;
        let list = obj
            .get(SUBTASK_LIST)
            .and_then(Value::as_array)
            .ok_or_else(|| shape(&format!("`{part}` lacks `{SUBTASK_LIST}`")))?;
        list.iter()
            .map(|item| {
                let desc = item
                    .get("subtask")
                    .and_then(Value::as_str)
                    .ok_or_else(|| shape("subtask entry lacks `subtask`"))?;
                let device = item
                    .get("device")
                    .and_then(Value::as_str)
                    .ok_or_else(|| shape("subtask entry lacks `device`"))?;
                Ok(Subtask::new(desc, device, Provenance::FreshlyDecomposed).with_role(role))
            })
            .collect()
    };
    let subtasks = match expected {
        InstructionType::DirectControl => parse_list("Action", SubtaskRole::Action)?,
        InstructionType::TriggerAction => {
            let mut all = parse_list("Trigger", SubtaskRole::Trigger)?;
            all.extend(parse_list("Action", SubtaskRole::Action)?);
            all
        }
        InstructionType::DeviceQuery => {
            let query = value.get("Query").ok_or_else(|| shape("missing `Query` object"))?;
            let attrs = query
                .get("attributes")
                .and_then(Value::as_array)
                .ok_or_else(|| shape("`Query` lacks `attributes`"))?;
            attrs
                .iter()
                .map(|item| {
                    let get = |k: &str| {
                        item.get(k)
                            .and_then(Value::as_str)
                            .map(str::to_string)
                            .ok_or_else(|| shape(&format!("query entry lacks `{k}`")))
                    };
                    let device = get("device")?;
                    let capability = get("capability")?;
                    let attribute = get("attribute")?;
                    let desc = item
                        .get("subtask")
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .unwrap_or_else(|| format!("Read {device} {attribute}"));
                    let mut s =
                        Subtask::new(desc, device.clone(), Provenance::FreshlyDecomposed).with_role(SubtaskRole::Query);
                    s.query = Some(AttributeRef {
                        device_name: device,
                        capability_name: capability,
                        attribute_name: attribute,
                    });
                    Ok(s)
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(DecomposeOutput { command_type, subtasks })
}

/// Derive-stage JSON for one subtask.
pub fn serialize_derive_output(subtask: &Subtask) -> Result<String> {
    Ok(derive_value(subtask)?.to_string())
}

pub fn derive_value(subtask: &Subtask) -> Result<Value> {
    let mut root = Map::new();
    root.insert("subtask".into(), Value::from(subtask.description.clone()));
    match (&subtask.role, &subtask.condition) {
        (SubtaskRole::Trigger, Some(cond)) => {
            root.insert("condition".into(), cond.to_wire());
        }
        _ => {
            if subtask.commands.is_empty() {
                return Err(DomainError::EmptyCommands(subtask.description.clone()));
            }
            root.insert(
                "commands".into(),
                Value::Array(subtask.commands.iter().map(DeviceCommand::to_wire).collect()),
            );
        }
    }
    Ok(Value::Object(root))
}

/// Parsed Derive-stage response for one subtask.
#[derive(Debug, Clone, PartialEq)]
pub struct DeriveOutput {
    pub subtask: String,
    pub commands: Vec<DeviceCommand>,
    pub condition: Option<TriggerPredicate>,
}

impl DeriveOutput {
    /// Device the derived output acts on, taken from its first element.
    pub fn device(&self) -> Option<&str> {
        self.condition
            .as_ref()
            .map(|c| c.device_name.as_str())
            .or_else(|| self.commands.first().map(|c| c.device_name.as_str()))
    }
}

pub fn parse_derive_output(value: &Value) -> Result<DeriveOutput> {
    let shape = |m: &str| DomainError::DeriveShape(m.to_string());
    let subtask = value
        .get("subtask")
        .and_then(Value::as_str)
        .ok_or_else(|| shape("missing `subtask`"))?
        .to_string();
    if let Some(cond) = value.get("condition") {
        return Ok(DeriveOutput {
            subtask,
            commands: Vec::new(),
            condition: Some(TriggerPredicate::from_wire(cond)?),
        });
    }
    let commands = value
        .get("commands")
        .and_then(Value::as_array)
        .ok_or_else(|| shape("missing `commands` array"))?
        .iter()
        .map(DeviceCommand::from_wire)
        .collect::<Result<Vec<_>>>()?;
    Ok(DeriveOutput {
        subtask,
        commands,
        condition: None,
    })
}

/// Slot-name → value bindings, as stored in context nodes.
pub type Bindings = BTreeMap<Slot, Scalar>;

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sleep_proposal() -> TaskProposal {
        let mut p = TaskProposal::new("p1", "Make the bedroom ready for sleep", InstructionType::DirectControl);
        for (t, d) in [
            ("Adjust air conditioner temperature", "air conditioner"),
            ("Set humidifier level", "humidifier"),
            ("Dim the sleep light", "sleep light"),
        ] {
            p.subtasks.push(Subtask::new(t, d, Provenance::FreshlyDecomposed));
        }
        p
    }

    #[test]
    fn decompose_listing_shape() {
        let expected = json!({"CommandType": "Direct Control Command",
         "Action": {
          "name": "Make the bedroom ready for sleep",
          "possible subtask list":
           [{"subtask": "Adjust air conditioner temperature",
             "device": "air conditioner"},
            {"subtask": "Set humidifier level",
             "device": "humidifier"},
            {"subtask": "Dim the sleep light",
             "device": "sleep light"}]}});
        let text = serialize_decompose_output(&sleep_proposal());
        assert_eq!(serde_json::from_str::<Value>(&text).unwrap(), expected);
    }

    #[test]
    fn decompose_empty_list() {
        let p = TaskProposal::new("p", "nothing", InstructionType::DirectControl);
        let v: Value = serde_json::from_str(&serialize_decompose_output(&p)).unwrap();
        assert_eq!(v["Action"]["possible subtask list"], json!([]));
    }

    #[test]
    fn trigger_action_has_both_parts() {
        let mut p = TaskProposal::new("p", "turn on light when fridge opens", InstructionType::TriggerAction);
        p.subtasks.push(
            Subtask::new("Detect fridge opening", "fridge", Provenance::FreshlyDecomposed)
                .with_role(SubtaskRole::Trigger),
        );
        p.subtasks.push(Subtask::new(
            "Turn on the dining light",
            "dining light",
            Provenance::FreshlyDecomposed,
        ));
        let v: Value = serde_json::from_str(&serialize_decompose_output(&p)).unwrap();
        assert_eq!(v["CommandType"], "Trigger-Action Rule");
        for part in ["Trigger", "Action"] {
            let obj = v[part].as_object().expect(part);
            assert!(obj["name"].is_string());
            assert_eq!(obj["possible subtask list"].as_array().unwrap().len(), 1);
        }
        let parsed = parse_decompose_output(&v, InstructionType::TriggerAction).unwrap();
        assert_eq!(parsed.subtasks, p.subtasks);
    }

    fn listing_two() -> Value {
        json!({"subtask": "Adjust air conditioner temperature",
         "commands":
         [{"desc": "Turn on air conditioner",
           "device": {"name": "air conditioner",
             "capability": {"name": "switch",
             "command": "on", "value":{}}}},
          {"desc": "Set mode to [mode_value]",
           "device": {"name": "air conditioner",
             "capability": {"name": "airConditionerMode",
             "command": "setAirConditionerMode",
             "value":{"string": "[mode_value]"}}}},
          {"desc": "Set temperature to [temperature_value]",
           "device": {"name": "air conditioner",
             "capability":
             {"name": "thermostatCoolingSetpoint",
              "command": "setCoolingSetpoint",
              "value":{"decimal": "[temperature_value]"}}}}]})
    }

    #[test]
    fn derive_listing_round_trip() {
        let parsed = parse_derive_output(&listing_two()).unwrap();
        assert_eq!(parsed.commands.len(), 3);
        assert!(parsed.commands[0].arguments.is_empty());
        assert_eq!(
            parsed.commands[1].arguments,
            vec![ParamValue::placeholder(ParamKind::String, "mode_value").unwrap()]
        );
        assert_eq!(
            parsed.commands[2].arguments,
            vec![ParamValue::placeholder(ParamKind::Decimal, "temperature_value").unwrap()]
        );
        let mut s = Subtask::new(parsed.subtask.clone(), "air conditioner", Provenance::FreshlyDecomposed);
        s.commands = parsed.commands;
        let text = serialize_derive_output(&s).unwrap();
        assert_eq!(serde_json::from_str::<Value>(&text).unwrap(), listing_two());
    }

    #[test]
    fn no_argument_command_serializes_empty_value() {
        let c = DeviceCommand::new("Turn on", "light", "switch", "on", vec![]).unwrap();
        assert_eq!(c.to_wire()["device"]["capability"]["value"], json!({}));
    }

    #[test]
    fn derive_requires_commands() {
        let s = Subtask::new("x", "light", Provenance::FreshlyDecomposed);
        assert_eq!(serialize_derive_output(&s), Err(DomainError::EmptyCommands("x".into())));
    }

    #[test]
    fn placeholder_grammar() {
        assert!(Slot::parse_bracketed("[temperature_value]").is_ok());
        assert!(Slot::parse_bracketed("[coolingSetpoint_value]").is_ok());
        for bad in ["[]", "[[a]]", "[a b]", "[1a]", "a]", "[a"] {
            assert!(Slot::parse_bracketed(bad).is_err(), "{bad}");
        }
        // a bracket-shaped string payload is never a concrete string
        assert!(ParamValue::from_wire(&json!({"string": "[]"})).is_err());
    }

    #[test]
    fn non_finite_decimal_rejected() {
        assert_eq!(
            ParamValue::concrete(Scalar::Decimal(f64::NAN)).unwrap_err().to_string(),
            DomainError::NonFiniteDecimal(f64::NAN).to_string()
        );
        assert!(ParamValue::concrete(Scalar::Decimal(f64::INFINITY)).is_err());
    }

    #[test]
    fn empty_names_rejected() {
        assert!(DeviceCommand::new("", "", "switch", "on", vec![]).is_err());
        assert!(DeviceCommand::new("", "light", "switch", " ", vec![]).is_err());
    }

    #[test]
    fn instruction_type_wire_names() {
        for t in InstructionType::ALL {
            let s = serde_json::to_string(&t).unwrap();
            assert_eq!(s, format!("\"{}\"", t.wire_name()));
            assert_eq!(InstructionType::from_wire(t.wire_name()).unwrap(), t);
        }
        assert!(InstructionType::from_wire("Routine").is_err());
    }

    #[test]
    fn status_machine() {
        let mut p = sleep_proposal();
        assert!(p.transition(ProposalStatus::Approved).is_err());
        p.transition(ProposalStatus::AwaitingReview).unwrap();
        assert!(p.transition(ProposalStatus::Failed).is_err());
        p.transition(ProposalStatus::Approved).unwrap();
        assert!(p.transition(ProposalStatus::Approved).is_err());
        assert!(p.transition(ProposalStatus::Rejected).is_err());
    }

    #[test]
    fn scalar_coercion() {
        assert_eq!(
            Scalar::coerce(&json!("20°C"), ParamKind::Decimal),
            Some(Scalar::Decimal(20.0))
        );
        assert_eq!(
            Scalar::coerce(&json!(3.0), ParamKind::Integer),
            Some(Scalar::Integer(3))
        );
        assert_eq!(Scalar::coerce(&json!(3.5), ParamKind::Integer), None);
        assert_eq!(Scalar::coerce(&json!("cool"), ParamKind::Decimal), None);
    }
}
