//! Capability schema corpus: parsing, command validation and retrieval of
//! the schema fragments relevant to a subtask.
//!
//! One TOML document per capability. Each command declares its arguments and
//! the attributes it sets, so the simulator and the validator share a single
//! interpretation of the platform API.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DeviceCommand, DeviceDescriptor, ParamKind, ParamValue, Scalar, TriggerPredicate};
use crate::llm::{cosine, Embedder, LlmError};

pub const DEFAULT_RETRIEVAL_K: usize = 5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("capability `{name}` declared in both {first} and {second}")]
    DuplicateCapability {
        name: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no available devices in the environment")]
    EmptyEnvironment,
    #[error("retrieval budget k must be at least 1")]
    ZeroBudget,
    #[error(transparent)]
    Embedding(#[from] LlmError),
}

/// Constraints shared by command arguments and attributes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueSpec {
    pub name: String,
    pub kind: ParamKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enum_values: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    /// Argument default, or attribute initial value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub default: Option<Scalar>,
}

impl ValueSpec {
    /// Checks kind, enum membership and range; `None` when acceptable.
    pub fn check(&self, value: &Scalar) -> Option<SpecFailure> {
        let kind_ok =
            value.kind() == self.kind || (self.kind == ParamKind::Decimal && value.kind() == ParamKind::Integer);
        if !kind_ok {
            return Some(SpecFailure::Kind {
                expected: self.kind,
                found: value.kind(),
            });
        }
        if let (Some(allowed), Some(s)) = (&self.enum_values, value.as_str()) {
            if !allowed.iter().any(|a| a == s) {
                return Some(SpecFailure::Enum {
                    value: s.to_string(),
                    allowed: allowed.clone(),
                });
            }
        }
        if let Some(v) = value.as_f64() {
            let below = self.min.is_some_and(|m| v < m);
            let above = self.max.is_some_and(|m| v > m);
            if below || above {
                return Some(SpecFailure::Range {
                    value: v,
                    min: self.min,
                    max: self.max,
                });
            }
        }
        None
    }

    /// Represents an accepted value in the spec's own kind (integers widen
    /// to decimals for decimal specs).
    pub fn normalize(&self, value: Scalar) -> Scalar {
        match (self.kind, value) {
            (ParamKind::Decimal, Scalar::Integer(i)) => Scalar::Decimal(i as f64),
            (_, v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpecFailure {
    Kind {
        expected: ParamKind,
        found: ParamKind,
    },
    Enum {
        value: String,
        allowed: Vec<String>,
    },
    Range {
        value: f64,
        min: Option<f64>,
        max: Option<f64>,
    },
}

/// Where a command's effect on an attribute takes its value from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectSource {
    Argument(usize),
    Constant(Scalar),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeEffect {
    pub attribute: String,
    pub source: EffectSource,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommandSchema {
    pub name: String,
    pub arguments: Vec<ValueSpec>,
    pub sets: Vec<AttributeEffect>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapabilitySchema {
    pub capability_name: String,
    pub description: String,
    pub commands: Vec<CommandSchema>,
    pub attributes: Vec<ValueSpec>,
}

impl CapabilitySchema {
    pub fn command(&self, name: &str) -> Option<&CommandSchema> {
        self.commands.iter().find(|c| c.name == name)
    }

    pub fn attribute(&self, name: &str) -> Option<&ValueSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

/// All known capability schemas, keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchemaCorpus {
    schemas: BTreeMap<String, CapabilitySchema>,
}

impl SchemaCorpus {
    pub fn from_schemas(schemas: impl IntoIterator<Item = CapabilitySchema>) -> Self {
        SchemaCorpus {
            schemas: schemas.into_iter().map(|s| (s.capability_name.clone(), s)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.schemas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.schemas.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&CapabilitySchema> {
        self.schemas.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CapabilitySchema> {
        self.schemas.values()
    }

    pub fn doc_snippet(&self, name: &str) -> Option<&str> {
        self.schemas.get(name).map(|s| s.description.as_str())
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCapability {
    name: String,
    description: String,
    #[serde(default)]
    attributes: Vec<RawSpec>,
    #[serde(default)]
    commands: Vec<RawCommand>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    name: String,
    kind: ParamKind,
    #[serde(default, rename = "enum")]
    enum_values: Option<Vec<String>>,
    min: Option<f64>,
    max: Option<f64>,
    #[serde(alias = "initial")]
    default: Option<toml::Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCommand {
    name: String,
    #[serde(default)]
    arguments: Vec<RawSpec>,
    #[serde(default)]
    sets: Vec<RawEffect>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEffect {
    attribute: String,
    argument: Option<String>,
    value: Option<toml::Value>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// First line holding `needle` as a quoted string, so semantic errors still
/// point somewhere useful.
fn line_mentioning(text: &str, needle: &str) -> usize {
    let quoted = format!("\"{needle}\"");
    text.lines().position(|l| l.contains(&quoted)).map_or(1, |i| i + 1)
}

fn toml_to_json(v: &toml::Value) -> serde_json::Value {
    match v {
        toml::Value::String(s) => serde_json::Value::from(s.clone()),
        toml::Value::Integer(i) => serde_json::Value::from(*i),
        toml::Value::Float(f) => serde_json::Value::from(*f),
        toml::Value::Boolean(b) => serde_json::Value::from(*b),
        other => serde_json::Value::String(other.to_string()),
    }
}

fn build_spec(raw: RawSpec, fail: &dyn Fn(&str, String) -> CorpusError) -> Result<ValueSpec, CorpusError> {
    if let Some(values) = &raw.enum_values {
        if values.is_empty() {
            return Err(fail(&raw.name, format!("`{}` declares an empty enum", raw.name)));
        }
    }
    if let (Some(lo), Some(hi)) = (raw.min, raw.max) {
        if lo > hi {
            return Err(fail(&raw.name, format!("`{}` has min {lo} > max {hi}", raw.name)));
        }
    }
    let mut spec = ValueSpec {
        name: raw.name.clone(),
        kind: raw.kind,
        enum_values: raw.enum_values,
        min: raw.min,
        max: raw.max,
        default: None,
    };
    if let Some(d) = raw.default {
        let scalar = Scalar::coerce(&toml_to_json(&d), spec.kind)
            .ok_or_else(|| fail(&raw.name, format!("default for `{}` is not a {}", raw.name, spec.kind)))?;
        if spec.check(&scalar).is_some() {
            return Err(fail(
                &raw.name,
                format!("default for `{}` violates its own constraints", raw.name),
            ));
        }
        spec.default = Some(spec.normalize(scalar));
    }
    Ok(spec)
}

/// Parses one capability document.
pub fn parse_capability(text: &str, file: &Path) -> Result<CapabilitySchema, CorpusError> {
    let raw: RawCapability = toml::from_str(text).map_err(|e| CorpusError::Parse {
        file: file.to_path_buf(),
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let fail = |needle: &str, message: String| CorpusError::Parse {
        file: file.to_path_buf(),
        line: line_mentioning(text, needle),
        message,
    };
    let attributes = raw
        .attributes
        .into_iter()
        .map(|a| build_spec(a, &fail))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen = BTreeSet::new();
    for a in &attributes {
        if !seen.insert(a.name.clone()) {
            return Err(fail(&a.name, format!("attribute `{}` declared twice", a.name)));
        }
    }
    let mut commands = Vec::new();
    for rc in raw.commands {
        let arguments = rc
            .arguments
            .into_iter()
            .map(|a| build_spec(a, &fail))
            .collect::<Result<Vec<_>, _>>()?;
        let mut sets = Vec::new();
        for eff in rc.sets {
            let attr = attributes.iter().find(|a| a.name == eff.attribute).ok_or_else(|| {
                fail(
                    &eff.attribute,
                    format!("command `{}` sets unknown attribute `{}`", rc.name, eff.attribute),
                )
            })?;
            let source = match (eff.argument, eff.value) {
                (Some(arg), None) => {
                    let idx = arguments
                        .iter()
                        .position(|a| a.name == arg)
                        .ok_or_else(|| fail(&arg, format!("command `{}` has no argument `{arg}`", rc.name)))?;
                    EffectSource::Argument(idx)
                }
                (None, Some(v)) => {
                    let s = Scalar::coerce(&toml_to_json(&v), attr.kind)
                        .filter(|s| attr.check(s).is_none())
                        .ok_or_else(|| {
                            fail(
                                &eff.attribute,
                                format!("constant for `{}` violates the attribute schema", eff.attribute),
                            )
                        })?;
                    EffectSource::Constant(attr.normalize(s))
                }
                _ => {
                    return Err(fail(
                        &eff.attribute,
                        format!(
                            "effect on `{}` needs exactly one of `argument` or `value`",
                            eff.attribute
                        ),
                    ))
                }
            };
            sets.push(AttributeEffect {
                attribute: eff.attribute,
                source,
            });
        }
        commands.push(CommandSchema {
            name: rc.name,
            arguments,
            sets,
        });
    }
    Ok(CapabilitySchema {
        capability_name: raw.name,
        description: raw.description.trim().to_string(),
        commands,
        attributes,
    })
}

/// Loads every `*.toml` file in `dir` (sorted by file name).
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<SchemaCorpus, CorpusError> {
    let dir = dir.as_ref();
    let io = |source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    let mut origin: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut schemas = Vec::new();
    for file in files {
        let text = std::fs::read_to_string(&file).map_err(|source| CorpusError::Io {
            path: file.clone(),
            source,
        })?;
        let schema = parse_capability(&text, &file)?;
        if let Some(first) = origin.get(&schema.capability_name) {
            return Err(CorpusError::DuplicateCapability {
                name: schema.capability_name,
                first: first.clone(),
                second: file,
            });
        }
        origin.insert(schema.capability_name.clone(), file);
        schemas.push(schema);
    }
    Ok(SchemaCorpus::from_schemas(schemas))
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Violation {
    UnknownDevice {
        device: String,
    },
    UnknownCapability {
        device: String,
        capability: String,
    },
    UnknownCommand {
        capability: String,
        command: String,
    },
    UnknownAttribute {
        capability: String,
        attribute: String,
    },
    MissingArgument {
        command: String,
        argument: String,
    },
    UnknownArgument {
        command: String,
        position: usize,
    },
    ArgumentKindMismatch {
        argument: String,
        expected: ParamKind,
        found: ParamKind,
    },
    EnumViolation {
        argument: String,
        value: String,
        allowed: Vec<String>,
    },
    RangeViolation {
        argument: String,
        value: f64,
        min: Option<f64>,
        max: Option<f64>,
    },
    UnresolvedPlaceholder {
        argument: String,
        slot: String,
    },
}

impl Violation {
    fn from_spec(argument: &str, failure: SpecFailure) -> Self {
        let argument = argument.to_string();
        match failure {
            SpecFailure::Kind { expected, found } => Violation::ArgumentKindMismatch {
                argument,
                expected,
                found,
            },
            SpecFailure::Enum { value, allowed } => Violation::EnumViolation {
                argument,
                value,
                allowed,
            },
            SpecFailure::Range { value, min, max } => Violation::RangeViolation {
                argument,
                value,
                min,
                max,
            },
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownDevice { device } => write!(f, "unknown device `{device}`"),
            Violation::UnknownCapability { device, capability } => {
                write!(f, "device `{device}` has no capability `{capability}`")
            }
            Violation::UnknownCommand { capability, command } => {
                write!(f, "capability `{capability}` has no command `{command}`")
            }
            Violation::UnknownAttribute { capability, attribute } => {
                write!(f, "capability `{capability}` has no attribute `{attribute}`")
            }
            Violation::MissingArgument { command, argument } => {
                write!(f, "command `{command}` is missing argument `{argument}`")
            }
            Violation::UnknownArgument { command, position } => {
                write!(f, "command `{command}` takes no argument at position {position}")
            }
            Violation::ArgumentKindMismatch {
                argument,
                expected,
                found,
            } => {
                write!(f, "argument `{argument}` expects {expected}, got {found}")
            }
            Violation::EnumViolation {
                argument,
                value,
                allowed,
            } => {
                write!(f, "argument `{argument}` value `{value}` is not one of {allowed:?}")
            }
            Violation::RangeViolation {
                argument,
                value,
                min,
                max,
            } => {
                let lo = min.map_or("-inf".to_string(), |m| m.to_string());
                let hi = max.map_or("inf".to_string(), |m| m.to_string());
                write!(f, "argument `{argument}` value {value} outside [{lo}, {hi}]")
            }
            Violation::UnresolvedPlaceholder { argument, slot } => {
                write!(f, "argument `{argument}` still holds placeholder [{slot}]")
            }
        }
    }
}

/// Resolves the schemas a command refers to, or the structural violation.
pub fn resolve_command<'c>(
    cmd: &DeviceCommand,
    env: &[DeviceDescriptor],
    corpus: &'c SchemaCorpus,
) -> Result<(&'c CapabilitySchema, &'c CommandSchema), Violation> {
    let schema = resolve_capability(&cmd.device_name, &cmd.capability_name, env, corpus)?;
    let command = schema
        .command(&cmd.command_name)
        .ok_or_else(|| Violation::UnknownCommand {
            capability: cmd.capability_name.clone(),
            command: cmd.command_name.clone(),
        })?;
    Ok((schema, command))
}

fn resolve_capability<'c>(
    device: &str,
    capability: &str,
    env: &[DeviceDescriptor],
    corpus: &'c SchemaCorpus,
) -> Result<&'c CapabilitySchema, Violation> {
    let d = env
        .iter()
        .find(|d| d.device_name == device)
        .ok_or_else(|| Violation::UnknownDevice {
            device: device.to_string(),
        })?;
    if !d.capabilities.iter().any(|c| c == capability) {
        return Err(Violation::UnknownCapability {
            device: device.to_string(),
            capability: capability.to_string(),
        });
    }
    corpus.get(capability).ok_or_else(|| Violation::UnknownCapability {
        device: device.to_string(),
        capability: capability.to_string(),
    })
}

/// Checks a command against the environment and corpus. Empty list means valid.
pub fn validate_command(cmd: &DeviceCommand, env: &[DeviceDescriptor], corpus: &SchemaCorpus) -> Vec<Violation> {
    let command = match resolve_command(cmd, env, corpus) {
        Ok((_, c)) => c,
        Err(v) => return vec![v],
    };
    let mut out = Vec::new();
    for (i, spec) in command.arguments.iter().enumerate() {
        match cmd.arguments.get(i) {
            None => out.push(Violation::MissingArgument {
                command: command.name.clone(),
                argument: spec.name.clone(),
            }),
            Some(ParamValue::Placeholder { slot, .. }) => out.push(Violation::UnresolvedPlaceholder {
                argument: spec.name.clone(),
                slot: slot.name().to_string(),
            }),
            Some(ParamValue::Concrete(value)) => {
                if let Some(f) = spec.check(value) {
                    out.push(Violation::from_spec(&spec.name, f));
                }
            }
        }
    }
    for position in command.arguments.len()..cmd.arguments.len() {
        out.push(Violation::UnknownArgument {
            command: command.name.clone(),
            position,
        });
    }
    out
}

/// Checks a trigger predicate: the attribute exists and the reference value fits it.
pub fn validate_predicate(p: &TriggerPredicate, env: &[DeviceDescriptor], corpus: &SchemaCorpus) -> Vec<Violation> {
    let schema = match resolve_capability(&p.device_name, &p.capability_name, env, corpus) {
        Ok(s) => s,
        Err(v) => return vec![v],
    };
    match schema.attribute(&p.attribute_name) {
        None => vec![Violation::UnknownAttribute {
            capability: p.capability_name.clone(),
            attribute: p.attribute_name.clone(),
        }],
        Some(spec) => spec
            .check(&p.value)
            .map(|f| vec![Violation::from_spec(&spec.name, f)])
            .unwrap_or_default(),
    }
}

/// Schema argument names of a command, for naming positional arguments.
pub fn argument_names(cmd: &DeviceCommand, corpus: &SchemaCorpus) -> Vec<String> {
    let schema = corpus
        .get(&cmd.capability_name)
        .and_then(|s| s.command(&cmd.command_name));
    (0..cmd.arguments.len())
        .map(|i| {
            schema
                .and_then(|c| c.arguments.get(i))
                .map_or_else(|| format!("arg{i}"), |a| a.name.clone())
        })
        .collect()
}

pub fn argument_spec<'c>(cmd: &DeviceCommand, index: usize, corpus: &'c SchemaCorpus) -> Option<&'c ValueSpec> {
    corpus
        .get(&cmd.capability_name)?
        .command(&cmd.command_name)?
        .arguments
        .get(index)
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

/// Precomputed snippet embeddings for retrieval.
#[derive(Debug, Clone)]
pub struct SnippetIndex {
    vectors: BTreeMap<String, Vec<f64>>,
}

impl SnippetIndex {
    pub fn build(corpus: &SchemaCorpus, embedder: &dyn Embedder) -> Result<Self, LlmError> {
        let vectors = corpus
            .iter()
            .map(|s| Ok((s.capability_name.clone(), embedder.embed(&s.description)?)))
            .collect::<Result<_, LlmError>>()?;
        Ok(SnippetIndex { vectors })
    }
}

/// Ranks schemas by cosine similarity between `subtask_text` and each
/// capability's snippet, restricted to capabilities on available devices
/// (and to `device` when given). Ties go to the lexicographically smaller name.
pub fn retrieve_relevant<'c>(
    subtask_text: &str,
    corpus: &'c SchemaCorpus,
    index: &SnippetIndex,
    env: &[DeviceDescriptor],
    device: Option<&str>,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<&'c CapabilitySchema>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroBudget);
    }
    let available: Vec<&DeviceDescriptor> = env.iter().filter(|d| d.available).collect();
    if available.is_empty() {
        return Err(RetrievalError::EmptyEnvironment);
    }
    let allowed: BTreeSet<&str> = available
        .iter()
        .filter(|d| device.is_none_or(|name| d.device_name == name))
        .flat_map(|d| d.capabilities.iter().map(String::as_str))
        .collect();
    let query = embedder.embed(subtask_text)?;
    let mut scored: Vec<(f64, &CapabilitySchema)> = allowed
        .into_iter()
        .filter_map(|name| {
            let schema = corpus.get(name)?;
            let v = index.vectors.get(name)?;
            Some((cosine(&query, v), schema))
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.capability_name.cmp(&b.1.capability_name))
    });
    Ok(scored.into_iter().take(k).map(|(_, s)| s).collect())
}
