use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, ChatResponse, LlmError, StageTag};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefaultBehavior {
    #[default]
    Error,
    /// Respond with the lookup key itself.
    Echo,
}

/// One scripted response. Exactly one of `key` (exact match) or `pattern`
/// (regex over the key) must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaybookEntry {
    pub stage: StageTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    /// Either a JSON value (sent as compact JSON text) or a plain string.
    pub response: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
    #[serde(default)]
    pub latency_ms: u64,
}

impl PlaybookEntry {
    pub fn exact(stage: StageTag, key: impl Into<String>, response: serde_json::Value) -> Self {
        PlaybookEntry {
            stage,
            key: Some(key.into()),
            pattern: None,
            response,
            input_tokens: None,
            output_tokens: None,
            latency_ms: 0,
        }
    }

    fn response_text(&self) -> String {
        match &self.response {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlaybookFile {
    #[serde(default = "default_model")]
    model_id: String,
    #[serde(default)]
    default_behavior: DefaultBehavior,
    entries: Vec<PlaybookEntry>,
}

fn default_model() -> String {
    "scripted".to_string()
}

/// Compiled playbook: exact entries indexed by (stage, key), pattern
/// entries kept in file order.
#[derive(Debug, Clone)]
pub struct Playbook {
    model_id: String,
    default_behavior: DefaultBehavior,
    exact: BTreeMap<(StageTag, String), PlaybookEntry>,
    patterns: Vec<(Regex, PlaybookEntry)>,
}

impl Playbook {
    pub fn new(model_id: impl Into<String>, default_behavior: DefaultBehavior) -> Self {
        Playbook {
            model_id: model_id.into(),
            default_behavior,
            exact: BTreeMap::new(),
            patterns: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let file: PlaybookFile = serde_json::from_str(text).map_err(|e| LlmError::InvalidPlaybook(e.to_string()))?;
        let mut pb = Playbook::new(file.model_id, file.default_behavior);
        for entry in file.entries {
            pb.add(entry)?;
        }
        Ok(pb)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| LlmError::InvalidPlaybook(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    /// Adds an entry; a second exact entry for the same (stage, key) is rejected.
    pub fn add(&mut self, entry: PlaybookEntry) -> Result<(), LlmError> {
        match (&entry.key, &entry.pattern) {
            (Some(key), None) => {
                let k = (entry.stage, key.clone());
                if self.exact.contains_key(&k) {
                    return Err(LlmError::InvalidPlaybook(format!(
                        "duplicate exact entry for {} `{key}`",
                        entry.stage
                    )));
                }
                self.exact.insert(k, entry);
            }
            (None, Some(p)) => {
                let re = Regex::new(p).map_err(|e| LlmError::InvalidPlaybook(e.to_string()))?;
                self.patterns.push((re, entry));
            }
            _ => {
                return Err(LlmError::InvalidPlaybook(format!(
                    "{} entry needs exactly one of `key` or `pattern`",
                    entry.stage
                )))
            }
        }
        Ok(())
    }

    /// Adds or replaces an exact entry.
    pub fn set(&mut self, entry: PlaybookEntry) -> Result<(), LlmError> {
        if let Some(key) = &entry.key {
            self.exact.remove(&(entry.stage, key.clone()));
        }
        self.add(entry)
    }

    pub fn len(&self) -> usize {
        self.exact.len() + self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, stage: StageTag, key: &str) -> Option<&PlaybookEntry> {
        self.exact.get(&(stage, key.to_string())).or_else(|| {
            self.patterns
                .iter()
                .find(|(re, e)| e.stage == stage && re.is_match(key))
                .map(|(_, e)| e)
        })
    }
}

fn estimate_tokens(chars: usize) -> u64 {
    chars.div_ceil(4) as u64
}

/// Deterministic provider answering from a [`Playbook`].
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    playbook: Playbook,
}

impl ScriptedProvider {
    pub fn new(playbook: Playbook) -> Self {
        ScriptedProvider { playbook }
    }

    pub fn playbook(&self) -> &Playbook {
        &self.playbook
    }
}

impl ChatProvider for ScriptedProvider {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let key = req.key();
        let prompt_chars: usize = req.messages.iter().map(|m| m.content.chars().count()).sum();
        let (text, input, output, latency) = match self.playbook.lookup(req.stage, &key) {
            Some(entry) => {
                let text = entry.response_text();
                let out = entry
                    .output_tokens
                    .unwrap_or_else(|| estimate_tokens(text.chars().count()));
                let inp = entry.input_tokens.unwrap_or_else(|| estimate_tokens(prompt_chars));
                (text, inp, out, entry.latency_ms)
            }
            None => match self.playbook.default_behavior {
                DefaultBehavior::Error => return Err(LlmError::PlaybookMiss { stage: req.stage, key }),
                DefaultBehavior::Echo => {
                    let out = estimate_tokens(key.chars().count());
                    (key, estimate_tokens(prompt_chars), out, 0)
                }
            },
        };
        Ok(ChatResponse {
            text,
            input_tokens: input,
            output_tokens: output,
            model_id: self.playbook.model_id.clone(),
            latency_ms: latency,
        })
    }
}
