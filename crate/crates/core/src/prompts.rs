//! Stage prompt templates.
//!
//! Each template is a text file with a system part and a user part separated
//! by a line holding only `---`. `{name}` markers are substituted at render
//! time. Every template ends with a `Request: {…}` line, whose value is the
//! lookup key scripted providers match on.

use std::collections::BTreeMap;
use std::path::Path;

use crate::llm::{ChatMessage, ChatRequest, StageTag};

const SEPARATOR: &str = "\n---\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    system: String,
    user: String,
}

impl Template {
    pub fn parse(text: &str) -> Option<Self> {
        let (system, user) = text.split_once(SEPARATOR)?;
        if !user.contains("Request:") {
            return None;
        }
        Some(Template {
            system: system.trim().to_string(),
            user: user.trim().to_string(),
        })
    }

    /// Substitutes `{name}` markers; unknown markers are left as they are.
    pub fn render(&self, vars: &[(&str, &str)]) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(substitute(&self.system, vars)),
            ChatMessage::user(substitute(&self.user, vars)),
        ]
    }
}

fn substitute(text: &str, vars: &[(&str, &str)]) -> String {
    // Single pass so substituted values are never re-scanned for markers.
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let hit = after.find('}').and_then(|end| {
            let name = &after[..end];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (end, *v))
        });
        match hit {
            Some((end, value)) => {
                out.push_str(value);
                rest = &after[end + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Templates for every stage that talks to the language model.
#[derive(Debug, Clone)]
pub struct Prompts {
    templates: BTreeMap<StageTag, Template>,
}

fn file_name(stage: StageTag) -> &'static str {
    match stage {
        StageTag::Classify => "classify.txt",
        StageTag::Decompose => "decompose.txt",
        StageTag::Derive => "derive.txt",
        StageTag::ContextKeyword => "context_keyword.txt",
        StageTag::Refine => "refine.txt",
        StageTag::SelfCorrect => "self_correct.txt",
        StageTag::AlternativeSuggest => "alternative.txt",
        StageTag::PreferenceExtract => "preference_extract.txt",
    }
}

fn builtin_text(stage: StageTag) -> &'static str {
    match stage {
        StageTag::Classify => include_str!("../prompts/classify.txt"),
        StageTag::Decompose => include_str!("../prompts/decompose.txt"),
        StageTag::Derive => include_str!("../prompts/derive.txt"),
        StageTag::ContextKeyword => include_str!("../prompts/context_keyword.txt"),
        StageTag::Refine => include_str!("../prompts/refine.txt"),
        StageTag::SelfCorrect => include_str!("../prompts/self_correct.txt"),
        StageTag::AlternativeSuggest => include_str!("../prompts/alternative.txt"),
        StageTag::PreferenceExtract => include_str!("../prompts/preference_extract.txt"),
    }
}

impl Prompts {
    pub fn builtin() -> Self {
        let templates = StageTag::ALL
            .into_iter()
            .map(|s| {
                (
                    s,
                    Template::parse(builtin_text(s)).expect("bundled templates are well formed"),
                )
            })
            .collect();
        Prompts { templates }
    }

    /// Built-in templates overridden by any same-named files in `dir`.
    pub fn with_overrides(dir: impl AsRef<Path>) -> Result<Self, String> {
        let mut prompts = Self::builtin();
        for stage in StageTag::ALL {
            let path = dir.as_ref().join(file_name(stage));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let t = Template::parse(&text)
                .ok_or_else(|| format!("{}: expected a `---` separator and a `Request:` line", path.display()))?;
            prompts.templates.insert(stage, t);
        }
        Ok(prompts)
    }

    pub fn request(&self, stage: StageTag, vars: &[(&str, &str)]) -> ChatRequest {
        ChatRequest::new(stage, self.templates[&stage].render(vars))
    }
}
