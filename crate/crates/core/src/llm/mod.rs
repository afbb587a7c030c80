//! Uniform access to chat-completion and embedding providers.
//!
//! The [`Gateway`] wraps a [`ChatProvider`] and an [`Embedder`], records
//! every successful chat call in the [`CostLedger`] under a session id, and
//! derives per-session call traces from it.

mod embed;
mod http;
mod ledger;
mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{cosine, HashEmbedder, EMBED_DIM};
pub use http::{HttpConfig, HttpProvider};
pub use ledger::{format_decimal, parse_decimal, to_f64, CostLedger, LedgerEntry, Price, PricingTable};
pub use scripted::{DefaultBehavior, Playbook, PlaybookEntry, ScriptedProvider};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("provider unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("no playbook entry for stage {stage} and key `{key}`")]
    PlaybookMiss { stage: StageTag, key: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("chat request has no messages")]
    EmptyRequest,
    #[error("invalid playbook: {0}")]
    InvalidPlaybook(String),
    #[error("invalid pricing table: {0}")]
    InvalidPricing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageTag {
    Classify,
    Decompose,
    Derive,
    Refine,
    SelfCorrect,
    ContextKeyword,
    PreferenceExtract,
    AlternativeSuggest,
}

impl StageTag {
    pub const ALL: [StageTag; 8] = [
        StageTag::Classify,
        StageTag::Decompose,
        StageTag::Derive,
        StageTag::ContextKeyword,
        StageTag::Refine,
        StageTag::SelfCorrect,
        StageTag::AlternativeSuggest,
        StageTag::PreferenceExtract,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageTag::Classify => "Classify",
            StageTag::Decompose => "Decompose",
            StageTag::Derive => "Derive",
            StageTag::Refine => "Refine",
            StageTag::SelfCorrect => "SelfCorrect",
            StageTag::ContextKeyword => "ContextKeyword",
            StageTag::PreferenceExtract => "PreferenceExtract",
            StageTag::AlternativeSuggest => "AlternativeSuggest",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub stage: StageTag,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn new(stage: StageTag, messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            stage,
            messages,
            temperature: 0.0,
        }
    }

    /// Text after the last `Request:` marker of the final user message —
    /// the lookup key prompt templates expose to scripted providers.
    pub fn key(&self) -> String {
        let last_user = self
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str());
        match last_user.rfind("Request:") {
            Some(i) => last_user[i + "Request:".len()..].trim().to_string(),
            None => last_user.trim().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub model_id: String,
    /// Provider-reported or simulated latency in milliseconds.
    pub latency_ms: u64,
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

/// Produces unit-norm embedding vectors.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError>;
}

/// Chat + embedding front door with per-session accounting.
pub struct Gateway {
    chat: Arc<dyn ChatProvider>,
    embedder: Arc<dyn Embedder>,
    ledger: CostLedger,
}

impl Gateway {
    pub fn new(chat: Arc<dyn ChatProvider>, embedder: Arc<dyn Embedder>, pricing: PricingTable) -> Self {
        Gateway {
            chat,
            embedder,
            ledger: CostLedger::new(pricing),
        }
    }

    pub fn chat(&self, session: &str, req: ChatRequest) -> Result<ChatResponse, LlmError> {
        if req.messages.is_empty() {
            return Err(LlmError::EmptyRequest);
        }
        let resp = self.chat.chat(&req)?;
        self.ledger.record(LedgerEntry {
            session: session.to_string(),
            stage: req.stage,
            model_id: resp.model_id.clone(),
            input_tokens: resp.input_tokens,
            output_tokens: resp.output_tokens,
            latency_ms: resp.latency_ms,
        });
        tracing::debug!(session, stage = %req.stage, input = resp.input_tokens, output = resp.output_tokens, "chat call");
        Ok(resp)
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        self.embedder.embed(text)
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    /// Per-stage call counts for one session, in pipeline stage order;
    /// stages never called are omitted.
    pub fn call_trace(&self, session: &str) -> Vec<(StageTag, u32)> {
        self.ledger.call_trace(session)
    }
}
