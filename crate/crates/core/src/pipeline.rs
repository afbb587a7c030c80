//! The Decompose → Derive → Refine pipeline with memory recall, two-step
//! correction and feedback handling.
//!
//! [`Pipeline::run`] turns an instruction into a [`TaskProposal`] awaiting
//! review (or a `Failed` one carrying the reason). Task memory is consulted
//! before each stage so recalled work skips the corresponding model calls.
//! [`Pipeline::apply_feedback`] edits a proposal under review and
//! [`Pipeline::approve`] performs the approval side effects in crash-safe
//! order: memory commit, preference logging, then the live home.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::capability::{
    argument_names, argument_spec, retrieve_relevant, validate_command, validate_predicate, RetrievalError,
    SchemaCorpus, SnippetIndex, Violation, DEFAULT_RETRIEVAL_K,
};
use crate::domain::{
    parse_decompose_output, parse_derive_output, DeviceCommand, DeviceDescriptor, DomainError, InstructionType,
    ParamValue, ProposalStatus, Provenance, QueryResult, Scalar, SlotResolution, Subtask, SubtaskRole, TaskProposal,
    TriggerPredicate, ValueSource,
};
use crate::home::{ExecutionRecord, HomeError, HomeState};
use crate::llm::{Gateway, LlmError, StageTag};
use crate::memory::{instantiate, CommitDelta, MemoryError, MemoryScope, NodeId, TaskMemory};
use crate::preference::{
    normalize_keyword, parse_llm_tables, property_targets, select_table, EffectMap, InteractionLogEntry,
    PreferenceError, PreferenceStore, PreferenceTable, PreferenceTables, NORMAL_CONTEXT,
};
use crate::prompts::Prompts;

pub const DEFAULT_RETRY_LIMIT: u32 = 3;
pub const DEFAULT_TAU_TASK: f64 = 0.85;
pub const DEFAULT_TAU_SUBTASK: f64 = 0.80;

/// Stage name of the marker event emitted when a proposal is ready for review.
pub const REVIEW_STAGE: &str = "EscalateToUser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Self-correction rounds before escalating to the user, in [1, 5].
    pub retry_limit: u32,
    pub tau_task: f64,
    pub tau_subtask: f64,
    /// Capability schemas retrieved per Derive call.
    pub retrieval_k: usize,
    pub memory: MemoryScope,
    /// When false, Derive works on the whole instruction in one call.
    pub decompose: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            retry_limit: DEFAULT_RETRY_LIMIT,
            tau_task: DEFAULT_TAU_TASK,
            tau_subtask: DEFAULT_TAU_SUBTASK,
            retrieval_k: DEFAULT_RETRIEVAL_K,
            memory: MemoryScope::Full,
            decompose: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(1..=5).contains(&self.retry_limit) {
            return Err(PipelineError::Config(format!(
                "retry_limit must be in [1, 5], got {}",
                self.retry_limit
            )));
        }
        for (name, tau) in [("tau_task", self.tau_task), ("tau_subtask", self.tau_subtask)] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(PipelineError::Config(format!("{name} must be in (0, 1], got {tau}")));
            }
        }
        if self.retrieval_k == 0 {
            return Err(PipelineError::Config("retrieval_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("{stage} call failed: {source}")]
    Provider {
        stage: StageTag,
        #[source]
        source: LlmError,
    },
    #[error("cannot classify instruction from response `{0}`")]
    UnparseableClassification(String),
    #[error("{stage} response is malformed: {message}")]
    Malformed { stage: StageTag, message: String },
    #[error("decomposition names devices that do not exist: {}", .0.join(", "))]
    HallucinatedDevice(Vec<String>),
    #[error("no capability documentation available for subtask `{subtask}`: {source}")]
    Retrieval {
        subtask: String,
        #[source]
        source: RetrievalError,
    },
    #[error("placeholder [{slot}] of subtask `{subtask}` has no preference value and no schema default")]
    UnresolvedAfterRefine { subtask: String, slot: String },
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Home(#[from] HomeError),
    #[error("proposal is {0:?}; feedback needs a proposal awaiting review")]
    WrongStatus(ProposalStatus),
    #[error("no subtask at index {0}")]
    InvalidIndex(usize),
    #[error("subtask {subtask} has no argument or placeholder named `{slot}`")]
    UnknownSlot { subtask: usize, slot: String },
    #[error("value rejected: {}", join(.0))]
    SchemaViolation(Vec<Violation>),
    #[error("proposal still has {0} unresolved placeholder(s)")]
    Unresolved(usize),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Started,
    Completed,
    Skipped,
    Notice,
    Failed,
}

/// One progress update, streamed to clients while a proposal is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    pub stage: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Read-only state a pipeline run works against.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub home: &'a HomeState,
    pub memory: &'a TaskMemory,
    pub tables: &'a PreferenceTables,
}

/// User feedback on a proposal under review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Feedback {
    AddSubtask {
        text: String,
        #[serde(default)]
        device: Option<String>,
    },
    RemoveSubtask {
        index: usize,
    },
    SetParameter {
        subtask: usize,
        slot: String,
        value: Value,
    },
    Approve,
    Reject,
}

/// What approving a proposal changed.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ApprovalOutcome {
    pub memory: Option<CommitDelta>,
    pub logged: Vec<InteractionLogEntry>,
    pub executions: Vec<ExecutionRecord>,
    pub rule_id: Option<String>,
    pub query_results: Vec<QueryResult>,
}

pub struct Pipeline {
    config: PipelineConfig,
    gateway: Arc<Gateway>,
    corpus: Arc<SchemaCorpus>,
    index: SnippetIndex,
    effects: Arc<EffectMap>,
    prompts: Prompts,
}

/// A subtask under construction plus the memory node it was recalled from.
#[derive(Debug, Clone)]
struct Draft {
    subtask: Subtask,
    node: Option<NodeId>,
    context_hit: bool,
}

impl Draft {
    fn fresh(subtask: Subtask) -> Self {
        Draft {
            subtask,
            node: None,
            context_hit: false,
        }
    }
}

#[derive(Debug, Clone)]
struct TrialError {
    subtask: usize,
    command: Option<usize>,
    message: String,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        gateway: Arc<Gateway>,
        corpus: Arc<SchemaCorpus>,
        effects: Arc<EffectMap>,
        prompts: Prompts,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let index = SnippetIndex::build(&corpus, gateway.embedder()).map_err(|source| PipelineError::Provider {
            stage: StageTag::Derive,
            source,
        })?;
        Ok(Pipeline {
            config,
            gateway,
            corpus,
            index,
            effects,
            prompts,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn corpus(&self) -> &Arc<SchemaCorpus> {
        &self.corpus
    }

    pub fn effects(&self) -> &EffectMap {
        &self.effects
    }

    /// Builds a proposal for `instruction`. Never panics on model output:
    /// any unrecoverable problem yields a `Failed` proposal with the reason.
    pub fn run(
        &self,
        proposal_id: &str,
        instruction: &str,
        ctx: RunContext<'_>,
        progress: &mut dyn FnMut(ProgressEvent),
    ) -> TaskProposal {
        let mut run = Run {
            pipeline: self,
            session: proposal_id.to_string(),
            ctx,
            progress,
            proposal: TaskProposal::new(proposal_id, instruction, InstructionType::DirectControl),
            drafts: Vec::new(),
        };
        match run.execute() {
            Ok(()) => {
                run.finish_subtasks();
                run.proposal
                    .transition(ProposalStatus::AwaitingReview)
                    .expect("drafting proposal");
                run.emit(REVIEW_STAGE, StageStatus::Completed, "awaiting review");
            }
            Err(e) => {
                tracing::warn!(proposal = proposal_id, error = %e, "pipeline failed");
                run.finish_subtasks();
                run.proposal.failure = Some(e.to_string());
                run.proposal
                    .transition(ProposalStatus::Failed)
                    .expect("drafting proposal");
                run.emit("Pipeline", StageStatus::Failed, &e.to_string());
            }
        }
        let mut proposal = run.proposal;
        proposal.call_trace = self.trace(proposal_id);
        proposal
    }

    fn trace(&self, session: &str) -> Vec<(String, u32)> {
        self.gateway
            .call_trace(session)
            .into_iter()
            .map(|(s, n)| (s.name().to_string(), n))
            .collect()
    }

    /// Applies one piece of feedback. `Approve` and `Reject` only change
    /// the status here; see [`Pipeline::approve`] for approval effects.
    pub fn apply_feedback(
        &self,
        proposal: &mut TaskProposal,
        feedback: &Feedback,
        ctx: RunContext<'_>,
        progress: &mut dyn FnMut(ProgressEvent),
    ) -> Result<(), PipelineError> {
        if proposal.status() != ProposalStatus::AwaitingReview {
            return Err(PipelineError::WrongStatus(proposal.status()));
        }
        match feedback {
            Feedback::Approve => {
                if proposal.placeholder_count() > 0 {
                    return Err(PipelineError::Unresolved(proposal.placeholder_count()));
                }
                proposal.transition(ProposalStatus::Approved)?;
            }
            Feedback::Reject => proposal.transition(ProposalStatus::Rejected)?,
            Feedback::RemoveSubtask { index } => {
                if *index >= proposal.subtasks.len() {
                    return Err(PipelineError::InvalidIndex(*index));
                }
                proposal.subtasks.remove(*index);
            }
            Feedback::SetParameter { subtask, slot, value } => {
                self.set_parameter(proposal, *subtask, slot, value, ctx.home)?;
            }
            Feedback::AddSubtask { text, device } => {
                let mut run = Run {
                    pipeline: self,
                    session: proposal.proposal_id.clone(),
                    ctx,
                    progress,
                    proposal: proposal.clone(),
                    drafts: Vec::new(),
                };
                let device = device.clone().unwrap_or_default();
                let mut draft = Draft::fresh(Subtask::new(text.clone(), device, Provenance::AddedByUser));
                run.derive_one(&mut draft, None)?;
                if draft.subtask.device_name.is_empty() {
                    if let Some(c) = draft.subtask.commands.first() {
                        draft.subtask.device_name = c.device_name.clone();
                    }
                }
                run.drafts.push(draft);
                let table = run.table()?;
                run.compute_targets(&table, &[0]);
                if run.drafts[0].subtask.has_placeholders() {
                    run.refine(&format!("added: {text}"), &table, &[0], false)?;
                }
                run.fill_defaults(&[0])?;
                let mut notices = std::mem::take(&mut run.proposal.notices);
                let added = run.drafts.pop().expect("one draft").subtask;
                proposal.subtasks.push(added);
                proposal.notices.append(&mut notices);
                proposal.notices.dedup();
            }
        }
        proposal.call_trace = self.trace(&proposal.proposal_id);
        Ok(())
    }

    fn set_parameter(
        &self,
        proposal: &mut TaskProposal,
        index: usize,
        slot: &str,
        value: &Value,
        home: &HomeState,
    ) -> Result<(), PipelineError> {
        let subtask = proposal
            .subtasks
            .get_mut(index)
            .ok_or(PipelineError::InvalidIndex(index))?;
        let mut target = None;
        'outer: for (ci, cmd) in subtask.commands.iter().enumerate() {
            let names = argument_names(cmd, &self.corpus);
            for (ai, arg) in cmd.arguments.iter().enumerate() {
                let by_placeholder = arg.slot().is_some_and(|s| s.name() == slot);
                let by_resolution = subtask
                    .resolutions
                    .iter()
                    .any(|r| r.command == ci && r.argument == ai && r.slot.name() == slot);
                let by_name = names.get(ai).is_some_and(|n| n == slot);
                if by_placeholder || by_resolution || by_name {
                    target = Some((ci, ai));
                    break 'outer;
                }
            }
        }
        let (ci, ai) = target.ok_or_else(|| PipelineError::UnknownSlot {
            subtask: index,
            slot: slot.to_string(),
        })?;
        let cmd = &subtask.commands[ci];
        let spec = argument_spec(cmd, ai, &self.corpus);
        let kind = spec.map_or(cmd.arguments[ai].kind(), |s| s.kind);
        let scalar = Scalar::coerce(value, kind).ok_or_else(|| {
            PipelineError::SchemaViolation(vec![Violation::ArgumentKindMismatch {
                argument: slot.to_string(),
                expected: kind,
                found: Scalar::coerce(value, crate::domain::ParamKind::String)
                    .map_or(crate::domain::ParamKind::String, |s| s.kind()),
            }])
        })?;
        let mut candidate = cmd.clone();
        candidate.arguments[ai] = ParamValue::concrete(spec.map_or(scalar.clone(), |s| s.normalize(scalar)))?;
        let violations = validate_command(&candidate, &home.descriptors(), &self.corpus);
        if !violations.is_empty() {
            return Err(PipelineError::SchemaViolation(violations));
        }
        let slot_name = match &cmd.arguments[ai] {
            ParamValue::Placeholder { slot, .. } => slot.clone(),
            ParamValue::Concrete(_) => subtask
                .resolutions
                .iter()
                .find(|r| r.command == ci && r.argument == ai)
                .map(|r| r.slot.clone())
                .map_or_else(
                    || crate::domain::Slot::new(format!("{}_value", argument_names(cmd, &self.corpus)[ai])),
                    Ok,
                )?,
        };
        subtask.commands[ci] = candidate;
        subtask.resolutions.retain(|r| !(r.command == ci && r.argument == ai));
        subtask.resolutions.push(SlotResolution {
            command: ci,
            argument: ai,
            slot: slot_name,
            source: ValueSource::User,
        });
        Ok(())
    }

    /// Performs approval: commits memory, appends preference logs, then
    /// executes / installs / answers on the live home. The proposal must be
    /// awaiting review (it is marked approved here) or already approved.
    pub fn approve(
        &self,
        proposal: &mut TaskProposal,
        memory: &mut TaskMemory,
        prefs: &mut PreferenceStore,
        home: &mut HomeState,
    ) -> Result<ApprovalOutcome, PipelineError> {
        let mut approved = proposal.clone();
        match approved.status() {
            ProposalStatus::AwaitingReview => {
                if approved.placeholder_count() > 0 {
                    return Err(PipelineError::Unresolved(approved.placeholder_count()));
                }
                approved.transition(ProposalStatus::Approved)?;
            }
            other => return Err(PipelineError::WrongStatus(other)),
        }
        let rule = approved.to_rule();
        if let Some(rule) = &rule {
            // Reject before any side effect so approval is all-or-nothing.
            let env = home.descriptors();
            let mut violations: Vec<Violation> = rule
                .actions
                .iter()
                .flat_map(|c| validate_command(c, &env, &self.corpus))
                .collect();
            violations.extend(
                rule.triggers
                    .iter()
                    .flat_map(|t| validate_predicate(t, &env, &self.corpus)),
            );
            if !violations.is_empty() {
                return Err(PipelineError::SchemaViolation(violations));
            }
        }
        let mut next_memory = memory.clone();
        let delta = next_memory.commit_proposal(
            &approved,
            self.gateway.embedder(),
            self.config.tau_task,
            self.config.tau_subtask,
            self.config.memory,
            &self.corpus,
        )?;
        *memory = next_memory;
        let mut outcome = ApprovalOutcome {
            memory: (self.config.memory != MemoryScope::Off).then_some(delta),
            ..Default::default()
        };
        if approved.instruction_type != InstructionType::DeviceQuery {
            outcome.logged = prefs.append_feedback_logs(&approved);
        }
        match approved.instruction_type {
            InstructionType::DirectControl => {
                let cmds: Vec<DeviceCommand> = approved.action_commands().cloned().collect();
                outcome.executions = cmds.iter().map(|c| home.execute(c)).collect();
            }
            InstructionType::TriggerAction => {
                if let Some(rule) = rule {
                    outcome.rule_id = Some(rule.rule_id.clone());
                    home.install_rule(rule)?;
                }
            }
            InstructionType::DeviceQuery => {
                outcome.query_results = approved
                    .query_targets()
                    .map(|t| match home.query(&t.device_name, &t.attribute_name) {
                        Ok(v) => QueryResult {
                            target: t.clone(),
                            value: Some(v),
                            error: None,
                        },
                        Err(e) => QueryResult {
                            target: t.clone(),
                            value: None,
                            error: Some(e.to_string()),
                        },
                    })
                    .collect();
                approved.query_results = outcome.query_results.clone();
            }
        }
        *proposal = approved;
        Ok(outcome)
    }

    /// Model-based preference extraction; falls back to `baseline` when the
    /// response cannot be parsed into tables.
    pub fn extract_preferences(
        &self,
        session: &str,
        logs: &[InteractionLogEntry],
        baseline: &PreferenceTables,
    ) -> Result<PreferenceTables, PipelineError> {
        if logs.is_empty() {
            return Err(PreferenceError::EmptyLogs.into());
        }
        let effects = serde_json::to_string(&self.effects.effects).unwrap_or_default();
        let log_text: String = logs
            .iter()
            .map(|e| serde_json::to_string(e).unwrap_or_default() + "\n")
            .collect();
        let key = format!("logs: {}", logs.len());
        let req = self.prompts.request(
            StageTag::PreferenceExtract,
            &[("effects", &effects), ("logs", &log_text), ("key", &key)],
        );
        let resp = self
            .gateway
            .chat(session, req)
            .map_err(|source| PipelineError::Provider {
                stage: StageTag::PreferenceExtract,
                source,
            })?;
        let parsed = extract_json(&resp.text)
            .ok_or_else(|| PreferenceError::UnparseableTable("no JSON in response".into()))
            .and_then(|v| parse_llm_tables(&v, logs, &self.effects));
        match parsed {
            Ok(t) => Ok(t),
            Err(e) => {
                tracing::warn!(error = %e, "model preference tables unusable; using baseline");
                Ok(baseline.clone())
            }
        }
    }
}

/// State of one pipeline invocation.
struct Run<'p, 'c, 'g> {
    pipeline: &'p Pipeline,
    session: String,
    ctx: RunContext<'c>,
    progress: &'g mut dyn FnMut(ProgressEvent),
    proposal: TaskProposal,
    drafts: Vec<Draft>,
}

impl Run<'_, '_, '_> {
    fn emit(&mut self, stage: &str, status: StageStatus, detail: &str) {
        (self.progress)(ProgressEvent {
            stage: stage.to_string(),
            status,
            detail: detail.to_string(),
        });
    }

    fn notice(&mut self, text: String) {
        self.emit("Notice", StageStatus::Notice, &text);
        self.proposal.notices.push(text);
    }

    fn finish_subtasks(&mut self) {
        if !self.drafts.is_empty() {
            self.proposal.subtasks = self.drafts.iter().map(|d| d.subtask.clone()).collect();
        }
    }

    fn env(&self) -> Vec<DeviceDescriptor> {
        self.ctx.home.descriptors()
    }

    fn call(&mut self, stage: StageTag, vars: &[(&str, &str)]) -> Result<String, PipelineError> {
        self.emit(stage.name(), StageStatus::Started, "");
        let req = self.pipeline.prompts.request(stage, vars);
        match self.pipeline.gateway.chat(&self.session, req) {
            Ok(resp) => {
                self.emit(stage.name(), StageStatus::Completed, "");
                Ok(resp.text)
            }
            Err(source) => {
                self.emit(stage.name(), StageStatus::Failed, &source.to_string());
                Err(PipelineError::Provider { stage, source })
            }
        }
    }

    fn call_json(&mut self, stage: StageTag, vars: &[(&str, &str)]) -> Result<Value, PipelineError> {
        let text = self.call(stage, vars)?;
        extract_json(&text).ok_or_else(|| PipelineError::Malformed {
            stage,
            message: format!("no JSON value in `{}`", truncate(&text, 200)),
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, PipelineError> {
        self.pipeline
            .gateway
            .embed(text)
            .map_err(|e| PipelineError::Memory(MemoryError::Embedding(e)))
    }

    fn execute(&mut self) -> Result<(), PipelineError> {
        let instruction = self.proposal.instruction_text.clone();
        let scope = self.pipeline.config.memory;

        // Task-level recall replaces classification, decomposition and derivation.
        let recalled = if scope == MemoryScope::Off {
            None
        } else {
            let emb = self.embed(&instruction)?;
            self.ctx
                .memory
                .match_task(&emb, self.pipeline.config.tau_task)
                .map(|(t, sim)| (t.clone(), sim))
        };
        if let Some((task, sim)) = recalled {
            self.emit(
                "TaskMemory",
                StageStatus::Completed,
                &format!("recalled task {} (similarity {sim:.3})", task.node_id),
            );
            self.proposal.instruction_type = task.instruction_type;
            for node in self.ctx.memory.subtasks_of(&task) {
                let mut s = Subtask::new(
                    node.description_text.clone(),
                    node.device_name.clone(),
                    Provenance::ReusedFromMemory,
                )
                .with_role(node.role);
                s.commands = node.command_template.clone();
                s.condition = node.condition.clone();
                s.query = node.query.clone();
                self.drafts.push(Draft {
                    subtask: s,
                    node: Some(node.node_id),
                    context_hit: false,
                });
            }
            for stage in [StageTag::Classify, StageTag::Decompose, StageTag::Derive] {
                self.emit(stage.name(), StageStatus::Skipped, "recalled from memory");
            }
            self.handle_unavailable(&instruction, true)?;
        } else {
            self.proposal.instruction_type = self.classify(&instruction)?;
            if self.pipeline.config.decompose || self.proposal.instruction_type == InstructionType::DeviceQuery {
                self.decompose(&instruction)?;
                self.handle_unavailable(&instruction, false)?;
                let pending: Vec<usize> = (0..self.drafts.len())
                    .filter(|&i| !self.drafts[i].subtask.is_derived())
                    .collect();
                for i in pending {
                    let mut d = self.drafts[i].clone();
                    self.materialize(&mut d)?;
                    self.drafts[i] = d;
                }
            } else {
                self.derive_whole(&instruction)?;
                self.handle_unavailable(&instruction, true)?;
            }
        }

        // Context keyword and per-subtask context recall.
        let keyword = if self.proposal.instruction_type == InstructionType::DeviceQuery {
            self.emit(StageTag::ContextKeyword.name(), StageStatus::Skipped, "device query");
            NORMAL_CONTEXT.to_string()
        } else {
            let text = self.call(StageTag::ContextKeyword, &[("instruction", &instruction)])?;
            normalize_keyword(text.lines().next().unwrap_or_default())
        };
        self.proposal.context_keyword = keyword.clone();
        if scope != MemoryScope::Off {
            for d in &mut self.drafts {
                let Some(node) = d.node.and_then(|id| self.ctx.memory.subtask(id)) else {
                    continue;
                };
                if let Some(c) = self.ctx.memory.match_context(node, &keyword) {
                    let (commands, resolutions) = instantiate(&d.subtask.commands, &c.bindings, ValueSource::Memory);
                    d.subtask.commands = commands;
                    d.subtask.resolutions = resolutions;
                    d.context_hit = true;
                }
            }
        }

        if self.proposal.instruction_type != InstructionType::DeviceQuery {
            let table = self.table()?;
            let actions: Vec<usize> = self.action_indices();
            self.compute_targets(&table, &actions);
            let needs_refine = actions.iter().any(|&i| !self.drafts[i].context_hit);
            if needs_refine {
                self.refine(&instruction, &table, &actions, true)?;
            } else {
                self.emit(
                    StageTag::Refine.name(),
                    StageStatus::Skipped,
                    "all subtasks recalled for this context",
                );
            }
            let actions = self.action_indices();
            self.fill_defaults(&actions)?;
        }

        self.self_correct(&instruction)?;
        Ok(())
    }

    fn action_indices(&self) -> Vec<usize> {
        (0..self.drafts.len())
            .filter(|&i| self.drafts[i].subtask.role == SubtaskRole::Action)
            .collect()
    }

    fn table(&self) -> Result<PreferenceTable, PipelineError> {
        Ok(select_table(self.ctx.tables, &self.proposal.context_keyword)?.clone())
    }

    fn classify(&mut self, instruction: &str) -> Result<InstructionType, PipelineError> {
        let devices = render_devices(&self.env(), &self.pipeline.corpus);
        let text = self.call(
            StageTag::Classify,
            &[("devices", &devices), ("instruction", instruction)],
        )?;
        if let Ok(t) = InstructionType::from_wire(text.trim()) {
            return Ok(t);
        }
        let lower = text.to_lowercase();
        InstructionType::ALL
            .into_iter()
            .find(|t| lower.contains(&t.wire_name().to_lowercase()))
            .ok_or(PipelineError::UnparseableClassification(truncate(&text, 200)))
    }

    fn decompose(&mut self, instruction: &str) -> Result<(), PipelineError> {
        let kind = self.proposal.instruction_type;
        let devices = render_devices(&self.env(), &self.pipeline.corpus);
        let known: BTreeSet<String> = self.env().into_iter().map(|d| d.device_name).collect();
        let mut feedback = String::new();
        let mut key = instruction.to_string();
        for attempt in 0..2 {
            let v = self.call_json(
                StageTag::Decompose,
                &[
                    ("instruction_type", kind.wire_name()),
                    ("feedback", &feedback),
                    ("devices", &devices),
                    ("key", &key),
                ],
            )?;
            let out = parse_decompose_output(&v, kind).map_err(|e| PipelineError::Malformed {
                stage: StageTag::Decompose,
                message: e.to_string(),
            })?;
            if let Some(t) = out.command_type {
                if t != kind {
                    self.notice(format!("decomposition reported `{t}`; keeping classification `{kind}`"));
                }
            }
            let unknown: Vec<String> = out
                .subtasks
                .iter()
                .map(|s| s.device_name.clone())
                .filter(|d| !known.contains(d))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if unknown.is_empty() {
                self.drafts = out.subtasks.into_iter().map(Draft::fresh).collect();
                return Ok(());
            }
            if attempt == 1 {
                return Err(PipelineError::HallucinatedDevice(unknown));
            }
            self.emit(
                StageTag::Decompose.name(),
                StageStatus::Notice,
                &format!("unknown devices {unknown:?}; asking again"),
            );
            feedback = format!(
                "Your previous answer used devices that do not exist: {}. Use only the listed devices.",
                unknown.join(", ")
            );
            key = format!("retry: {instruction}");
        }
        unreachable!("loop returns on the second attempt")
    }

    /// Subtask-level recall (full memory scope), else Derive.
    fn materialize(&mut self, draft: &mut Draft) -> Result<(), PipelineError> {
        if self.pipeline.config.memory == MemoryScope::Full && draft.subtask.role != SubtaskRole::Query {
            let emb = self.embed(&draft.subtask.description)?;
            let hit = self
                .ctx
                .memory
                .match_subtask(
                    &emb,
                    &draft.subtask.device_name,
                    draft.subtask.role,
                    self.pipeline.config.tau_subtask,
                )
                .map(|(n, _)| n.clone());
            if let Some(node) = hit {
                self.emit(
                    "SubtaskMemory",
                    StageStatus::Completed,
                    &format!("`{}` recalled from node {}", draft.subtask.description, node.node_id),
                );
                draft.subtask.commands = node.command_template.clone();
                draft.subtask.condition = node.condition.clone();
                if draft.subtask.provenance == Provenance::FreshlyDecomposed {
                    draft.subtask.provenance = Provenance::ReusedFromMemory;
                }
                draft.node = Some(node.node_id);
                return Ok(());
            }
        }
        let device = draft.subtask.device_name.clone();
        self.derive_one(draft, Some(&device))
    }

    fn schemas_for(&self, text: &str, device: Option<&str>) -> Result<String, PipelineError> {
        let env = self.env();
        let found = retrieve_relevant(
            text,
            &self.pipeline.corpus,
            &self.pipeline.index,
            &env,
            device,
            self.pipeline.config.retrieval_k,
            self.pipeline.gateway.embedder(),
        )
        .map_err(|source| PipelineError::Retrieval {
            subtask: text.to_string(),
            source,
        })?;
        if found.is_empty() {
            return Err(PipelineError::Retrieval {
                subtask: text.to_string(),
                source: RetrievalError::EmptyEnvironment,
            });
        }
        Ok(found
            .iter()
            .map(|s| serde_json::to_string(s).unwrap_or_default())
            .collect::<Vec<_>>()
            .join("\n"))
    }

    fn derive_one(&mut self, draft: &mut Draft, device: Option<&str>) -> Result<(), PipelineError> {
        let device = device.filter(|d| !d.is_empty());
        let text = draft.subtask.description.clone();
        let schemas = self.schemas_for(&text, device)?;
        let instruction = self.proposal.instruction_text.clone();
        let v = self.call_json(
            StageTag::Derive,
            &[
                ("instruction", &instruction),
                ("device", device.unwrap_or("any")),
                ("schemas", &schemas),
                ("key", &text),
            ],
        )?;
        let out = parse_derive_output(&v).map_err(|e| PipelineError::Malformed {
            stage: StageTag::Derive,
            message: e.to_string(),
        })?;
        if draft.subtask.device_name.is_empty() {
            draft.subtask.device_name = out.device().unwrap_or_default().to_string();
        }
        if out.condition.is_some() {
            draft.subtask.role = SubtaskRole::Trigger;
        }
        draft.subtask.commands = out.commands;
        draft.subtask.condition = out.condition;
        Ok(())
    }

    /// Ablation path: Derive the whole instruction in one call.
    fn derive_whole(&mut self, instruction: &str) -> Result<(), PipelineError> {
        self.emit(
            StageTag::Decompose.name(),
            StageStatus::Skipped,
            "decomposition disabled",
        );
        let schemas = self.schemas_for(instruction, None)?;
        let v = self.call_json(
            StageTag::Derive,
            &[
                ("instruction", instruction),
                ("device", "any"),
                ("schemas", &schemas),
                ("key", instruction),
            ],
        )?;
        let items = match v {
            Value::Array(items) => items,
            other => vec![other],
        };
        for item in items {
            let out = parse_derive_output(&item).map_err(|e| PipelineError::Malformed {
                stage: StageTag::Derive,
                message: e.to_string(),
            })?;
            let device = out.device().unwrap_or_default().to_string();
            let role = if out.condition.is_some() {
                SubtaskRole::Trigger
            } else {
                SubtaskRole::Action
            };
            let mut s = Subtask::new(out.subtask.clone(), device, Provenance::FreshlyDecomposed).with_role(role);
            s.commands = out.commands;
            s.condition = out.condition;
            self.drafts.push(Draft::fresh(s));
        }
        Ok(())
    }

    /// Drops action subtasks on unavailable or vanished devices and asks for
    /// alternatives on the remaining devices.
    /// With `derive_now`, alternatives are derived immediately; otherwise the
    /// caller's derive loop picks them up.
    fn handle_unavailable(&mut self, instruction: &str, derive_now: bool) -> Result<(), PipelineError> {
        let env = self.env();
        let available = |name: &str| env.iter().any(|d| d.device_name == name && d.available);
        let (blocked, kept): (Vec<Draft>, Vec<Draft>) = std::mem::take(&mut self.drafts)
            .into_iter()
            .partition(|d| d.subtask.role == SubtaskRole::Action && !available(&d.subtask.device_name));
        self.drafts = kept;
        for d in blocked {
            let desc = d.subtask.description.clone();
            let device = d.subtask.device_name.clone();
            self.notice(format!("`{desc}` excluded: device `{device}` is unavailable"));
            let devices = render_devices(
                &env.iter().filter(|d| d.available).cloned().collect::<Vec<_>>(),
                &self.pipeline.corpus,
            );
            let v = self.call_json(
                StageTag::AlternativeSuggest,
                &[
                    ("instruction", instruction),
                    ("device", &device),
                    ("devices", &devices),
                    ("key", &desc),
                ],
            )?;
            let alternatives = suggestion_list(&v, "alternatives");
            if alternatives.is_empty() {
                self.notice(format!("no alternative found for `{desc}`"));
            }
            for (text, dev) in alternatives {
                if !available(&dev) {
                    self.notice(format!(
                        "suggested alternative `{text}` ignored: device `{dev}` is not available"
                    ));
                    continue;
                }
                self.notice(format!("`{text}` on `{dev}` suggested in place of `{desc}`"));
                let mut draft = Draft::fresh(Subtask::new(text, dev, Provenance::AddedByPreference));
                if derive_now {
                    self.materialize(&mut draft)?;
                }
                self.drafts.push(draft);
            }
        }
        Ok(())
    }

    fn compute_targets(&mut self, table: &PreferenceTable, indices: &[usize]) {
        for &i in indices {
            let d = &mut self.drafts[i];
            d.subtask.targets = property_targets(&d.subtask.commands, &self.pipeline.effects, table);
        }
    }

    /// One batched Refine call over `indices`; with `allow_add`, subtasks
    /// the model adds are derived and refined in a follow-up call.
    fn refine(
        &mut self,
        key: &str,
        table: &PreferenceTable,
        indices: &[usize],
        allow_add: bool,
    ) -> Result<(), PipelineError> {
        let subtasks: String = indices
            .iter()
            .map(|&i| {
                let s = &self.drafts[i].subtask;
                let cmds: Vec<Value> = s.commands.iter().map(DeviceCommand::to_wire).collect();
                format!("- {} [{}]: {}\n", s.description, s.device_name, Value::Array(cmds))
            })
            .collect();
        let targets: String = indices
            .iter()
            .map(|&i| {
                let s = &self.drafts[i].subtask;
                format!(
                    "- {}: {}\n",
                    s.description,
                    serde_json::to_string(&s.targets).unwrap_or_default()
                )
            })
            .collect();
        let env: Vec<DeviceDescriptor> = self.env().into_iter().filter(|d| d.available).collect();
        let devices = render_devices(&env, &self.pipeline.corpus);
        let table_json = serde_json::to_string(&table.levels).unwrap_or_default();
        let context = self.proposal.context_keyword.clone();
        let v = self.call_json(
            StageTag::Refine,
            &[
                ("context", &context),
                ("table", &table_json),
                ("subtasks", &subtasks),
                ("targets", &targets),
                ("devices", &devices),
                ("key", key),
            ],
        )?;
        if let Some(values) = v.get("values").and_then(Value::as_object) {
            for &i in indices {
                let desc = self.drafts[i].subtask.description.clone();
                if let Some(slots) = values.get(&desc).and_then(Value::as_object) {
                    fill_slots(&mut self.drafts[i].subtask, slots, ValueSource::Preference);
                }
            }
        }
        if !allow_add {
            return Ok(());
        }
        let existing: BTreeSet<String> = self.drafts.iter().map(|d| d.subtask.description.clone()).collect();
        let mut added = Vec::new();
        for (text, dev) in suggestion_list(&v, "add") {
            if existing.contains(&text) {
                continue;
            }
            if !env.iter().any(|d| d.device_name == dev) {
                self.notice(format!(
                    "preference suggestion `{text}` ignored: device `{dev}` is not available"
                ));
                continue;
            }
            self.notice(format!("`{text}` added to match your preferences"));
            let mut draft = Draft::fresh(Subtask::new(text, dev, Provenance::AddedByPreference));
            self.materialize(&mut draft)?;
            self.drafts.push(draft);
            added.push(self.drafts.len() - 1);
        }
        if added.is_empty() {
            return Ok(());
        }
        self.compute_targets(table, &added);
        let pending: Vec<usize> = added
            .into_iter()
            .filter(|&i| self.drafts[i].subtask.has_placeholders())
            .collect();
        if !pending.is_empty() {
            let key = format!(
                "added: {}",
                pending
                    .iter()
                    .map(|&i| self.drafts[i].subtask.description.as_str())
                    .collect::<Vec<_>>()
                    .join("; ")
            );
            self.refine(&key, table, &pending, false)?;
        }
        Ok(())
    }

    /// Fills leftover placeholders with schema defaults (flagged for review).
    fn fill_defaults(&mut self, indices: &[usize]) -> Result<(), PipelineError> {
        for &i in indices {
            let mut flagged = Vec::new();
            let corpus = Arc::clone(&self.pipeline.corpus);
            let s = &mut self.drafts[i].subtask;
            for ci in 0..s.commands.len() {
                for ai in 0..s.commands[ci].arguments.len() {
                    let ParamValue::Placeholder { slot, .. } = &s.commands[ci].arguments[ai] else {
                        continue;
                    };
                    let slot = slot.clone();
                    let default = argument_spec(&s.commands[ci], ai, &corpus).and_then(|spec| spec.default.clone());
                    let Some(value) = default else {
                        return Err(PipelineError::UnresolvedAfterRefine {
                            subtask: s.description.clone(),
                            slot: slot.name().to_string(),
                        });
                    };
                    flagged.push(format!(
                        "`{}`: [{}] set to schema default {value}",
                        s.description,
                        slot.name()
                    ));
                    s.commands[ci].arguments[ai] = ParamValue::Concrete(value);
                    s.resolutions.retain(|r| !(r.command == ci && r.argument == ai));
                    s.resolutions.push(SlotResolution {
                        command: ci,
                        argument: ai,
                        slot,
                        source: ValueSource::Default,
                    });
                }
            }
            for f in flagged {
                self.notice(f);
            }
        }
        Ok(())
    }

    /// Runs the proposal in a cloned home; on errors asks for revisions up
    /// to `retry_limit` rounds, then escalates with the error log.
    fn self_correct(&mut self, instruction: &str) -> Result<(), PipelineError> {
        let limit = self.pipeline.config.retry_limit;
        let mut rounds = 0;
        loop {
            let (errors, records) = self.trial();
            if errors.is_empty() {
                if rounds == 0 {
                    self.emit(
                        StageTag::SelfCorrect.name(),
                        StageStatus::Skipped,
                        "trial run succeeded",
                    );
                }
                break;
            }
            if rounds == limit {
                self.emit(
                    REVIEW_STAGE,
                    StageStatus::Notice,
                    &format!("{} error(s) remain after {limit} correction round(s)", errors.len()),
                );
                for e in &errors {
                    self.notice(format!(
                        "unresolved after self-correction: subtask {}: {}",
                        e.subtask, e.message
                    ));
                }
                self.proposal.escalation = Some(records);
                break;
            }
            rounds += 1;
            self.revise(instruction, &errors)?;
        }
        self.proposal.correction_rounds_used = rounds;
        Ok(())
    }

    fn trial(&self) -> (Vec<TrialError>, Vec<ExecutionRecord>) {
        let mut home = self.ctx.home.clone();
        let env = home.descriptors();
        let mut errors = Vec::new();
        let mut records = Vec::new();
        for (si, d) in self.drafts.iter().enumerate() {
            let s = &d.subtask;
            match s.role {
                SubtaskRole::Action => {
                    if s.commands.is_empty() {
                        errors.push(TrialError {
                            subtask: si,
                            command: None,
                            message: format!("`{}` has no commands", s.description),
                        });
                    }
                    for (ci, cmd) in s.commands.iter().enumerate() {
                        let rec = home.execute(cmd);
                        if let Some(e) = rec.error() {
                            errors.push(TrialError {
                                subtask: si,
                                command: Some(ci),
                                message: e.to_string(),
                            });
                        }
                        records.push(rec);
                    }
                }
                SubtaskRole::Trigger => match &s.condition {
                    None => errors.push(TrialError {
                        subtask: si,
                        command: None,
                        message: format!("`{}` has no trigger condition", s.description),
                    }),
                    Some(p) => {
                        let v = validate_predicate(p, &env, &self.pipeline.corpus);
                        if !v.is_empty() {
                            errors.push(TrialError {
                                subtask: si,
                                command: None,
                                message: join(&v),
                            });
                        }
                    }
                },
                SubtaskRole::Query => {
                    if let Some(q) = &s.query {
                        let known = self
                            .pipeline
                            .corpus
                            .get(&q.capability_name)
                            .is_some_and(|c| c.attribute(&q.attribute_name).is_some());
                        let result = home.query(&q.device_name, &q.attribute_name);
                        if let Err(e) = result {
                            errors.push(TrialError {
                                subtask: si,
                                command: None,
                                message: e.to_string(),
                            });
                        } else if !known {
                            errors.push(TrialError {
                                subtask: si,
                                command: None,
                                message: format!(
                                    "capability `{}` has no attribute `{}`",
                                    q.capability_name, q.attribute_name
                                ),
                            });
                        }
                    }
                }
            }
        }
        (errors, records)
    }

    fn revise(&mut self, instruction: &str, errors: &[TrialError]) -> Result<(), PipelineError> {
        let proposal: Vec<Value> = self
            .drafts
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let s = &d.subtask;
                json!({
                    "index": i,
                    "subtask": s.description,
                    "commands": s.commands.iter().map(DeviceCommand::to_wire).collect::<Vec<_>>(),
                    "condition": s.condition.as_ref().map(TriggerPredicate::to_wire),
                })
            })
            .collect();
        let error_text: String = errors
            .iter()
            .map(|e| match e.command {
                Some(c) => format!("- subtask {}, command {c}: {}\n", e.subtask, e.message),
                None => format!("- subtask {}: {}\n", e.subtask, e.message),
            })
            .collect();
        let devices: BTreeSet<String> = errors
            .iter()
            .filter_map(|e| self.drafts.get(e.subtask))
            .map(|d| d.subtask.device_name.clone())
            .collect();
        let env = self.env();
        let schemas: String = env
            .iter()
            .filter(|d| devices.contains(&d.device_name))
            .flat_map(|d| d.capabilities.iter())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter_map(|c| self.pipeline.corpus.get(c))
            .map(|s| serde_json::to_string(s).unwrap_or_default() + "\n")
            .collect();
        let proposal_text = Value::Array(proposal).to_string();
        let v = self.call_json(
            StageTag::SelfCorrect,
            &[
                ("proposal", &proposal_text),
                ("errors", &error_text),
                ("schemas", &schemas),
                ("instruction", instruction),
            ],
        )?;
        let revisions = v
            .get("revisions")
            .and_then(Value::as_array)
            .cloned()
            .unwrap_or_default();
        for r in revisions {
            let Some(si) = r.get("subtask").and_then(Value::as_u64).map(|i| i as usize) else {
                continue;
            };
            if si >= self.drafts.len() {
                self.emit(
                    StageTag::SelfCorrect.name(),
                    StageStatus::Notice,
                    &format!("revision for unknown subtask {si} ignored"),
                );
                continue;
            }
            if let Some(cond) = r.get("condition") {
                match TriggerPredicate::from_wire(cond) {
                    Ok(p) => self.drafts[si].subtask.condition = Some(p),
                    Err(e) => self.emit(StageTag::SelfCorrect.name(), StageStatus::Notice, &e.to_string()),
                }
                continue;
            }
            let (Some(ci), Some(rep)) = (
                r.get("command").and_then(Value::as_u64).map(|i| i as usize),
                r.get("replacement"),
            ) else {
                continue;
            };
            let s = &mut self.drafts[si].subtask;
            if ci > s.commands.len() {
                continue;
            }
            match DeviceCommand::from_wire(rep) {
                Ok(new) => {
                    if ci == s.commands.len() {
                        s.commands.push(new);
                        continue;
                    }
                    let old = std::mem::replace(&mut s.commands[ci], new);
                    let new = &s.commands[ci];
                    if old.capability_name != new.capability_name || old.command_name != new.command_name {
                        s.resolutions.retain(|r| r.command != ci);
                    } else {
                        for res in s.resolutions.iter_mut().filter(|r| r.command == ci) {
                            if old.arguments.get(res.argument) != new.arguments.get(res.argument) {
                                res.source = ValueSource::SelfCorrection;
                            }
                        }
                        s.resolutions
                            .retain(|r| new.arguments.get(r.argument).is_some_and(|a| !a.is_placeholder()));
                    }
                }
                Err(e) => self.emit(StageTag::SelfCorrect.name(), StageStatus::Notice, &e.to_string()),
            }
        }
        Ok(())
    }
}

/// Writes model-supplied slot values into placeholders, checking kind only.
fn fill_slots(subtask: &mut Subtask, values: &serde_json::Map<String, Value>, source: ValueSource) {
    for (ci, cmd) in subtask.commands.iter_mut().enumerate() {
        for (ai, arg) in cmd.arguments.iter_mut().enumerate() {
            let ParamValue::Placeholder { kind, slot } = arg else {
                continue;
            };
            let Some(raw) = values.get(slot.name()) else { continue };
            let Some(value) = Scalar::coerce(raw, *kind) else {
                continue;
            };
            let slot = slot.clone();
            *arg = ParamValue::Concrete(value);
            subtask.resolutions.push(SlotResolution {
                command: ci,
                argument: ai,
                slot,
                source,
            });
        }
    }
}

/// `[{"subtask": .., "device": ..}]` under `field`, skipping bad entries.
fn suggestion_list(v: &Value, field: &str) -> Vec<(String, String)> {
    v.get(field)
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(|i| {
                    let s = i.get("subtask")?.as_str()?.trim();
                    let d = i.get("device")?.as_str()?.trim();
                    (!s.is_empty() && !d.is_empty()).then(|| (s.to_string(), d.to_string()))
                })
                .collect()
        })
        .unwrap_or_default()
}

/// Device list for prompts: name, room, availability and capabilities
/// with their attributes.
pub fn render_devices(env: &[DeviceDescriptor], corpus: &SchemaCorpus) -> String {
    env.iter()
        .map(|d| {
            let caps: Vec<String> = d
                .capabilities
                .iter()
                .map(|c| {
                    let attrs: Vec<&str> = corpus
                        .get(c)
                        .map(|s| s.attributes.iter().map(|a| a.name.as_str()).collect())
                        .unwrap_or_default();
                    if attrs.is_empty() {
                        c.clone()
                    } else {
                        format!("{c}({})", attrs.join(", "))
                    }
                })
                .collect();
            let status = if d.available { "" } else { " [unavailable]" };
            format!("- {} ({}){status}: {}\n", d.device_name, d.room, caps.join(", "))
        })
        .collect()
}

/// First JSON value in a model response, tolerating code fences and prose.
pub fn extract_json(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        if v.is_object() || v.is_array() {
            return Some(v);
        }
    }
    let start = trimmed.find(['{', '['])?;
    let mut stream = serde_json::Deserializer::from_str(&trimmed[start..]).into_iter::<Value>();
    stream.next()?.ok()
}

fn truncate(s: &str, n: usize) -> String {
    if s.chars().count() <= n {
        s.to_string()
    } else {
        s.chars().take(n).collect::<String>() + "…"
    }
}

/// Group subtasks of a proposal by the stage that produced them.
pub fn provenance_counts(p: &TaskProposal) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in &p.subtasks {
        *out.entry(format!("{:?}", s.provenance)).or_insert(0) += 1;
    }
    out
}
