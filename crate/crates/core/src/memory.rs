//! Three-level task memory: task → subtask → context.
//!
//! Task and subtask nodes carry unit-norm embeddings and are recalled by
//! exact linear-scan cosine similarity (ties go to the oldest node). Subtask
//! nodes are shared between tasks and store abstracted command templates;
//! context nodes hold the per-context values for the template's slots.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capability::{argument_names, argument_spec, SchemaCorpus};
use crate::domain::{
    AttributeRef, Bindings, DeviceCommand, InstructionType, ParamValue, Scalar, Slot, SlotResolution, Subtask,
    SubtaskRole, TaskProposal, TriggerPredicate, ValueSource,
};
use crate::llm::{cosine, Embedder, LlmError};
use crate::preference::normalize_keyword;

pub type NodeId = u64;

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("cannot restore memory snapshot: {0}")]
    Restore(String),
    #[error("cannot write memory snapshot: {0}")]
    Persist(String),
    #[error("only approved proposals can be committed")]
    NotApproved,
    #[error(transparent)]
    Embedding(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskNode {
    pub node_id: NodeId,
    pub instruction_text: String,
    pub instruction_type: InstructionType,
    pub embedding: Vec<f64>,
    /// Ordered, duplicate-free subtask edges.
    pub edges_to: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskNode {
    pub node_id: NodeId,
    pub description_text: String,
    pub embedding: Vec<f64>,
    pub device_name: String,
    pub role: SubtaskRole,
    pub command_template: Vec<DeviceCommand>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<TriggerPredicate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<AttributeRef>,
    pub edges_to: BTreeSet<NodeId>,
    pub in_edges: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextNode {
    pub node_id: NodeId,
    pub context_keyword: String,
    pub bindings: Bindings,
}

/// How much of the memory the pipeline may read and write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryScope {
    #[default]
    Full,
    /// Recall only at the task level; subtasks are never shared across tasks.
    TaskOnly,
    Off,
}

/// Counts of what a commit changed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CommitDelta {
    pub task_id: NodeId,
    pub task_created: bool,
    pub subtasks_created: usize,
    pub subtasks_linked: usize,
    pub contexts_created: usize,
    pub contexts_updated: usize,
    pub subtasks_pruned: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryCounts {
    pub tasks: usize,
    pub subtasks: usize,
    pub contexts: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMemory {
    next_id: NodeId,
    tasks: BTreeMap<NodeId, TaskNode>,
    subtasks: BTreeMap<NodeId, SubtaskNode>,
    contexts: BTreeMap<NodeId, ContextNode>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    memory: TaskMemory,
}

/// Replaces every concrete argument with a named slot and returns the
/// extracted values. Slot names come from earlier placeholder resolutions
/// when known (so `[temperature_value]` survives), else `<argument>_value`.
/// A name already bound to a different value gets a `_2`, `_3`, … suffix.
pub fn abstract_template(
    commands: &[DeviceCommand],
    resolutions: &[SlotResolution],
    corpus: &SchemaCorpus,
) -> (Vec<DeviceCommand>, Bindings) {
    let mut bindings = Bindings::new();
    let mut template = Vec::with_capacity(commands.len());
    for (ci, cmd) in commands.iter().enumerate() {
        let names = argument_names(cmd, corpus);
        let mut out = cmd.clone();
        for (ai, arg) in cmd.arguments.iter().enumerate() {
            let ParamValue::Concrete(value) = arg else { continue };
            let base = resolutions
                .iter()
                .find(|r| r.command == ci && r.argument == ai)
                .map(|r| r.slot.name().to_string())
                .unwrap_or_else(|| format!("{}_value", names[ai]));
            let kind = argument_spec(cmd, ai, corpus).map_or(value.kind(), |s| s.kind);
            let mut n = 1;
            let slot = loop {
                let candidate = if n == 1 { base.clone() } else { format!("{base}_{n}") };
                let slot = Slot::new(candidate).expect("built from identifier parts");
                match bindings.get(&slot) {
                    Some(existing) if existing != value => n += 1,
                    _ => break slot,
                }
            };
            bindings.insert(slot.clone(), value.clone());
            out.arguments[ai] = ParamValue::Placeholder { kind, slot };
        }
        template.push(out);
    }
    (template, bindings)
}

/// Fills template slots from bindings. Returns the commands plus a
/// resolution record per filled slot; unbound slots stay placeholders.
pub fn instantiate(
    template: &[DeviceCommand],
    bindings: &Bindings,
    source: ValueSource,
) -> (Vec<DeviceCommand>, Vec<SlotResolution>) {
    let mut resolutions = Vec::new();
    let commands = template
        .iter()
        .enumerate()
        .map(|(ci, cmd)| {
            let mut out = cmd.clone();
            for (ai, arg) in out.arguments.iter_mut().enumerate() {
                if let ParamValue::Placeholder { slot, .. } = arg {
                    if let Some(v) = bindings.get(slot) {
                        resolutions.push(SlotResolution {
                            command: ci,
                            argument: ai,
                            slot: slot.clone(),
                            source,
                        });
                        *arg = ParamValue::Concrete(v.clone());
                    }
                }
            }
            out
        })
        .collect();
    (commands, resolutions)
}

fn best_match<'a, T>(
    items: impl Iterator<Item = (&'a NodeId, &'a T)>,
    query: &[f64],
    tau: f64,
    emb: impl Fn(&T) -> &[f64],
) -> Option<(NodeId, f64)>
where
    T: 'a,
{
    let mut best: Option<(NodeId, f64)> = None;
    for (id, node) in items {
        let s = cosine(query, emb(node));
        if s >= tau && best.is_none_or(|(_, b)| s > b) {
            best = Some((*id, s));
        }
    }
    best
}

impl TaskMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> MemoryCounts {
        MemoryCounts {
            tasks: self.tasks.len(),
            subtasks: self.subtasks.len(),
            contexts: self.contexts.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty() && self.subtasks.is_empty() && self.contexts.is_empty()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskNode> {
        self.tasks.values()
    }

    pub fn subtasks(&self) -> impl Iterator<Item = &SubtaskNode> {
        self.subtasks.values()
    }

    pub fn contexts(&self) -> impl Iterator<Item = &ContextNode> {
        self.contexts.values()
    }

    pub fn task(&self, id: NodeId) -> Option<&TaskNode> {
        self.tasks.get(&id)
    }

    pub fn subtask(&self, id: NodeId) -> Option<&SubtaskNode> {
        self.subtasks.get(&id)
    }

    pub fn context(&self, id: NodeId) -> Option<&ContextNode> {
        self.contexts.get(&id)
    }

    fn alloc(&mut self) -> NodeId {
        self.next_id += 1;
        self.next_id
    }

    /// Most similar task with similarity ≥ tau; node ids grow with age, and
    /// a strictly-greater test keeps the oldest on ties.
    pub fn match_task(&self, embedding: &[f64], tau: f64) -> Option<(&TaskNode, f64)> {
        best_match(self.tasks.iter(), embedding, tau, |t| &t.embedding).map(|(id, s)| (&self.tasks[&id], s))
    }

    /// Most similar subtask on the same device and role with similarity ≥ tau.
    pub fn match_subtask(
        &self,
        embedding: &[f64],
        device: &str,
        role: SubtaskRole,
        tau: f64,
    ) -> Option<(&SubtaskNode, f64)> {
        best_match(
            self.subtasks
                .iter()
                .filter(|(_, s)| s.device_name == device && s.role == role),
            embedding,
            tau,
            |s| &s.embedding,
        )
        .map(|(id, s)| (&self.subtasks[&id], s))
    }

    pub fn match_context(&self, subtask: &SubtaskNode, keyword: &str) -> Option<&ContextNode> {
        let key = normalize_keyword(keyword);
        subtask
            .edges_to
            .iter()
            .filter_map(|id| self.contexts.get(id))
            .find(|c| c.context_keyword == key)
    }

    /// Ordered subtask nodes of a task.
    pub fn subtasks_of(&self, task: &TaskNode) -> Vec<&SubtaskNode> {
        task.edges_to.iter().filter_map(|id| self.subtasks.get(id)).collect()
    }

    /// Links a subtask under `task_id`, reusing a matching node (same device
    /// and role, similarity ≥ tau) or creating one; with `candidates` set,
    /// matches are restricted to those nodes. Updates the stored template and
    /// the context node for `keyword`.
    #[allow(clippy::too_many_arguments)]
    fn upsert_subtask(
        &mut self,
        task_id: NodeId,
        subtask: &Subtask,
        embedding: Vec<f64>,
        keyword: &str,
        tau: f64,
        candidates: Option<&BTreeSet<NodeId>>,
        corpus: &SchemaCorpus,
        delta: &mut CommitDelta,
    ) -> NodeId {
        let matched = best_match(
            self.subtasks.iter().filter(|(id, s)| {
                s.device_name == subtask.device_name
                    && s.role == subtask.role
                    && candidates.is_none_or(|c| c.contains(id))
            }),
            &embedding,
            tau,
            |s| &s.embedding,
        )
        .map(|(id, _)| id);
        let (template, bindings) = abstract_template(&subtask.commands, &subtask.resolutions, corpus);
        let id = match matched {
            Some(id) => {
                delta.subtasks_linked += 1;
                let node = self.subtasks.get_mut(&id).expect("matched id exists");
                node.command_template = template;
                node.condition = subtask.condition.clone();
                node.query = subtask.query.clone();
                id
            }
            None => {
                delta.subtasks_created += 1;
                let id = self.alloc();
                self.subtasks.insert(
                    id,
                    SubtaskNode {
                        node_id: id,
                        description_text: subtask.description.clone(),
                        embedding,
                        device_name: subtask.device_name.clone(),
                        role: subtask.role,
                        command_template: template,
                        condition: subtask.condition.clone(),
                        query: subtask.query.clone(),
                        edges_to: BTreeSet::new(),
                        in_edges: BTreeSet::new(),
                    },
                );
                id
            }
        };
        self.subtasks.get_mut(&id).expect("present").in_edges.insert(task_id);
        if subtask.role != SubtaskRole::Query {
            let key = normalize_keyword(keyword);
            let existing = self.subtasks[&id]
                .edges_to
                .iter()
                .copied()
                .find(|cid| self.contexts[cid].context_keyword == key);
            match existing {
                Some(cid) => {
                    delta.contexts_updated += 1;
                    self.contexts.get_mut(&cid).expect("present").bindings = bindings;
                }
                None => {
                    delta.contexts_created += 1;
                    let cid = self.alloc();
                    self.contexts.insert(
                        cid,
                        ContextNode {
                            node_id: cid,
                            context_keyword: key,
                            bindings,
                        },
                    );
                    self.subtasks.get_mut(&id).expect("present").edges_to.insert(cid);
                }
            }
        }
        id
    }

    /// Stores an approved proposal: the task node is matched (≥ tau_task) or
    /// created, its edges become exactly the proposal's subtasks, and each
    /// subtask's context node for the proposal keyword is written.
    pub fn commit_proposal(
        &mut self,
        proposal: &TaskProposal,
        embedder: &dyn Embedder,
        tau_task: f64,
        tau_subtask: f64,
        scope: MemoryScope,
        corpus: &SchemaCorpus,
    ) -> Result<CommitDelta, MemoryError> {
        if proposal.status() != crate::domain::ProposalStatus::Approved {
            return Err(MemoryError::NotApproved);
        }
        let mut delta = CommitDelta::default();
        if scope == MemoryScope::Off {
            return Ok(delta);
        }
        // Embed everything first so a provider failure leaves memory untouched.
        let task_emb = embedder.embed(&proposal.instruction_text)?;
        let sub_embs = proposal
            .subtasks
            .iter()
            .map(|s| embedder.embed(&s.description))
            .collect::<Result<Vec<_>, _>>()?;

        let task_id = match self.match_task(&task_emb, tau_task).map(|(t, _)| t.node_id) {
            Some(id) => id,
            None => {
                delta.task_created = true;
                let id = self.alloc();
                self.tasks.insert(
                    id,
                    TaskNode {
                        node_id: id,
                        instruction_text: proposal.instruction_text.clone(),
                        instruction_type: proposal.instruction_type,
                        embedding: task_emb,
                        edges_to: Vec::new(),
                    },
                );
                id
            }
        };
        delta.task_id = task_id;
        let previous: Vec<NodeId> = std::mem::take(&mut self.tasks.get_mut(&task_id).expect("present").edges_to);
        let own: BTreeSet<NodeId> = previous.iter().copied().collect();
        for id in &previous {
            if let Some(s) = self.subtasks.get_mut(id) {
                s.in_edges.remove(&task_id);
            }
        }
        // In task-only scope a subtask can only merge with the task's own
        // previous subtasks, so nothing is shared across tasks.
        let cands = (scope == MemoryScope::TaskOnly).then_some(&own);
        let mut edges = Vec::new();
        for (subtask, emb) in proposal.subtasks.iter().zip(sub_embs) {
            let id = self.upsert_subtask(
                task_id,
                subtask,
                emb,
                &proposal.context_keyword,
                tau_subtask,
                cands,
                corpus,
                &mut delta,
            );
            if !edges.contains(&id) {
                edges.push(id);
            }
        }
        let node = self.tasks.get_mut(&task_id).expect("present");
        node.edges_to = edges;
        node.instruction_type = proposal.instruction_type;
        delta.subtasks_pruned = self.prune_orphans();
        Ok(delta)
    }

    /// Drops subtask nodes no task points at, with their contexts.
    fn prune_orphans(&mut self) -> usize {
        let orphans: Vec<NodeId> = self
            .subtasks
            .iter()
            .filter(|(_, s)| s.in_edges.is_empty())
            .map(|(id, _)| *id)
            .collect();
        for id in &orphans {
            if let Some(node) = self.subtasks.remove(id) {
                for cid in node.edges_to {
                    self.contexts.remove(&cid);
                }
            }
        }
        orphans.len()
    }

    /// Checks layering, edge symmetry and embedding norms.
    pub fn check_integrity(&self) -> Result<(), String> {
        for t in self.tasks.values() {
            check_norm(&t.embedding).map_err(|e| format!("task {}: {e}", t.node_id))?;
            for s in &t.edges_to {
                let node = self
                    .subtasks
                    .get(s)
                    .ok_or(format!("task {} points at missing subtask {s}", t.node_id))?;
                if !node.in_edges.contains(&t.node_id) {
                    return Err(format!("subtask {s} lacks in-edge from task {}", t.node_id));
                }
            }
        }
        for s in self.subtasks.values() {
            check_norm(&s.embedding).map_err(|e| format!("subtask {}: {e}", s.node_id))?;
            if s.in_edges.is_empty() {
                return Err(format!("subtask {} has no in-edges", s.node_id));
            }
            for t in &s.in_edges {
                let task = self
                    .tasks
                    .get(t)
                    .ok_or(format!("subtask {} in-edge from missing task {t}", s.node_id))?;
                if !task.edges_to.contains(&s.node_id) {
                    return Err(format!("task {t} lacks edge to subtask {}", s.node_id));
                }
            }
            let mut keys = BTreeSet::new();
            for c in &s.edges_to {
                let ctx = self
                    .contexts
                    .get(c)
                    .ok_or(format!("subtask {} points at missing context {c}", s.node_id))?;
                if !keys.insert(ctx.context_keyword.clone()) {
                    return Err(format!(
                        "subtask {} has duplicate context `{}`",
                        s.node_id, ctx.context_keyword
                    ));
                }
            }
        }
        let owned: usize = self.subtasks.values().map(|s| s.edges_to.len()).sum();
        if owned != self.contexts.len() {
            return Err("context nodes must belong to exactly one subtask".into());
        }
        let ids: Vec<NodeId> = self
            .tasks
            .keys()
            .chain(self.subtasks.keys())
            .chain(self.contexts.keys())
            .copied()
            .collect();
        let unique: BTreeSet<NodeId> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err("node ids are not unique across levels".into());
        }
        if ids.iter().any(|id| *id > self.next_id) {
            return Err("node id beyond allocator".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Snapshot {
            version: SNAPSHOT_VERSION,
            memory: self.clone(),
        })
        .expect("memory serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MemoryError> {
        let snap: Snapshot = serde_json::from_str(text).map_err(|e| MemoryError::Restore(e.to_string()))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(MemoryError::Restore(format!(
                "unsupported snapshot version {}",
                snap.version
            )));
        }
        snap.memory.check_integrity().map_err(MemoryError::Restore)?;
        Ok(snap.memory)
    }

    /// Writes the snapshot atomically: temp file in the same directory, then rename.
    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), MemoryError> {
        let path = path.as_ref();
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let file_name = path
            .file_name()
            .ok_or_else(|| MemoryError::Persist("path has no file name".into()))?;
        let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
        std::fs::write(&tmp, self.to_json()).map_err(|e| MemoryError::Persist(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| MemoryError::Persist(e.to_string()))
    }

    pub fn restore(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| MemoryError::Restore(e.to_string()))?;
        Self::from_json(&text)
    }

    /// Nodes and edges for graph views.
    pub fn export_graph(&self) -> serde_json::Value {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for t in self.tasks.values() {
            nodes.push(serde_json::json!({"id": t.node_id, "level": "task", "label": t.instruction_text, "instruction_type": t.instruction_type}));
            for s in &t.edges_to {
                let sim = cosine(&t.embedding, &self.subtasks[s].embedding);
                edges.push(serde_json::json!({"from": t.node_id, "to": s, "similarity": sim}));
            }
        }
        for s in self.subtasks.values() {
            nodes.push(serde_json::json!({
                "id": s.node_id, "level": "subtask", "label": s.description_text,
                "device": s.device_name, "role": s.role, "template": s.command_template,
                "condition": s.condition, "query": s.query,
            }));
            for c in &s.edges_to {
                edges.push(serde_json::json!({"from": s.node_id, "to": c}));
            }
        }
        for c in self.contexts.values() {
            let bindings: serde_json::Map<String, serde_json::Value> = c
                .bindings
                .iter()
                .map(|(k, v)| (k.name().to_string(), v.to_json()))
                .collect();
            nodes.push(serde_json::json!({"id": c.node_id, "level": "context", "label": c.context_keyword, "bindings": bindings}));
        }
        let counts = self.counts();
        serde_json::json!({
            "counts": {"tasks": counts.tasks, "subtasks": counts.subtasks, "contexts": counts.contexts},
            "nodes": nodes,
            "edges": edges,
        })
    }
}

fn check_norm(v: &[f64]) -> Result<(), String> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-9 {
        Err(format!("embedding norm {n} is not 1"))
    } else {
        Ok(())
    }
}

/// Binding value of a slot in a context, for read-back.
pub fn binding<'a>(ctx: &'a ContextNode, slot: &str) -> Option<&'a Scalar> {
    ctx.bindings.get(&Slot::new(slot).ok()?)
}
