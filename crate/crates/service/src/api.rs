//! HTTP+JSON API over one home, one task memory and one preference store.
//!
//! Pipeline runs execute on blocking threads against snapshots of the
//! shared state; approval, memory commits and home mutations are serialized
//! through the `world` lock.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use homeagent_core::agent::Assets;
use homeagent_core::capability::SchemaCorpus;
use homeagent_core::domain::{ProposalStatus, Scalar, TaskProposal};
use homeagent_core::home::{HomeError, HomeState};
use homeagent_core::memory::TaskMemory;
use homeagent_core::pipeline::{
    ApprovalOutcome, Feedback, Pipeline, PipelineError, ProgressEvent, RunContext, StageStatus, REVIEW_STAGE,
};
use homeagent_core::preference::{BinConfig, EffectMap, PreferenceStore, PreferenceTables};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;
use tokio_stream::wrappers::BroadcastStream;

/// Mutable single-tenant state.
pub struct World {
    pub home: HomeState,
    pub memory: TaskMemory,
    pub prefs: PreferenceStore,
}

pub struct AppState {
    /// `None` when no provider is configured: reads work, runs are refused.
    pipeline: Option<Arc<Pipeline>>,
    corpus: Arc<SchemaCorpus>,
    effects: Arc<EffectMap>,
    bins: BinConfig,
    world: Mutex<World>,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    /// Where memory is persisted after each approval.
    memory_path: Option<PathBuf>,
}

impl AppState {
    /// State seeded from `assets`, with the given memory.
    pub fn new(pipeline: Option<Pipeline>, assets: &Assets, memory: TaskMemory, memory_path: Option<PathBuf>) -> Self {
        AppState {
            pipeline: pipeline.map(Arc::new),
            corpus: Arc::clone(&assets.corpus),
            effects: Arc::clone(&assets.effects),
            bins: assets.bins.clone(),
            world: Mutex::new(World {
                home: assets.home.clone(),
                memory,
                prefs: assets.prefs.clone(),
            }),
            sessions: RwLock::new(BTreeMap::new()),
            memory_path,
        }
    }

    fn tables(&self, world: &mut World) -> PreferenceTables {
        world.prefs.tables(&self.effects, &self.bins, &self.corpus).clone()
    }

    fn world(&self) -> std::sync::MutexGuard<'_, World> {
        self.world.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session `{id}`")))
    }
}

pub struct Session {
    id: String,
    instruction: String,
    inner: Mutex<SessionData>,
    events: broadcast::Sender<ProgressEvent>,
}

#[derive(Default)]
struct SessionData {
    proposal: Option<TaskProposal>,
    events: Vec<ProgressEvent>,
    outcome: Option<ApprovalOutcome>,
}

impl Session {
    fn data(&self) -> std::sync::MutexGuard<'_, SessionData> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn push(&self, data: &mut SessionData, event: ProgressEvent) {
        data.events.push(event.clone());
        // Nobody listening is fine.
        let _ = self.events.send(event);
    }

    fn view(&self) -> SessionView {
        let data = self.data();
        let status = data
            .proposal
            .as_ref()
            .map_or(ProposalStatus::Drafting, TaskProposal::status);
        SessionView {
            session_id: self.id.clone(),
            instruction: self.instruction.clone(),
            status,
            proposal: data.proposal.clone(),
            events: data.events.clone(),
            outcome: data.outcome.clone(),
        }
    }
}

/// Whether no further events follow this one.
fn is_terminal(e: &ProgressEvent) -> bool {
    matches!(
        (e.stage.as_str(), e.status),
        (REVIEW_STAGE, StageStatus::Completed) | ("Pipeline", StageStatus::Failed) | ("Approved" | "Rejected", _)
    )
}

#[derive(Debug, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub instruction: String,
    pub status: ProposalStatus,
    pub proposal: Option<TaskProposal>,
    pub events: Vec<ProgressEvent>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ApprovalOutcome>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": message.into() }),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::WrongStatus(_) => StatusCode::CONFLICT,
            PipelineError::SchemaViolation(_)
            | PipelineError::UnknownSlot { .. }
            | PipelineError::InvalidIndex(_)
            | PipelineError::Unresolved(_)
            | PipelineError::Home(_) => StatusCode::UNPROCESSABLE_ENTITY,
            PipelineError::Provider { .. } => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": e.to_string() });
        if let PipelineError::SchemaViolation(v) = &e {
            body["violations"] = serde_json::to_value(v).unwrap_or(Value::Null);
        }
        ApiError { status, body }
    }
}

impl From<HomeError> for ApiError {
    fn from(e: HomeError) -> Self {
        let status = match e {
            HomeError::UnknownDevice(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/instructions", post(post_instruction))
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/feedback", post(post_feedback))
        .route("/memory", get(get_memory))
        .route("/preferences", get(get_preferences))
        .route("/home", get(get_home))
        .route("/home/log", get(get_home_log))
        .route("/home/rules", get(get_rules))
        .route("/home/events", post(post_home_event))
        .route("/home/devices/{name}/availability", post(post_availability))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
struct InstructionBody {
    text: String,
}

async fn post_instruction(
    State(state): State<Arc<AppState>>,
    Json(body): Json<InstructionBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let text = body.text.trim().to_string();
    if text.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "instruction text is empty"));
    }
    let Some(pipeline) = state.pipeline.clone() else {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "no model provider is configured",
        ));
    };
    let id = uuid::Uuid::new_v4().to_string();
    let (tx, _) = broadcast::channel(256);
    let session = Arc::new(Session {
        id: id.clone(),
        instruction: text.clone(),
        inner: Mutex::new(SessionData::default()),
        events: tx,
    });
    state
        .sessions
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .insert(id.clone(), Arc::clone(&session));

    let worker = Arc::clone(&state);
    tokio::task::spawn_blocking(move || {
        let (home, memory, tables) = {
            let mut world = worker.world();
            let tables = worker.tables(&mut world);
            (world.home.clone(), world.memory.clone(), tables)
        };
        let ctx = RunContext {
            home: &home,
            memory: &memory,
            tables: &tables,
        };
        let proposal = pipeline.run(&session.id, &text, ctx, &mut |e| {
            let mut data = session.data();
            session.push(&mut data, e);
        });
        tracing::info!(session = %session.id, status = ?proposal.status(), "proposal ready");
        session.data().proposal = Some(proposal);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "session_id": id }))))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<Value>> {
    let sessions: Vec<Arc<Session>> = state
        .sessions
        .read()
        .unwrap_or_else(|e| e.into_inner())
        .values()
        .cloned()
        .collect();
    Json(
        sessions
            .iter()
            .map(|s| {
                let v = s.view();
                json!({ "session_id": v.session_id, "instruction": v.instruction, "status": v.status })
            })
            .collect(),
    )
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    Ok(Json(state.session(&id)?.view()))
}

/// Replays the events so far, then streams new ones until a terminal event.
async fn session_events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let session = state.session(&id)?;
    // Subscribe while holding the lock so nothing falls between replay and live.
    let (past, live) = {
        let data = session.data();
        (data.events.clone(), session.events.subscribe())
    };
    let done = past.iter().any(is_terminal);
    let live = BroadcastStream::new(live).filter_map(|r| async move { r.ok() });
    let live: futures::stream::BoxStream<'static, ProgressEvent> =
        if done { stream::empty().boxed() } else { live.boxed() };
    let events = stream::iter(past).chain(live);
    let stream = stream::unfold((events, false), |(mut events, finished)| async move {
        if finished {
            return None;
        }
        let e = events.next().await?;
        let last = is_terminal(&e);
        Some((e, (events, last)))
    })
    .map(|e| Ok(Event::default().event("progress").json_data(&e).unwrap_or_default()));
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn post_feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(feedback): Json<Feedback>,
) -> ApiResult<Json<SessionView>> {
    let session = state.session(&id)?;
    let Some(pipeline) = state.pipeline.clone() else {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "no model provider is configured",
        ));
    };
    let worker = Arc::clone(&state);
    let s = Arc::clone(&session);
    tokio::task::spawn_blocking(move || apply_feedback(&worker, &pipeline, &s, &feedback))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(session.view()))
}

fn apply_feedback(state: &AppState, pipeline: &Pipeline, session: &Session, feedback: &Feedback) -> ApiResult<()> {
    // The session lock is held for the whole edit so feedback on one
    // session is applied in order; the world lock is always taken second.
    let mut data = session.data();
    let Some(proposal) = data.proposal.as_mut() else {
        return Err(ApiError::from(PipelineError::WrongStatus(ProposalStatus::Drafting)));
    };
    let mut events = Vec::new();
    match feedback {
        Feedback::Approve => {
            let mut world = state.world();
            let World { home, memory, prefs } = &mut *world;
            let outcome = pipeline.approve(proposal, memory, prefs, home)?;
            if let Some(path) = &state.memory_path {
                if let Err(e) = memory.persist(path) {
                    tracing::error!(error = %e, "memory snapshot not written");
                }
            }
            events.push(ProgressEvent {
                stage: "Approved".into(),
                status: StageStatus::Completed,
                detail: format!("{} command(s) executed", outcome.executions.len()),
            });
            data.outcome = Some(outcome);
        }
        other => {
            let (home, memory, tables) = {
                let mut world = state.world();
                let tables = state.tables(&mut world);
                (world.home.clone(), world.memory.clone(), tables)
            };
            let ctx = RunContext {
                home: &home,
                memory: &memory,
                tables: &tables,
            };
            pipeline.apply_feedback(proposal, other, ctx, &mut |e| events.push(e))?;
            if *other == Feedback::Reject {
                events.push(ProgressEvent {
                    stage: "Rejected".into(),
                    status: StageStatus::Completed,
                    detail: String::new(),
                });
            }
        }
    }
    for e in events {
        session.push(&mut data, e);
    }
    Ok(())
}

async fn get_memory(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(state.world().memory.export_graph())
}

async fn get_preferences(State(state): State<Arc<AppState>>) -> Json<Value> {
    let mut world = state.world();
    let tables = state.tables(&mut world);
    Json(json!({ "tables": tables, "log_entries": world.prefs.logs().len() }))
}

async fn get_home(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(state.world().home.snapshot())
}

#[derive(Debug, Deserialize)]
struct LogQuery {
    #[serde(default = "default_tail")]
    limit: usize,
}

fn default_tail() -> usize {
    200
}

async fn get_home_log(State(state): State<Arc<AppState>>, Query(q): Query<LogQuery>) -> Json<Value> {
    let world = state.world();
    let log = world.home.log();
    let tail = &log[log.len().saturating_sub(q.limit)..];
    Json(json!({ "total": log.len(), "records": tail }))
}

async fn get_rules(State(state): State<Arc<AppState>>) -> Json<Value> {
    let world = state.world();
    Json(serde_json::to_value(world.home.rules().collect::<Vec<_>>()).unwrap_or(Value::Null))
}

#[derive(Debug, Deserialize)]
struct EventBody {
    device: String,
    attribute: String,
    value: Value,
}

async fn post_home_event(State(state): State<Arc<AppState>>, Json(body): Json<EventBody>) -> ApiResult<Json<Value>> {
    let mut world = state.world();
    let device = world
        .home
        .device(&body.device)
        .ok_or_else(|| ApiError::from(HomeError::UnknownDevice(body.device.clone())))?;
    let kind = device
        .attributes
        .get(&body.attribute)
        .map(|a| a.value.kind())
        .ok_or_else(|| {
            ApiError::from(HomeError::UnknownAttribute {
                device: body.device.clone(),
                attribute: body.attribute.clone(),
            })
        })?;
    let value: Scalar = Scalar::coerce(&body.value, kind).ok_or_else(|| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("`{}` is not a {kind} value", body.value),
        )
    })?;
    let records = world.home.emit_event(&body.device, &body.attribute, value)?;
    Ok(Json(json!({ "fired": records })))
}

#[derive(Debug, Deserialize)]
struct AvailabilityBody {
    available: bool,
}

async fn post_availability(
    State(state): State<Arc<AppState>>,
    Path(name): Path<String>,
    Json(body): Json<AvailabilityBody>,
) -> ApiResult<Json<Value>> {
    let mut world = state.world();
    world.home.set_availability(&name, body.available)?;
    Ok(Json(json!({ "device": name, "available": body.available })))
}
