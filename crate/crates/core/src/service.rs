//! HTTP/JSON service: corpus browsing and live interview sessions.
//!
//! Routes:
//!
//! - `GET  /v1/stories`
//! - `GET  /v1/stories/{id}/characters`
//! - `GET  /v1/stories/{id}/timeline`
//! - `POST /v1/sessions` `{story_id, character, cutoff?, method, overrides?}`
//! - `GET  /v1/sessions/{id}`
//! - `PATCH /v1/sessions/{id}` `{method?, overrides?}`
//! - `POST /v1/sessions/{id}/message` `{text, method?, overrides?}` -> `{response, trace}`
//!
//! Messages within a session are handled one at a time; sessions run
//! concurrently. With a session log configured, every session change is
//! appended as a full snapshot and the log is replayed on startup.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;
use tracing::{info, warn};

use crate::baselines::respond;
use crate::knowledge_base::{KnowledgeBase, StoryTime};
use crate::llm::LlmClient;
use crate::pipeline::prompts::render_dialogue;
use crate::pipeline::{Method, PipelineConfig, PipelineError, ResponseTrace, Threshold};
use crate::retrieval::Bm25Index;
use crate::task::{InterviewTask, TaskType};

pub const USER_SPEAKER: &str = "USER";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<Threshold>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anonymize: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_retrieval: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_profile: Option<bool>,
}

impl Overrides {
    pub fn validate(&self) -> Result<(), String> {
        if self.n == Some(0) {
            return Err("n must be at least 1".into());
        }
        Ok(())
    }

    /// Later values win field by field.
    pub fn merge(&mut self, other: &Overrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(t, m, n, anonymize, use_retrieval, use_profile);
    }

    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        if let Some(t) = self.t {
            cfg.t = t;
        }
        if let Some(m) = self.m {
            cfg.m = m;
        }
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(a) = self.anonymize {
            cfg.anonymize = a;
        }
        if let Some(r) = self.use_retrieval {
            cfg.use_retrieval = r;
        }
        if let Some(p) = self.use_profile {
            cfg.use_profile = p;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    pub story_id: String,
    pub character: String,
    pub cutoff: Option<StoryTime>,
    pub method: Method,
    pub overrides: Overrides,
    /// Alternates user and character, starting with the user.
    pub history: Vec<Turn>,
}

impl ChatSession {
    pub fn turns(&self) -> usize {
        self.history.len() / 2
    }

    /// Dialogue context for the next message. A first message is passed
    /// through as the question; later ones carry the prior turns.
    pub fn context_for(&self, text: &str) -> String {
        if self.history.is_empty() {
            return text.trim().to_string();
        }
        let mut turns: Vec<(&str, &str)> = self
            .history
            .iter()
            .map(|t| (t.speaker.as_str(), t.text.as_str()))
            .collect();
        turns.push((USER_SPEAKER, text));
        render_dialogue(&turns)
    }

    pub fn task_for(&self, text: &str) -> InterviewTask {
        InterviewTask {
            task_id: format!("{}-{:03}", self.session_id, self.turns() + 1),
            task_type: if self.cutoff.is_some() {
                TaskType::DialogueCompletion
            } else {
                TaskType::OpenEnded
            },
            story_id: self.story_id.clone(),
            character: self.character.clone(),
            query: self.context_for(text),
            cutoff: self.cutoff,
            popularity_rank: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    story_id: String,
    character: String,
    #[serde(default)]
    cutoff: Option<StoryTime>,
    #[serde(default = "default_method")]
    method: Method,
    #[serde(default)]
    overrides: Overrides,
}

fn default_method() -> Method {
    Method::Rolefact
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct UpdateSession {
    #[serde(default)]
    method: Option<Method>,
    #[serde(default)]
    overrides: Overrides,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Message {
    text: String,
    #[serde(default)]
    method: Option<Method>,
    #[serde(default)]
    overrides: Overrides,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageReply {
    pub response: String,
    pub trace: ResponseTrace,
}

#[derive(Debug)]
pub enum ServiceError {
    NotFound(String),
    Invalid(String),
    Backend { stage: String, message: String },
    Internal(String),
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ServiceError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            ServiceError::Invalid(m) => (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": m })),
            ServiceError::Backend { stage, message } => {
                (StatusCode::BAD_GATEWAY, json!({ "error": message, "stage": stage }))
            }
            ServiceError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": m })),
        };
        (status, Json(body)).into_response()
    }
}

impl From<PipelineError> for ServiceError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Stage { .. } | PipelineError::Retrieval(_) => ServiceError::Backend {
                stage: e.stage_name().to_string(),
                message: e.to_string(),
            },
            PipelineError::Kb(_) | PipelineError::Config(_) => ServiceError::Invalid(e.to_string()),
        }
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: Value) -> Result<T, ServiceError> {
    serde_json::from_value(body).map_err(|e| ServiceError::Invalid(e.to_string()))
}

type SessionSlot = Arc<tokio::sync::Mutex<ChatSession>>;

pub struct AppState {
    kb: Arc<KnowledgeBase>,
    index: Arc<Bm25Index>,
    client: Arc<LlmClient>,
    base: PipelineConfig,
    sessions: Mutex<BTreeMap<String, SessionSlot>>,
    next_id: AtomicU64,
    log: Option<Mutex<File>>,
}

impl AppState {
    pub fn new(kb: Arc<KnowledgeBase>, index: Arc<Bm25Index>, client: Arc<LlmClient>, base: PipelineConfig) -> Self {
        AppState {
            kb,
            index,
            client,
            base,
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            log: None,
        }
    }

    /// Replays `path` (if it exists) and appends future session changes to it.
    pub fn with_session_log(mut self, path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        let mut restored: BTreeMap<String, ChatSession> = BTreeMap::new();
        let mut needs_newline = false;
        if path.exists() {
            let raw = std::fs::read(path)?;
            needs_newline = !raw.is_empty() && !raw.ends_with(b"\n");
            for (i, line) in BufReader::new(raw.as_slice()).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ChatSession>(&line) {
                    Ok(s) => {
                        restored.insert(s.session_id.clone(), s);
                    }
                    Err(e) => warn!("{}:{}: skipping unreadable session record: {e}", path.display(), i + 1),
                }
            }
        }
        let max_id = restored
            .keys()
            .filter_map(|id| id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()))
            .max()
            .unwrap_or(0);
        self.next_id = AtomicU64::new(max_id + 1);
        if !restored.is_empty() {
            info!("restored {} sessions from {}", restored.len(), path.display());
        }
        *self.sessions.get_mut().expect("sessions lock") = restored
            .into_iter()
            .map(|(k, v)| (k, Arc::new(tokio::sync::Mutex::new(v))))
            .collect();
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if needs_newline {
            file.write_all(b"\n")?;
        }
        self.log = Some(Mutex::new(file));
        Ok(self)
    }

    fn persist(&self, session: &ChatSession) -> Result<(), ServiceError> {
        let Some(log) = &self.log else { return Ok(()) };
        let mut line = serde_json::to_string(session).map_err(|e| ServiceError::Internal(e.to_string()))?;
        line.push('\n');
        let mut file = log.lock().expect("session log lock");
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| ServiceError::Internal(format!("session log: {e}")))
    }

    fn session(&self, id: &str) -> Result<SessionSlot, ServiceError> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {id}")))
    }

    fn config_for(&self, overrides: &Overrides) -> Result<PipelineConfig, ServiceError> {
        overrides.validate().map_err(ServiceError::Invalid)?;
        let cfg = overrides.apply(&self.base);
        cfg.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn router(state: Arc<AppState>, cors: bool) -> Router {
    let router = Router::new()
        .route("/v1/stories", get(list_stories))
        .route("/v1/stories/{id}/characters", get(list_characters))
        .route("/v1/stories/{id}/timeline", get(timeline))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session).patch(update_session))
        .route("/v1/sessions/{id}/message", post(message))
        .with_state(state);
    if cors {
        router.layer(CorsLayer::permissive())
    } else {
        router
    }
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr, cors: bool) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, cors))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn list_stories(State(state): State<Arc<AppState>>) -> Json<Value> {
    let stories: Vec<Value> = state
        .kb
        .stories()
        .map(|s| {
            json!({
                "story_id": s.story_id,
                "title": s.title,
                "events": s.events.len(),
                "scenes": s.timeline().len(),
                "characters": s.characters.len(),
                "max_time": s.max_time(),
            })
        })
        .collect();
    Json(Value::Array(stories))
}

fn story_or_404<'a>(kb: &'a KnowledgeBase, id: &str) -> Result<&'a crate::knowledge_base::Story, ServiceError> {
    kb.story(id).map_err(|e| ServiceError::NotFound(e.to_string()))
}

async fn list_characters(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Value>, ServiceError> {
    let story = story_or_404(&state.kb, &id)?;
    let ranked = story.popularity_ranking();
    let mut out: Vec<Value> = ranked
        .iter()
        .enumerate()
        .map(|(i, (name, count))| {
            json!({
                "name": name,
                "popularity_rank": i + 1,
                "speech_count": count,
                "has_profile": state.kb.get_profile(&id, name).is_ok(),
            })
        })
        .collect();
    for name in &story.characters {
        if !ranked.iter().any(|(n, _)| n == name) {
            out.push(json!({
                "name": name,
                "popularity_rank": null,
                "speech_count": 0,
                "has_profile": state.kb.get_profile(&id, name).is_ok(),
            }));
        }
    }
    Ok(Json(Value::Array(out)))
}

async fn timeline(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Value>, ServiceError> {
    let story = story_or_404(&state.kb, &id)?;
    let scenes: Vec<Value> = story
        .timeline()
        .into_iter()
        .map(|(scene, min, max)| json!({ "scene_index": scene, "min_time": min, "max_time": max }))
        .collect();
    Ok(Json(Value::Array(scenes)))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(body): Json<Value>,
) -> Result<(StatusCode, Json<Value>), ServiceError> {
    let req: CreateSession = parse_body(body)?;
    let story = story_or_404(&state.kb, &req.story_id)?;
    if !story.characters.contains(&req.character) {
        return Err(ServiceError::NotFound(format!(
            "story {} has no character {}",
            req.story_id, req.character
        )));
    }
    state.config_for(&req.overrides)?;
    let id = format!("s{:06}", state.next_id.fetch_add(1, Ordering::SeqCst));
    let session = ChatSession {
        session_id: id.clone(),
        story_id: req.story_id,
        character: req.character,
        cutoff: req.cutoff,
        method: req.method,
        overrides: req.overrides,
        history: Vec::new(),
    };
    state.persist(&session)?;
    state
        .sessions
        .lock()
        .expect("sessions lock")
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ChatSession>, ServiceError> {
    let slot = state.session(&id)?;
    let session = slot.lock().await;
    Ok(Json(session.clone()))
}

async fn update_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<Value>,
) -> Result<Json<ChatSession>, ServiceError> {
    let req: UpdateSession = parse_body(body)?;
    let slot = state.session(&id)?;
    let mut session = slot.lock().await;
    let mut overrides = session.overrides.clone();
    overrides.merge(&req.overrides);
    state.config_for(&overrides)?;
    session.overrides = overrides;
    if let Some(m) = req.method {
        session.method = m;
    }
    state.persist(&session)?;
    Ok(Json(session.clone()))
}

async fn message(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<Value>,
) -> Result<Json<MessageReply>, ServiceError> {
    let req: Message = parse_body(body)?;
    if req.text.trim().is_empty() {
        return Err(ServiceError::Invalid("empty message text".into()));
    }
    let slot = state.session(&id)?;
    // Held across the run: one message at a time per session.
    let mut session = slot.lock().await;
    let mut overrides = session.overrides.clone();
    overrides.merge(&req.overrides);
    let cfg = state.config_for(&overrides)?;
    let method = req.method.unwrap_or(session.method);
    let task = session.task_for(&req.text);

    let worker = state.clone();
    let trace = tokio::task::spawn_blocking(move || {
        respond(method, &worker.client, &worker.kb, worker.index.as_ref(), &task, &cfg)
    })
    .await
    .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))??;

    let mut updated = session.clone();
    updated.overrides = overrides;
    updated.method = method;
    updated.history.push(Turn {
        speaker: USER_SPEAKER.to_string(),
        text: req.text.trim().to_string(),
    });
    updated.history.push(Turn {
        speaker: updated.character.clone(),
        text: trace.final_response.clone(),
    });
    state.persist(&updated)?;
    *session = updated;
    Ok(Json(MessageReply {
        response: trace.final_response.clone(),
        trace,
    }))
}
