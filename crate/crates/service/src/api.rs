//! HTTP routes.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use slide_agent_core::backends::content_hash;
use slide_agent_core::orchestrator::{Event, Intervention, InterventionError, SessionConfig};
use slide_agent_core::slide_store::{GridLoc, SlideError};

use crate::manager::{is_terminal_event, CreateRequest, ManagedSession, ManagerError, SessionHandle, SessionManager};

pub type AppState = Arc<SessionManager>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session).get(list_sessions))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/resume", post(resume_session))
        .route("/v1/sessions/{id}/interventions", post(intervene))
        .route("/v1/sessions/{id}/trajectory", get(trajectory))
        .route("/v1/sessions/{id}/events", get(events))
        .route("/v1/slides", get(list_slides))
        .route("/v1/slides/{id}/manifest", get(manifest))
        .route("/v1/slides/{id}/tiles/{mag}/{col}/{row}", get(tile))
        .with_state(state)
}

pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: Vec<FieldError>,
}

#[derive(Debug, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn bad_request(message: impl Into<String>, fields: Vec<FieldError>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            fields,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if !self.fields.is_empty() {
            body["fields"] = json!(self.fields);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<ManagerError> for ApiError {
    fn from(e: ManagerError) -> Self {
        use slide_agent_core::runtime::RuntimeError;
        let status = match &e {
            ManagerError::NotFound(_) | ManagerError::Slide(RuntimeError::UnknownSlide(_)) => StatusCode::NOT_FOUND,
            ManagerError::Busy(_) => StatusCode::TOO_MANY_REQUESTS,
            ManagerError::Conflict(_) => StatusCode::CONFLICT,
            ManagerError::Intervention(InterventionError::NotPaused(_)) => StatusCode::CONFLICT,
            ManagerError::Intervention(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ManagerError::Session(slide_agent_core::orchestrator::SessionError::Config(_)) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking session work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker panicked: {e}")))
}

/// Parses a JSON object body, reporting the offending field on failure.
fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("body is not valid JSON: {e}"), Vec::new()))?;
    serde_json::from_value(value).map_err(|e| {
        let message = e.to_string();
        let field = message
            .split('`')
            .nth(1)
            .map(str::to_string)
            .unwrap_or_else(|| "body".to_string());
        ApiError::bad_request("invalid request body", vec![FieldError { field, message }])
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    slide_id: String,
    question: String,
    #[serde(default)]
    options: Vec<String>,
    /// Partial session config laid over the server defaults.
    #[serde(default)]
    config: Option<serde_json::Map<String, Value>>,
}

async fn create_session(State(mgr): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionHandle>)> {
    let body: CreateBody = parse_body(&body)?;
    let mut fields = Vec::new();
    if body.slide_id.trim().is_empty() {
        fields.push(FieldError {
            field: "slide_id".into(),
            message: "must not be empty".into(),
        });
    }
    if body.question.trim().is_empty() {
        fields.push(FieldError {
            field: "question".into(),
            message: "must not be empty".into(),
        });
    }
    if body.options.len() == 1 || body.options.iter().any(|o| o.trim().is_empty()) {
        fields.push(FieldError {
            field: "options".into(),
            message: "needs at least two non-empty choices when given".into(),
        });
    }
    let mut merged = serde_json::to_value(&mgr.runtime.config.session).expect("config serializes");
    for (k, v) in body.config.unwrap_or_default() {
        merged[k] = v;
    }
    let config = match serde_json::from_value::<SessionConfig>(merged) {
        Ok(c) => match c.validate() {
            Ok(()) => Some(c),
            Err(message) => {
                fields.push(FieldError {
                    field: "config".into(),
                    message,
                });
                None
            }
        },
        Err(e) => {
            fields.push(FieldError {
                field: "config".into(),
                message: e.to_string(),
            });
            None
        }
    };
    if !fields.is_empty() {
        return Err(ApiError::bad_request("invalid session request", fields));
    }
    let config = config.expect("validated above");
    let interactive = config.interactive;
    let req = CreateRequest {
        slide_id: body.slide_id,
        question: body.question,
        options: body.options,
        config,
    };
    let m = mgr.clone();
    let managed = blocking(move || m.create(req)).await??;
    if !interactive {
        let driven = managed.clone();
        tokio::task::spawn_blocking(move || driven.drive());
    }
    Ok((StatusCode::CREATED, Json(managed.handle())))
}

async fn list_sessions(State(mgr): State<AppState>) -> Json<Vec<SessionHandle>> {
    Json(mgr.list())
}

#[derive(Serialize)]
struct SessionView {
    #[serde(flatten)]
    handle: SessionHandle,
    interactive: bool,
    event_count: usize,
    /// Latest analytic state with its findings, if any.
    state: Option<Value>,
    last_action: Option<Value>,
    final_answer: Option<Value>,
    error: Option<Value>,
}

fn view(s: &ManagedSession) -> SessionView {
    let handle = s.handle();
    let events = s.log.snapshot();
    let traj = s.trajectory();
    let interactive = traj.as_ref().is_some_and(|t| t.config.interactive);
    let (state, last_action, final_answer, error) = match &traj {
        None => (None, None, None, None),
        Some(t) => {
            let last = t.iterations.last();
            (
                last.map(|it| json!({ "iteration": it.state.iteration, "state": it.state, "findings": it.findings })),
                t.iterations.iter().rev().find_map(|it| it.action.as_ref()).map(|a| json!(a)),
                t.final_answer.as_ref().map(|f| json!(f.answer)),
                t.error.as_ref().map(|e| json!(e)),
            )
        }
    };
    SessionView {
        handle,
        interactive,
        event_count: events.len(),
        state,
        last_action,
        final_answer,
        error,
    }
}

async fn get_session(State(mgr): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let s = mgr.get(&id)?;
    Ok(Json(view(&s)))
}

async fn resume_session(State(mgr): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let s = mgr.get(&id)?;
    let run = s.clone();
    blocking(move || run.resume()).await??;
    Ok(Json(view(&s)))
}

#[derive(Deserialize)]
struct AuthorQuery {
    author: Option<String>,
}

async fn intervene(
    State(mgr): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<AuthorQuery>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let s = mgr.get(&id)?;
    let intervention: Intervention = parse_body(&body)?;
    let author = q.author.unwrap_or_else(|| "api".to_string());
    let run = s.clone();
    let record = blocking(move || run.intervene(intervention, &author)).await??;
    Ok(Json(json!({ "intervention": record, "session": view(&s) })))
}

/// The event log exactly as persisted, as a JSON array.
async fn trajectory(State(mgr): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<Value>>> {
    let s = mgr.get(&id)?;
    let path = s.path.clone();
    let text = blocking(move || std::fs::read_to_string(path)).await?.map_err(|e| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("reading trajectory: {e}"))
    })?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            // a line still being written
            Err(_) => break,
        }
    }
    Ok(Json(out))
}

#[derive(Deserialize)]
struct EventsQuery {
    after: Option<u64>,
}

/// Server-sent events, one per logged event, `id` = sequence number. The
/// stream ends after the final or error event. Reconnecting clients pass
/// `Last-Event-ID` (or `?after=`) to skip what they have seen.
async fn events(
    State(mgr): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>> {
    let s = mgr.get(&id)?;
    let last_seen = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .or(q.after);
    let next = last_seen.map_or(0, |n| n + 1);
    let rx = s.log.subscribe();
    struct Cursor {
        session: Arc<ManagedSession>,
        rx: tokio::sync::watch::Receiver<usize>,
        next: u64,
        pending: std::collections::VecDeque<Event>,
        done: bool,
    }
    let cursor = Cursor {
        session: s,
        rx,
        next,
        pending: Default::default(),
        done: false,
    };
    let stream = stream::unfold(cursor, |mut c| async move {
        loop {
            if let Some(e) = c.pending.pop_front() {
                c.next = e.seq + 1;
                if is_terminal_event(&e) {
                    c.done = true;
                }
                let data = serde_json::to_string(&e).expect("events serialize");
                let ev = SseEvent::default().id(e.seq.to_string()).event(e.body.kind()).data(data);
                return Some((Ok(ev), c));
            }
            if c.done {
                return None;
            }
            c.rx.borrow_and_update();
            c.pending.extend(c.session.log.from_seq(c.next));
            if c.pending.is_empty() {
                if c.session.status().is_terminal() && c.session.log.from_seq(c.next).is_empty() {
                    return None;
                }
                if c.rx.changed().await.is_err() {
                    return None;
                }
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Serialize)]
struct SlideSummary {
    slide_id: String,
    tile_size_px: u32,
    levels: Vec<Value>,
}

async fn list_slides(State(mgr): State<AppState>) -> Json<Vec<SlideSummary>> {
    Json(
        mgr.runtime
            .library
            .bundles()
            .map(|b| SlideSummary {
                slide_id: b.slide_id().to_string(),
                tile_size_px: b.tile_size_px(),
                levels: b
                    .levels()
                    .iter()
                    .map(|l| json!({ "magnification": l.magnification, "grid_w": l.grid_w, "grid_h": l.grid_h }))
                    .collect(),
            })
            .collect(),
    )
}

async fn manifest(State(mgr): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let b = mgr
        .runtime
        .library
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("slide {id:?} not found")))?;
    Ok(Json(json!(b.manifest())))
}

async fn tile(
    State(mgr): State<AppState>,
    Path((id, mag, col, row)): Path<(String, u32, u32, u32)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let b = mgr
        .runtime
        .library
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("slide {id:?} not found")))?;
    let patch = match b.patch(mag, GridLoc::new(col, row)) {
        Ok(Some(p)) => p,
        Ok(None) => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                format!("tile ({col},{row}) is outside the {mag}x grid"),
            ))
        }
        Err(e @ SlideError::LevelNotFound(_)) => return Err(ApiError::new(StatusCode::NOT_FOUND, e.to_string())),
        Err(e) => return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    };
    let tile = blocking(move || b.tile_bytes(&patch))
        .await?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let etag = format!("\"{}\"", content_hash(&tile.bytes));
    let cache = HeaderValue::from_static("public, max-age=86400");
    let etag_value = HeaderValue::from_str(&etag).expect("hex etag is a valid header");
    if headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"))
    {
        return Ok((
            StatusCode::NOT_MODIFIED,
            [(header::ETAG, etag_value), (header::CACHE_CONTROL, cache)],
        )
            .into_response());
    }
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static(tile.media_type)),
            (header::ETAG, etag_value),
            (header::CACHE_CONTROL, cache),
        ],
        tile.bytes,
    )
        .into_response())
}
