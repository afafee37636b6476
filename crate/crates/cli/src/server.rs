use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query as QueryParams, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::watch;
use urgent_core::gateway::{IncidentDescriptor, SensorEnvelope, SourceRegistration};
use urgent_core::system::{Command, EventFilter, Notification, SystemHandle};
use urgent_core::SimTime;

use crate::api::{error_status, parse_command, run_query, status_code, Query};

/// Notifications sent per stream round trip to the state thread.
const STREAM_PAGE: usize = 256;

#[derive(Clone)]
pub struct AppState {
    handle: SystemHandle,
    token: Option<Arc<str>>,
    /// Latest notification sequence number, for waking stream subscribers.
    seq: Arc<watch::Sender<u64>>,
}

impl AppState {
    pub fn new(handle: SystemHandle, token: Option<String>) -> Self {
        let (tx, _) = watch::channel(0);
        Self { handle, token: token.map(Into::into), seq: Arc::new(tx) }
    }

    /// Runs a command on the state thread and wakes stream subscribers.
    pub async fn execute(&self, command: Command) -> Response {
        let h = self.handle.clone();
        let res = tokio::task::spawn_blocking(move || {
            let reply = h.execute(command)?;
            let seq = h.read(|s| s.last_seq())?;
            Ok::<_, urgent_core::system::SystemError>((reply, seq))
        })
        .await;
        match res {
            Ok(Ok((reply, seq))) => {
                self.seq.send_modify(|v| *v = (*v).max(seq));
                (status(status_code(&reply)), Json(reply)).into_response()
            }
            Ok(Err(e)) => (StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response(),
            Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        }
    }

    async fn query(&self, q: Query) -> Response {
        let h = self.handle.clone();
        let res = tokio::task::spawn_blocking(move || h.read(move |s| run_query(s, &q))).await;
        match res {
            Ok(Ok(Ok(Value::String(text)))) => ([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response(),
            Ok(Ok(Ok(v))) => Json(v).into_response(),
            Ok(Ok(Err(e))) => (status(error_status(&e)), Json(json!({"error": {"class": e.class(), "message": e.to_string()}}))).into_response(),
            Ok(Err(e)) => (StatusCode::SERVICE_UNAVAILABLE, e.to_string()).into_response(),
            Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        }
    }

    async fn page(&self, since: u64) -> Option<Vec<Notification>> {
        let h = self.handle.clone();
        tokio::task::spawn_blocking(move || h.read(move |s| s.notifications_since(since, STREAM_PAGE).to_vec())).await.ok()?.ok()
    }
}

fn status(code: u16) -> StatusCode {
    StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
}

fn bad_body(message: String) -> Response {
    (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({"ok": false, "events": [], "error": {"class": "invalid", "message": message}}))).into_response()
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, String> {
    serde_json::from_slice(body).map_err(|e| e.to_string())
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    let Some(token) = &state.token else {
        return next.run(req).await;
    };
    let bearer = bearer(req.headers());
    let param = req.uri().query().and_then(|q| q.split('&').find_map(|kv| kv.strip_prefix("token=")));
    if bearer.or(param) == Some(&**token) {
        next.run(req).await
    } else {
        (StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response()
    }
}

async fn post_incident(State(st): State<AppState>, body: Bytes) -> Response {
    match parse::<IncidentDescriptor>(&body) {
        Ok(incident) => st.execute(Command::CreateIncident { incident }).await,
        Err(e) => bad_body(e),
    }
}

async fn post_source(State(st): State<AppState>, body: Bytes) -> Response {
    match parse::<SourceRegistration>(&body) {
        Ok(source) => st.execute(Command::RegisterSource { source }).await,
        Err(e) => bad_body(e),
    }
}

async fn post_ingest(State(st): State<AppState>, body: Bytes) -> Response {
    match parse::<SensorEnvelope>(&body) {
        Ok(envelope) => st.execute(Command::Ingest { envelope }).await,
        Err(e) => bad_body(e),
    }
}

async fn post_command(State(st): State<AppState>, body: Bytes) -> Response {
    match parse::<Value>(&body).and_then(parse_command) {
        Ok(command) => st.execute(command).await,
        Err(e) => bad_body(e),
    }
}

#[derive(Debug, Default, Deserialize)]
struct JobParams {
    incident_id: Option<String>,
    request_id: Option<String>,
}

async fn get_jobs(State(st): State<AppState>, QueryParams(p): QueryParams<JobParams>) -> Response {
    st.query(Query::Jobs { incident_id: p.incident_id, request_id: p.request_id }).await
}

async fn get_events(State(st): State<AppState>, QueryParams(f): QueryParams<EventFilter>) -> Response {
    st.query(Query::Events(f)).await
}

#[derive(Debug, Default, Deserialize)]
struct StreamParams {
    since: Option<u64>,
}

/// Client messages on the stream.
#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ClientMessage {
    /// Restart delivery after `since`.
    Resume { since: u64 },
}

async fn stream(ws: WebSocketUpgrade, State(st): State<AppState>, QueryParams(p): QueryParams<StreamParams>) -> Response {
    ws.on_upgrade(move |socket| run_stream(socket, st, p.since.unwrap_or(0)))
}

/// Sends every notification after `cursor`, then waits for more. Each message
/// is one notification carrying its sequence number, so a client that
/// reconnects with `since=<last seq>` sees no gaps and no repeats.
async fn run_stream(mut socket: WebSocket, st: AppState, mut cursor: u64) {
    let mut rx = st.seq.subscribe();
    loop {
        rx.borrow_and_update();
        loop {
            let Some(page) = st.page(cursor).await else { return };
            let Some(last) = page.last() else { break };
            let last = last.seq;
            for n in &page {
                let text = serde_json::to_string(n).expect("notification serializes");
                if socket.send(Message::Text(text.into())).await.is_err() {
                    return;
                }
            }
            cursor = last;
        }
        tokio::select! {
            changed = rx.changed() => if changed.is_err() { return },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(t))) => {
                    if let Ok(ClientMessage::Resume { since }) = serde_json::from_str(&t) {
                        cursor = since;
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/incidents", post(post_incident).get(|State(st): State<AppState>| async move { st.query(Query::Incidents).await }))
        .route("/sources", post(post_source))
        .route("/ingest", post(post_ingest))
        .route("/commands", post(post_command))
        .route("/machines", get(|State(st): State<AppState>| async move { st.query(Query::Machines).await }))
        .route("/jobs", get(get_jobs))
        .route("/ensembles", get(|State(st): State<AppState>| async move { st.query(Query::Ensembles).await }))
        .route("/events", get(get_events))
        .route("/trace", get(|State(st): State<AppState>| async move { st.query(Query::Trace).await }))
        .route("/status", get(|State(st): State<AppState>| async move { st.query(Query::Status).await }))
        .route("/stream", get(stream))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Advances simulated time at `speed` simulated seconds per wall second.
pub async fn pace_clock(state: AppState, speed: f64, tick: Duration) {
    let start = tokio::time::Instant::now();
    let h = state.handle.clone();
    let Ok(Ok(origin)) = tokio::task::spawn_blocking(move || h.read(|s| s.now())).await else { return };
    let mut interval = tokio::time::interval(tick);
    loop {
        interval.tick().await;
        let target = origin + (start.elapsed().as_secs_f64() * speed) as SimTime;
        let h = state.handle.clone();
        let Ok(Ok(now)) = tokio::task::spawn_blocking(move || h.read(|s| s.now())).await else { return };
        if target > now {
            let _ = state.execute(Command::AdvanceTo { time: target }).await;
        }
    }
}

pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(header::AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ")
}
