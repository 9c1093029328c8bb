//! HTTP/JSON endpoints and the live WebSocket.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tokio::sync::broadcast::error::RecvError;

use dexmouse_core::api::{
    self, ApiError, EpisodeEntry, EpisodeRequest, Health, RetargetRequest, Role, ServerMessage, WireDecodeRequest, WireEncodeRequest,
};
use dexmouse_core::retarget::BUILTIN_PROFILES;
use dexmouse_core::session::CommandMessage;
use dexmouse_core::simhand::BUILTIN_SCENARIOS;

use crate::runner::SessionLink;

pub struct App {
    session: Option<SessionLink>,
    log_dir: Option<PathBuf>,
    /// Client currently holding control, if any.
    controller: Mutex<Option<u64>>,
    next_client: AtomicU64,
}

impl App {
    pub fn new(session: Option<SessionLink>, log_dir: Option<PathBuf>) -> Arc<App> {
        Arc::new(App { session, log_dir, controller: Mutex::new(None), next_client: AtomicU64::new(1) })
    }

    pub fn session(&self) -> Option<&SessionLink> {
        self.session.as_ref()
    }

    fn claim(&self, client: u64) -> ServerMessage {
        let mut c = self.controller.lock().expect("controller lock");
        match *c {
            Some(holder) if holder != client => ServerMessage::Error { message: "controller busy".into() },
            _ => {
                *c = Some(client);
                ServerMessage::Role { role: Role::Controller }
            }
        }
    }

    fn is_controller(&self, client: u64) -> bool {
        *self.controller.lock().expect("controller lock") == Some(client)
    }

    fn release(&self, client: u64) {
        let mut c = self.controller.lock().expect("controller lock");
        if *c == Some(client) {
            *c = None;
        }
    }

    async fn handle_text(&self, client: u64, link: &SessionLink, text: &str) -> ServerMessage {
        let cmd: CommandMessage = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return ServerMessage::Error { message: format!("malformed command: {e}") },
        };
        if cmd == CommandMessage::ClaimControl {
            return self.claim(client);
        }
        if !self.is_controller(client) {
            return ServerMessage::Error { message: "read-only: claim control first".into() };
        }
        let name = cmd.name();
        match link.send(cmd).await {
            Ok(()) => ServerMessage::Ack { command: name.into() },
            Err(e) => e.into(),
        }
    }
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/api/health", get(health))
        .route("/api/state", get(state))
        .route("/api/profiles", get(|| async { Json(BUILTIN_PROFILES.iter().map(|(n, _)| *n).collect::<Vec<_>>()) }))
        .route("/api/scenarios", get(|| async { Json(BUILTIN_SCENARIOS.iter().map(|(n, _)| *n).collect::<Vec<_>>()) }))
        .route("/api/episodes", get(list_episodes))
        .route("/api/episodes/{name}", get(get_episode))
        .route("/api/episodes/validate", post(|Json(r): Json<EpisodeRequest>| async move { Json(api::validate_episode(&r)) }))
        .route("/api/episodes/stats", post(|Json(r): Json<EpisodeRequest>| async move { reply(api::episode_stats(&r)) }))
        .route("/api/episodes/replay", post(|Json(r): Json<EpisodeRequest>| async move { reply(api::replay_episode(&r)) }))
        .route("/api/episodes/align", post(|Json(r): Json<EpisodeRequest>| async move { reply(api::align_episode(&r)) }))
        .route("/api/wire/decode", post(|Json(r): Json<WireDecodeRequest>| async move { reply(api::wire_decode(&r)) }))
        .route("/api/wire/encode", post(|Json(r): Json<WireEncodeRequest>| async move { reply(api::wire_encode(&r)) }))
        .route("/api/retarget", post(|Json(r): Json<RetargetRequest>| async move { reply(api::retarget_rows(&r)) }))
        .with_state(app)
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

fn reply<T: Serialize>(res: Result<T, ApiError>) -> Response {
    match res {
        Ok(v) => Json(v).into_response(),
        Err(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

async fn health(State(app): State<Arc<App>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        session: app.session.as_ref().is_some_and(|s| s.is_running()),
    })
}

async fn state(State(app): State<Arc<App>>) -> Response {
    let Some(link) = &app.session else {
        return error(StatusCode::NOT_FOUND, "no session");
    };
    let latest = link.latest.borrow().clone();
    match latest {
        Some(s) => Json(s).into_response(),
        None => error(StatusCode::SERVICE_UNAVAILABLE, "no state yet"),
    }
}

async fn list_episodes(State(app): State<Arc<App>>) -> Response {
    let Some(dir) = app.log_dir.clone() else {
        return Json(Vec::<EpisodeEntry>::new()).into_response();
    };
    let listing = tokio::task::spawn_blocking(move || -> std::io::Result<Vec<EpisodeEntry>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".ndjson") {
                out.push(EpisodeEntry { name, bytes: entry.metadata()?.len() });
            }
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    })
    .await;
    match listing {
        Ok(Ok(list)) => Json(list).into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn get_episode(State(app): State<Arc<App>>, Path(name): Path<String>) -> Response {
    let Some(dir) = &app.log_dir else {
        return error(StatusCode::NOT_FOUND, "no log directory");
    };
    if name.contains(['/', '\\']) || name.starts_with('.') || !name.ends_with(".ndjson") {
        return error(StatusCode::BAD_REQUEST, "bad episode name");
    }
    match tokio::fs::read_to_string(dir.join(&name)).await {
        Ok(text) => ([(axum::http::header::CONTENT_TYPE, "application/x-ndjson")], text).into_response(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => error(StatusCode::NOT_FOUND, format!("no episode {name}")),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn ws_upgrade(State(app): State<Arc<App>>, ws: WebSocketUpgrade) -> Response {
    if app.session.is_none() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no session");
    }
    ws.on_upgrade(move |socket| client(socket, app))
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    match serde_json::to_string(msg) {
        Ok(text) => socket.send(Message::Text(text.into())).await.is_ok(),
        Err(_) => false,
    }
}

async fn client(mut socket: WebSocket, app: Arc<App>) {
    let id = app.next_client.fetch_add(1, Ordering::Relaxed);
    let link = app.session.clone().expect("checked before upgrade");
    let mut states = link.states.subscribe();
    let mut events = link.events.subscribe();
    let mut states_open = true;
    let mut events_open = true;
    if send(&mut socket, &ServerMessage::Role { role: Role::Viewer }).await {
        loop {
            tokio::select! {
                msg = socket.recv() => match msg {
                    Some(Ok(Message::Text(text))) => {
                        let reply = app.handle_text(id, &link, text.as_str()).await;
                        if !send(&mut socket, &reply).await {
                            break;
                        }
                    }
                    Some(Ok(Message::Binary(_))) => {
                        if !send(&mut socket, &ServerMessage::Error { message: "expected a JSON text message".into() }).await {
                            break;
                        }
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => {}
                },
                s = states.recv(), if states_open => match s {
                    Ok(text) => {
                        if socket.send(Message::Text(text.as_ref().into())).await.is_err() {
                            break;
                        }
                    }
                    Err(RecvError::Lagged(n)) => {
                        link.dropped_states.fetch_add(n, Ordering::Relaxed);
                    }
                    Err(RecvError::Closed) => states_open = false,
                },
                e = events.recv(), if events_open => match e {
                    Ok(m) => {
                        if !send(&mut socket, &m).await {
                            break;
                        }
                    }
                    Err(RecvError::Lagged(_)) => {}
                    Err(RecvError::Closed) => events_open = false,
                },
            }
        }
    }
    app.release(id);
}
