//! Client for the session service: HTTP/JSON tools and the live socket.

use std::collections::VecDeque;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use dexmouse_core::api::{
    AlignResponse, EpisodeEntry, EpisodeRequest, Health, Incoming, RetargetRequest, RetargetResponse, Role, ServerMessage,
    WireDecodeRequest, WireDecodeResponse, WireEncodeRequest, WireEncodeResponse,
};
use dexmouse_core::firmware::ParamOverrides;
use dexmouse_core::logger::{EpisodeStats, ReplayReport, ValidationReport};
use dexmouse_core::session::{CommandMessage, StateMessage};
use dexmouse_core::streams::AlignConfig;
use dexmouse_core::wire::Frame;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("service returned {status}: {message}")]
    Api { status: u16, message: String },
    #[error("socket: {0}")]
    Socket(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("unexpected message: {0}")]
    Json(#[from] serde_json::Error),
    #[error("command rejected: {0}")]
    Rejected(String),
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for the service")]
    Timeout,
}

/// HTTP/JSON side of the service.
#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:8765`.
    pub fn new(base: &str) -> Client {
        Client { base: base.trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    /// The live socket URL for this service.
    pub fn ws_url(&self) -> String {
        let rest = self.base.strip_prefix("http").unwrap_or(&self.base);
        format!("ws{rest}/ws")
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
            .unwrap_or(text);
        Err(ClientError::Api { status: status.as_u16(), message })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/api/health").await
    }

    pub async fn state(&self) -> Result<StateMessage, ClientError> {
        self.get("/api/state").await
    }

    pub async fn profiles(&self) -> Result<Vec<String>, ClientError> {
        self.get("/api/profiles").await
    }

    pub async fn scenarios(&self) -> Result<Vec<String>, ClientError> {
        self.get("/api/scenarios").await
    }

    pub async fn episodes(&self) -> Result<Vec<EpisodeEntry>, ClientError> {
        self.get("/api/episodes").await
    }

    pub async fn episode(&self, name: &str) -> Result<String, ClientError> {
        let resp = self.http.get(format!("{}/api/episodes/{name}", self.base)).send().await?;
        Ok(Self::check(resp).await?.text().await?)
    }

    pub async fn validate(&self, episode: String) -> Result<ValidationReport, ClientError> {
        self.post("/api/episodes/validate", &EpisodeRequest::new(episode)).await
    }

    pub async fn stats(&self, episode: String) -> Result<EpisodeStats, ClientError> {
        self.post("/api/episodes/stats", &EpisodeRequest::new(episode)).await
    }

    pub async fn replay(&self, episode: String, overrides: Option<ParamOverrides>) -> Result<ReplayReport, ClientError> {
        self.post("/api/episodes/replay", &EpisodeRequest { overrides, ..EpisodeRequest::new(episode) }).await
    }

    pub async fn align(&self, episode: String, config: AlignConfig) -> Result<AlignResponse, ClientError> {
        self.post("/api/episodes/align", &EpisodeRequest { align: Some(config), ..EpisodeRequest::new(episode) }).await
    }

    pub async fn wire_decode(&self, hex: &str) -> Result<WireDecodeResponse, ClientError> {
        self.post("/api/wire/decode", &WireDecodeRequest { hex: hex.into() }).await
    }

    pub async fn wire_encode(&self, frame: Frame) -> Result<WireEncodeResponse, ClientError> {
        self.post("/api/wire/encode", &WireEncodeRequest { frame }).await
    }

    pub async fn retarget(&self, req: &RetargetRequest) -> Result<RetargetResponse, ClientError> {
        self.post("/api/retarget", req).await
    }
}

type Socket = WebSocketStream<MaybeTlsStream<TcpStream>>;

/// Oldest buffered states are discarded beyond this.
const STATE_BUFFER: usize = 1024;

/// Live socket. States and server events that arrive while waiting for a
/// command reply are buffered, not lost.
pub struct LiveClient {
    socket: Socket,
    role: Role,
    states: VecDeque<StateMessage>,
    events: VecDeque<ServerMessage>,
    timeout: Duration,
}

impl LiveClient {
    /// Connects and reads the initial role announcement.
    pub async fn connect(url: &str) -> Result<LiveClient, ClientError> {
        let (socket, _) = tokio_tungstenite::connect_async(url).await?;
        let mut c =
            LiveClient { socket, role: Role::Viewer, states: VecDeque::new(), events: VecDeque::new(), timeout: Duration::from_secs(5) };
        match c.reply().await? {
            ServerMessage::Role { role } => c.role = role,
            other => return Err(ClientError::Rejected(format!("expected role, got {other:?}"))),
        }
        Ok(c)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    async fn read(&mut self) -> Result<Incoming, ClientError> {
        loop {
            let msg = tokio::time::timeout(self.timeout, self.socket.next()).await.map_err(|_| ClientError::Timeout)?;
            match msg {
                Some(Ok(Message::Text(text))) => return Ok(Incoming::parse(text.as_str())?),
                Some(Ok(Message::Close(_))) | None => return Err(ClientError::Closed),
                Some(Ok(_)) => continue,
                Some(Err(e)) => return Err(e.into()),
            }
        }
    }

    fn buffer_state(&mut self, s: StateMessage) {
        if self.states.len() == STATE_BUFFER {
            self.states.pop_front();
        }
        self.states.push_back(s);
    }

    /// Next direct reply (role, ack or error), buffering anything else.
    async fn reply(&mut self) -> Result<ServerMessage, ClientError> {
        loop {
            match self.read().await? {
                Incoming::State(s) => self.buffer_state(*s),
                Incoming::Server(m @ (ServerMessage::Episode { .. } | ServerMessage::Stopped { .. })) => self.events.push_back(m),
                Incoming::Server(m) => return Ok(m),
            }
        }
    }

    /// Sends raw text, returning the service's direct reply.
    pub async fn send_text(&mut self, text: &str) -> Result<ServerMessage, ClientError> {
        self.socket.send(Message::Text(text.into())).await?;
        self.reply().await
    }

    /// Sends a command; a rejection becomes [`ClientError::Rejected`].
    pub async fn command(&mut self, cmd: &CommandMessage) -> Result<(), ClientError> {
        match self.send_text(&serde_json::to_string(cmd)?).await? {
            ServerMessage::Ack { .. } => Ok(()),
            ServerMessage::Role { role } => {
                self.role = role;
                Ok(())
            }
            ServerMessage::Error { message } => Err(ClientError::Rejected(message)),
            other => Err(ClientError::Rejected(format!("unexpected reply {other:?}"))),
        }
    }

    pub async fn claim_control(&mut self) -> Result<Role, ClientError> {
        self.command(&CommandMessage::ClaimControl).await?;
        Ok(self.role)
    }

    pub async fn next_state(&mut self) -> Result<StateMessage, ClientError> {
        if let Some(s) = self.states.pop_front() {
            return Ok(s);
        }
        loop {
            match self.read().await? {
                Incoming::State(s) => return Ok(*s),
                Incoming::Server(m) => self.events.push_back(m),
            }
        }
    }

    /// Next episode or stop notification.
    pub async fn next_event(&mut self) -> Result<ServerMessage, ClientError> {
        if let Some(e) = self.events.pop_front() {
            return Ok(e);
        }
        loop {
            match self.read().await? {
                Incoming::State(s) => self.buffer_state(*s),
                Incoming::Server(m) => return Ok(m),
            }
        }
    }

    /// Drops buffered states so the next one read is fresh.
    pub fn clear_states(&mut self) {
        self.states.clear();
    }

    pub async fn close(mut self) -> Result<(), ClientError> {
        self.socket.close(None).await?;
        Ok(())
    }
}
