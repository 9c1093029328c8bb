//! JSON message and request/response types of the session service, plus
//! the stateless operations behind its HTTP endpoints. The CLI calls these
//! directly when no service is given.

use serde::{Deserialize, Serialize};

use crate::firmware::{DeviceState, ParamOverrides};
use crate::logger::{self, Episode, EpisodeStats, LogError, ReplayReport, ValidationReport};
use crate::retarget::{retarget_all, HandProfile, ProfileError};
use crate::session::{CommandError, CommandMessage, ExitReport, StateMessage};
use crate::streams::{self, AlignConfig, AlignError};
use crate::units::{Ticks, Timestamp, AA_RAW_MAX, CHANNEL_COUNT, FE_COUNT};
use crate::wire::{self, DecodeError, EncodeError, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Controller,
    Viewer,
}

/// Everything the service sends over the live socket besides
/// [`StateMessage`]s, which carry their own `"type": "state"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Role {
        role: Role,
    },
    Ack {
        command: String,
    },
    Error {
        message: String,
    },
    /// An episode was closed.
    Episode {
        path: Option<String>,
        records: u64,
    },
    /// The loop has ended; no more state follows.
    Stopped {
        report: ExitReport,
    },
}

/// One message from the live socket.
#[derive(Debug, Clone, PartialEq)]
pub enum Incoming {
    State(Box<StateMessage>),
    Server(ServerMessage),
}

impl Incoming {
    pub fn parse(text: &str) -> serde_json::Result<Incoming> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        if v.get("type").and_then(|t| t.as_str()) == Some("state") {
            Ok(Incoming::State(Box::new(serde_json::from_value(v)?)))
        } else {
            Ok(Incoming::Server(serde_json::from_value(v)?))
        }
    }
}

impl CommandMessage {
    /// The `type` tag, used in acknowledgements.
    pub fn name(&self) -> &'static str {
        match self {
            CommandMessage::ClaimControl => "claim_control",
            CommandMessage::SetInput { .. } => "set_input",
            CommandMessage::SetBlock { .. } => "set_block",
            CommandMessage::RecordStart { .. } => "record_start",
            CommandMessage::RecordStop { .. } => "record_stop",
            CommandMessage::SetParams { .. } => "set_params",
            CommandMessage::Stop => "stop",
        }
    }
}

impl From<CommandError> for ServerMessage {
    fn from(e: CommandError) -> Self {
        ServerMessage::Error { message: e.message }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub session: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDecodeRequest {
    pub hex: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDecodeResponse {
    pub frames: Vec<Frame>,
    pub diagnostics: Vec<DecodeError>,
    pub consumed: usize,
    pub residue: usize,
    /// Human-readable listing.
    pub dump: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEncodeRequest {
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEncodeResponse {
    pub hex: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetargetRequest {
    /// Shipped profile name or a full profile document.
    pub profile: ProfileSource,
    /// Five FE tick values followed by the thumb AA raw reading.
    pub rows: Vec<[i64; CHANNEL_COUNT]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSource {
    Name(String),
    Document(Box<HandProfile>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetargetResponse {
    pub joint_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Rows with at least one channel outside the device range.
    pub clamped_rows: usize,
}

/// An episode file's contents, for validate / stats / replay / align.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRequest {
    pub episode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<ParamOverrides>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<AlignConfig>,
}

impl EpisodeRequest {
    pub fn new(episode: String) -> EpisodeRequest {
        EpisodeRequest { episode, overrides: None, align: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignResponse {
    pub csv: String,
    /// Grid rows dropped for stale or missing streams.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub name: String,
    pub bytes: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("bad hex: {0}")]
    Hex(#[from] hex::FromHexError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("{0}")]
    Invalid(String),
}

pub fn wire_decode(req: &WireDecodeRequest) -> Result<WireDecodeResponse, ApiError> {
    let bytes = wire::parse_hex(&req.hex)?;
    let d = wire::decode(&bytes);
    let dump = wire::dump(&d);
    Ok(WireDecodeResponse { frames: d.frames, diagnostics: d.diagnostics, consumed: d.consumed, residue: d.residue, dump })
}

pub fn wire_encode(req: &WireEncodeRequest) -> Result<WireEncodeResponse, ApiError> {
    Ok(WireEncodeResponse { hex: wire::hex_spaced(&wire::encode(&req.frame)?) })
}

/// Stateless retargeting of recorded tick rows; the AA reading is used as is.
pub fn retarget_rows(req: &RetargetRequest) -> Result<RetargetResponse, ApiError> {
    let profile = match &req.profile {
        ProfileSource::Name(n) => HandProfile::resolve(n)?,
        ProfileSource::Document(p) => {
            p.validate()?;
            (**p).clone()
        }
    };
    let mut out = RetargetResponse { joint_names: profile.joint_names(), rows: Vec::with_capacity(req.rows.len()), clamped_rows: 0 };
    let mut state = DeviceState::new();
    for (i, row) in req.rows.iter().enumerate() {
        let aa = row[FE_COUNT];
        if !(0..=i64::from(AA_RAW_MAX)).contains(&aa) {
            return Err(ApiError::Invalid(format!("row {}: AA reading {aa} outside 0..={AA_RAW_MAX}", i + 1)));
        }
        for (ch, q) in state.fe.iter_mut().zip(row) {
            ch.q_operator = Ticks(*q);
        }
        state.aa.raw = aa as u16;
        state.aa.filtered = aa as f64;
        let targets = retarget_all(&state, &profile, Timestamp::ZERO);
        out.clamped_rows += usize::from(targets.clamped > 0);
        out.rows.push(targets.angles());
    }
    Ok(out)
}

pub fn validate_episode(req: &EpisodeRequest) -> ValidationReport {
    logger::validate_bytes(req.episode.as_bytes())
}

pub fn episode_stats(req: &EpisodeRequest) -> Result<EpisodeStats, ApiError> {
    Ok(logger::stats(&Episode::parse(&req.episode)?))
}

pub fn replay_episode(req: &EpisodeRequest) -> Result<ReplayReport, ApiError> {
    let ep = Episode::parse(&req.episode)?;
    let params = match &req.overrides {
        Some(o) => Some(o.apply(&ep.header.ff_params).map_err(LogError::from)?),
        None => None,
    };
    Ok(logger::replay(&ep, params.as_ref())?)
}

/// Aligned CSV export of an episode.
pub fn align_episode(req: &EpisodeRequest) -> Result<AlignResponse, ApiError> {
    let ep = Episode::parse(&req.episode)?;
    let cfg = req.align.clone().unwrap_or_default();
    let aligned = streams::align(&ep.streams(), &cfg)?;
    let mut buf = Vec::new();
    streams::write_csv(&aligned.samples, &ep.header.profile.document.joint_names(), &mut buf)
        .map_err(|e| ApiError::Invalid(e.to_string()))?;
    Ok(AlignResponse { csv: String::from_utf8(buf).expect("csv is utf-8"), dropped: aligned.dropped })
}
