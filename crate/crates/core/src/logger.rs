//! Demonstration episode files: newline-delimited JSON, header first.
//!
//! ```plain
//! {"type":"header","schema_version":1,"session_id":...,"profile":{...},...}
//! {"t":0,"stream":"event","payload":{"tag":"record_start","task":"pick"}}
//! {"t":0,"stream":"joints","payload":[2998,3000,3000,3000,2800,2048]}
//! {"t":0,"stream":"torque","payload":[0.0,0.0,0.0,0.0,0.0]}
//! ```
//!
//! Timestamps are integer nanoseconds since session start so replays can be
//! compared bit for bit.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::firmware::{FirmwareError, ForceFeedbackParams};
use crate::pipeline::{self, LoopState};
use crate::retarget::HandProfile;
use crate::streams::{CameraFrameRef, Pose, Stamped, StreamKind, StreamSet};
use crate::units::{Ticks, Timestamp, CHANNEL_COUNT, FE_COUNT};

pub const SCHEMA_VERSION: u32 = 1;

/// Maximum time between flushes, in session time.
pub const FLUSH_INTERVAL_NS: u64 = 100_000_000;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("record written before episode header")]
    NoHeader,
    #[error("episode header already written")]
    HeaderTwice,
    #[error("storage: {0}")]
    Io(#[from] io::Error),
    #[error("serializing record: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("episode has no valid header")]
    MissingHeader,
    #[error("replay: {0}")]
    Firmware(#[from] FirmwareError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRef {
    pub name: String,
    pub hash: String,
    /// Full profile, so an episode can be replayed on its own.
    pub document: HandProfile,
}

impl ProfileRef {
    pub fn of(profile: &HandProfile) -> ProfileRef {
        ProfileRef { name: profile.name.clone(), hash: profile.content_hash(), document: profile.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub schema_version: u32,
    pub session_id: String,
    pub profile: ProfileRef,
    pub scenario: String,
    pub ff_params: ForceFeedbackParams,
    /// Wall-clock start, milliseconds since the Unix epoch. Excluded from
    /// determinism comparisons.
    pub start_wall_clock_ms: u64,
    pub task: String,
    /// Free-text alias; no body measurements are ever recorded.
    #[serde(default)]
    pub operator: String,
    /// Loop state at the first recorded cycle.
    pub initial_state: LoopState,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum HeaderLine {
    Header(EpisodeHeader),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum Event {
    RecordStart {
        task: String,
    },
    RecordStop {
        success: bool,
    },
    /// Virtual hand block placed (`value`) or removed (`null`) on an FE channel.
    Block {
        channel: usize,
        value: Option<f64>,
    },
    Note {
        text: String,
    },
    StorageError {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stream", content = "payload", rename_all = "snake_case")]
pub enum Payload {
    /// Raw firmware inputs: five FE positions, then the thumb AA raw reading.
    Joints([i64; CHANNEL_COUNT]),
    Torque([f64; FE_COUNT]),
    RobotTargets(Vec<f64>),
    Contact([bool; FE_COUNT]),
    /// `[px, py, pz, qw, qx, qy, qz]`.
    Pose([f64; 7]),
    Camera(u64),
    Event(Event),
}

impl Payload {
    pub fn kind(&self) -> StreamKind {
        match self {
            Payload::Joints(_) => StreamKind::Joints,
            Payload::Torque(_) => StreamKind::Torque,
            Payload::RobotTargets(_) => StreamKind::RobotTargets,
            Payload::Contact(_) => StreamKind::Contact,
            Payload::Pose(_) => StreamKind::Pose,
            Payload::Camera(_) => StreamKind::Camera,
            Payload::Event(_) => StreamKind::Event,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: Timestamp,
    #[serde(flatten)]
    pub payload: Payload,
}

impl LogRecord {
    pub fn new(t: Timestamp, payload: Payload) -> LogRecord {
        LogRecord { t, payload }
    }
}

/// Single-writer episode sink over any byte stream.
pub struct EpisodeWriter<W: Write> {
    out: W,
    header: bool,
    last_flush: Option<Timestamp>,
    records: u64,
}

impl EpisodeWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self, LogError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(EpisodeWriter::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> EpisodeWriter<W> {
    pub fn new(out: W) -> Self {
        EpisodeWriter { out, header: false, last_flush: None, records: 0 }
    }

    pub fn write_header(&mut self, header: &EpisodeHeader) -> Result<(), LogError> {
        if self.header {
            return Err(LogError::HeaderTwice);
        }
        serde_json::to_writer(&mut self.out, &HeaderLine::Header(header.clone()))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.header = true;
        Ok(())
    }

    /// Appends a record; flushes whenever 100 ms of session time have passed.
    pub fn record(&mut self, rec: &LogRecord) -> Result<(), LogError> {
        if !self.header {
            return Err(LogError::NoHeader);
        }
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.records += 1;
        let due = match self.last_flush {
            None => true,
            Some(last) => rec.t.0.saturating_sub(last.0) >= FLUSH_INTERVAL_NS,
        };
        if due {
            self.out.flush()?;
            self.last_flush = Some(rec.t);
        }
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn flush(&mut self) -> Result<(), LogError> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(mut self) -> Result<W, LogError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub header_ok: bool,
    pub records: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn expected_arity(kind: StreamKind, targets: Option<usize>) -> Option<usize> {
    match kind {
        StreamKind::Joints => Some(CHANNEL_COUNT),
        StreamKind::Torque | StreamKind::Contact => Some(FE_COUNT),
        StreamKind::RobotTargets => targets,
        StreamKind::Pose => Some(7),
        StreamKind::Camera | StreamKind::Event => None,
    }
}

fn stream_kind(name: &str) -> Option<StreamKind> {
    StreamKind::ALL.into_iter().find(|k| k.name() == name)
}

/// Checks an episode byte stream. Never panics; every problem becomes a
/// violation tied to its line.
pub fn validate_bytes(bytes: &[u8]) -> ValidationReport {
    let text = String::from_utf8_lossy(bytes);
    let ends_with_newline = text.ends_with('\n');
    let lines: Vec<&str> = text.split('\n').collect();
    let mut report = ValidationReport::default();
    let mut target_arity = None;
    let mut last_t: BTreeMap<StreamKind, u64> = BTreeMap::new();
    let n_lines = if ends_with_newline { lines.len() - 1 } else { lines.len() };

    for (idx, raw) in lines.iter().take(n_lines).enumerate() {
        let line_no = idx + 1;
        let is_last_partial = !ends_with_newline && idx + 1 == n_lines;
        let mut violate = |msg: String| report.violations.push(Violation { line: line_no, message: msg });
        if raw.trim().is_empty() {
            if !is_last_partial {
                violate("empty line".into());
            }
            continue;
        }
        let value: Value = match serde_json::from_str(raw) {
            Ok(v) => v,
            Err(e) => {
                if is_last_partial {
                    violate("partial record (truncated final line)".into());
                } else {
                    violate(format!("malformed JSON: {e}"));
                }
                continue;
            }
        };

        if idx == 0 {
            if value.get("type").and_then(Value::as_str) != Some("header") {
                violate("first line is not an episode header".into());
            } else {
                match serde_json::from_value::<HeaderLine>(value) {
                    Ok(HeaderLine::Header(h)) => {
                        report.header_ok = true;
                        if h.schema_version != SCHEMA_VERSION {
                            violate(format!("unsupported schema_version {}", h.schema_version));
                        }
                        if h.profile.document.validate().is_err() {
                            violate("embedded profile is invalid".into());
                        }
                        if h.profile.document.content_hash() != h.profile.hash {
                            violate("profile hash does not match embedded profile".into());
                        }
                        if h.profile.document.name != h.profile.name {
                            violate("profile name does not match embedded profile".into());
                        }
                        target_arity = Some(h.profile.document.joint_count());
                    }
                    Err(e) => violate(format!("invalid header: {e}")),
                }
            }
            continue;
        }

        if value.get("type").and_then(Value::as_str) == Some("header") {
            violate("duplicate header".into());
            continue;
        }
        report.records += 1;
        let Some(t) = value.get("t").and_then(Value::as_u64) else {
            violate("missing or non-integer timestamp".into());
            continue;
        };
        let Some(kind) = value.get("stream").and_then(Value::as_str).and_then(stream_kind) else {
            violate("missing or unknown stream".into());
            continue;
        };
        if let Some(prev) = last_t.insert(kind, t) {
            if t < prev {
                violate(format!("{} timestamp {t} earlier than previous {prev}", kind.name()));
            }
        }
        let payload = value.get("payload");
        if let Some(n) = expected_arity(kind, target_arity) {
            match payload.and_then(Value::as_array) {
                Some(a) if a.len() == n => {}
                Some(a) => violate(format!("{} payload has {} values, expected {n}", kind.name(), a.len())),
                None => violate(format!("{} payload is not an array", kind.name())),
            }
        }
        if serde_json::from_value::<LogRecord>(value.clone()).is_err() {
            violate(format!("{} payload has wrong element types", kind.name()));
        }
    }
    if n_lines == 0 || !report.header_ok && report.violations.iter().all(|v| v.line != 1) {
        report.violations.insert(0, Violation { line: 1, message: "missing episode header".into() });
    }
    report
}

pub fn validate(path: &Path) -> io::Result<ValidationReport> {
    Ok(validate_bytes(&fs::read(path)?))
}

/// A parsed episode. Unparseable lines are skipped; use [`validate_bytes`]
/// to see them.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub header: EpisodeHeader,
    pub records: Vec<LogRecord>,
}

impl Episode {
    pub fn parse(text: &str) -> Result<Episode, LogError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| serde_json::from_str::<HeaderLine>(l).ok())
            .map(|HeaderLine::Header(h)| h)
            .ok_or(LogError::MissingHeader)?;
        let records = lines.filter_map(|l| serde_json::from_str::<LogRecord>(l).ok()).collect();
        Ok(Episode { header, records })
    }

    pub fn load(path: &Path) -> Result<Episode, LogError> {
        Episode::parse(&fs::read_to_string(path)?)
    }

    pub fn to_ndjson(&self) -> Result<String, LogError> {
        let mut w = EpisodeWriter::new(Vec::new());
        w.write_header(&self.header)?;
        for r in &self.records {
            w.record(r)?;
        }
        Ok(String::from_utf8(w.into_inner()?).expect("JSON is UTF-8"))
    }

    pub fn streams(&self) -> StreamSet {
        let mut s = StreamSet::default();
        for r in &self.records {
            let t = r.t;
            match &r.payload {
                Payload::Joints(v) => s.joints.push(Stamped { t, value: *v }),
                Payload::Torque(v) => s.torque.push(Stamped { t, value: *v }),
                Payload::RobotTargets(v) => s.robot_targets.push(Stamped { t, value: v.clone() }),
                Payload::Contact(v) => s.contact.push(Stamped { t, value: *v }),
                Payload::Pose(a) => {
                    if let Ok(p) = Pose::from_array(t, *a) {
                        s.pose.push(p);
                    }
                }
                Payload::Camera(i) => s.camera.push(CameraFrameRef { frame_index: *i, t }),
                Payload::Event(_) => {}
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub stream: StreamKind,
    pub t: Timestamp,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub cycles: u64,
    pub compared: u64,
    pub divergences: u64,
    pub first: Option<Divergence>,
}

impl ReplayReport {
    pub fn is_identical(&self) -> bool {
        self.divergences == 0
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Re-runs firmware, retargeting and the virtual hand over the logged raw
/// inputs and compares torque, robot target and contact records bit for bit.
/// `params` overrides the logged force-feedback parameters.
pub fn replay(episode: &Episode, params: Option<&ForceFeedbackParams>) -> Result<ReplayReport, LogError> {
    let h = &episode.header;
    let profile = &h.profile.document;
    let params = params.unwrap_or(&h.ff_params);
    params.validate()?;
    let mut state = h.initial_state.clone();
    let mut pending_blocks = Vec::new();
    let mut produced: Option<(Timestamp, pipeline::CycleOutputs)> = None;
    let mut report = ReplayReport::default();

    for rec in &episode.records {
        let mut compare = |stream: StreamKind, same: bool, expected: String, actual: String| {
            report.compared += 1;
            if !same {
                report.divergences += 1;
                if report.first.is_none() {
                    report.first = Some(Divergence { stream, t: rec.t, expected, actual });
                }
            }
        };
        let current = produced.as_ref().filter(|(t, _)| *t == rec.t).map(|(_, o)| o);
        match &rec.payload {
            Payload::Event(Event::Block { channel, value }) if *channel < FE_COUNT => {
                pending_blocks.push((*channel, *value));
            }
            Payload::Joints(q) => {
                let fe: [Ticks; FE_COUNT] = std::array::from_fn(|i| Ticks(q[i]));
                let aa = u16::try_from(q[FE_COUNT]).unwrap_or(u16::MAX);
                let out = pipeline::cycle(&mut state, &fe, aa, &pending_blocks, profile, params, rec.t)?;
                pending_blocks.clear();
                produced = Some((rec.t, out));
                report.cycles += 1;
            }
            Payload::Torque(logged) => {
                let actual = current.map(|o| o.firmware.tau_cmd.to_vec()).unwrap_or_default();
                compare(StreamKind::Torque, bits_eq(logged, &actual), format!("{logged:?}"), format!("{actual:?}"));
            }
            Payload::RobotTargets(logged) => {
                let actual = current.map(|o| o.targets.angles()).unwrap_or_default();
                compare(StreamKind::RobotTargets, bits_eq(logged, &actual), format!("{logged:?}"), format!("{actual:?}"));
            }
            Payload::Contact(logged) => {
                let actual = current.map(|o| o.contacts.to_vec()).unwrap_or_default();
                compare(StreamKind::Contact, logged[..] == actual[..], format!("{logged:?}"), format!("{actual:?}"));
            }
            _ => {}
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub duration_s: f64,
    pub records: BTreeMap<StreamKind, usize>,
    pub contact_fraction: [f64; FE_COUNT],
    pub success: bool,
    /// Time from episode start to the successful stop event.
    pub completion_time_s: Option<f64>,
    /// No `record_stop` event: duration runs to the last record.
    pub end_event_missing: bool,
}

impl EpisodeStats {
    pub fn csv_header() -> String {
        let mut cols = vec!["duration_s".to_string(), "success".into(), "completion_time_s".into(), "end_event_missing".into()];
        cols.extend(StreamKind::ALL.iter().map(|k| format!("records_{}", k.name())));
        cols.extend((0..FE_COUNT).map(|i| format!("contact_fraction{i}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cells = vec![
            self.duration_s.to_string(),
            self.success.to_string(),
            self.completion_time_s.map(|c| c.to_string()).unwrap_or_default(),
            self.end_event_missing.to_string(),
        ];
        cells.extend(StreamKind::ALL.iter().map(|k| self.records.get(k).copied().unwrap_or(0).to_string()));
        cells.extend(self.contact_fraction.iter().map(|f| f.to_string()));
        cells.join(",")
    }
}

pub fn stats(episode: &Episode) -> EpisodeStats {
    let mut s = EpisodeStats::default();
    let Some(first) = episode.records.first() else {
        s.end_event_missing = true;
        return s;
    };
    let start = first.t;
    let mut end = start;
    let mut contact_true = [0usize; FE_COUNT];
    let mut contact_total = 0usize;
    let mut stop = None;
    for r in &episode.records {
        end = end.max(r.t);
        *s.records.entry(r.payload.kind()).or_default() += 1;
        match &r.payload {
            Payload::Contact(c) => {
                contact_total += 1;
                for (n, flag) in contact_true.iter_mut().zip(c) {
                    *n += usize::from(*flag);
                }
            }
            Payload::Event(Event::RecordStop { success }) => stop = Some((r.t, *success)),
            _ => {}
        }
    }
    s.duration_s = (end.0 - start.0) as f64 / 1e9;
    if contact_total > 0 {
        s.contact_fraction = contact_true.map(|n| n as f64 / contact_total as f64);
    }
    match stop {
        Some((t, success)) => {
            s.success = success;
            s.completion_time_s = success.then(|| (t.0 - start.0) as f64 / 1e9);
        }
        None => s.end_event_missing = true,
    }
    s
}
