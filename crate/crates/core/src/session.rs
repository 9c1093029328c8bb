//! Live session: a fixed-rate loop driving bus, firmware, retargeting, the
//! virtual hand and the episode logger, steered by operator commands.
//!
//! [`Engine`] is the single owner of all loop state and advances exactly one
//! cycle per [`Engine::step`]. It has no clock of its own; a simulated-clock
//! run simply calls `step` back to back, a wall-clock runner paces it.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, SyncSender, TrySendError};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::firmware::{FirmwareError, ForceFeedbackParams, GainMode, ParamOverrides};
use crate::logger::{EpisodeHeader, EpisodeWriter, Event, LogError, LogRecord, Payload, ProfileRef, SCHEMA_VERSION};
use crate::pipeline::{self, LoopState};
use crate::retarget::{denormalize, HandProfile, JointTarget, ProfileError};
use crate::simhand::{Scenario, ScenarioError, DEFAULT_RATE_LIMIT};
use crate::streams::{CameraClock, MockPoseSource, PathSpec, Pose, CAMERA_HZ, POSE_HZ};
use crate::units::{ChannelId, NormalizedFlexion, Ticks, Timestamp, AA_RAW_MAX, CHANNEL_COUNT, FE_COUNT};
use crate::wire::registers::{GOAL_CURRENT, GOAL_POSITION, PRESENT_POSITION, RAW_ANGLE};
use crate::wire::{Bus, BusConfig, BusError, Frame, ACTUATOR_IDS, ENCODER_ID};

pub const ENV_LOG_DIR: &str = "DEXMOUSE_LOG_DIR";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Firmware(#[from] FirmwareError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("reading script: {0}")]
    Script(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    #[default]
    Simulated,
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Operator input arrives as commands (API or script).
    #[default]
    Virtual,
    /// Operator input is read back from a recorded episode.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Shipped profile name or path to a profile file.
    pub profile: String,
    /// Shipped scenario name or path to a scenario file.
    pub scenario: String,
    pub ff_overrides: ParamOverrides,
    pub mode: Mode,
    /// Episode to feed in [`Mode::Replay`].
    pub replay_source: Option<PathBuf>,
    pub api_port: u16,
    pub state_broadcast_hz: u32,
    pub clock: Clock,
    /// Episode output directory; `None` keeps episodes in memory.
    pub log_dir: Option<PathBuf>,
    pub session_id: String,
    pub seed: u64,
    pub bus: BusConfig,
    /// First-order lag applied to operator input targets; 0 = immediate.
    pub input_lag_ms: f64,
    pub pose_path: PathSpec,
    /// Stop after this many cycles.
    pub max_cycles: Option<u64>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            profile: "bluerobin-8dof".into(),
            scenario: "pick_place".into(),
            ff_overrides: ParamOverrides::default(),
            mode: Mode::Virtual,
            replay_source: None,
            api_port: 8765,
            state_broadcast_hz: 20,
            clock: Clock::Simulated,
            log_dir: None,
            session_id: "session".into(),
            seed: 0,
            bus: BusConfig::default(),
            input_lag_ms: 50.0,
            pose_path: PathSpec::default(),
            max_cycles: None,
        }
    }
}

impl SessionConfig {
    /// Uses `DEXMOUSE_LOG_DIR` when no directory is configured.
    pub fn with_env_log_dir(mut self) -> Self {
        if self.log_dir.is_none() {
            self.log_dir = std::env::var_os(ENV_LOG_DIR).map(PathBuf::from);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CommandMessage {
    /// Ask to become the controlling client (handled by the API layer).
    ClaimControl,
    /// Exactly one of `ticks` / `normalized` must be set.
    SetInput {
        channel: u8,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ticks: Option<i64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        normalized: Option<f64>,
    },
    SetBlock {
        channel: u8,
        value: Option<f64>,
    },
    RecordStart {
        task: String,
        #[serde(default)]
        operator: String,
    },
    RecordStop {
        success: bool,
    },
    SetParams {
        params: ParamOverrides,
    },
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{message}")]
pub struct CommandError {
    pub message: String,
}

fn reject(message: impl Into<String>) -> CommandError {
    CommandError { message: message.into() }
}

/// Periodic loop snapshot for viewers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    #[serde(rename = "type")]
    pub kind: String,
    pub t: Timestamp,
    pub cycle: u64,
    /// Five FE positions and the thumb AA raw reading.
    pub q_operator: [i64; CHANNEL_COUNT],
    pub gain_mode: [GainMode; FE_COUNT],
    pub tau: [f64; FE_COUNT],
    pub u_actual: [f64; FE_COUNT],
    pub contact: [bool; FE_COUNT],
    pub blocks: [Option<f64>; FE_COUNT],
    pub robot_targets: Vec<JointTarget>,
    pub pose: [f64; 7],
    pub recording: bool,
}

/// An episode that has been closed.
#[derive(Debug, Clone, PartialEq)]
pub struct FinishedEpisode {
    pub path: Option<PathBuf>,
    /// File contents for in-memory episodes.
    pub bytes: Option<Vec<u8>>,
    pub records: u64,
}

enum Sink {
    Memory(EpisodeWriter<Vec<u8>>),
    File(EpisodeWriter<BufWriter<File>>, PathBuf),
    Threaded(ThreadedSink),
    Boxed(EpisodeWriter<Box<dyn Write + Send>>),
}

/// Writes on a separate thread behind a bounded queue; a full queue counts
/// as a storage failure rather than stalling the loop.
struct ThreadedSink {
    tx: Option<SyncSender<LogRecord>>,
    handle: Option<JoinHandle<Result<u64, LogError>>>,
    path: PathBuf,
}

const LOG_QUEUE_DEPTH: usize = 8192;

impl ThreadedSink {
    fn spawn(mut writer: EpisodeWriter<BufWriter<File>>, path: PathBuf) -> ThreadedSink {
        let (tx, rx) = mpsc::sync_channel::<LogRecord>(LOG_QUEUE_DEPTH);
        let handle = thread::Builder::new()
            .name("episode-writer".into())
            .spawn(move || {
                for rec in rx {
                    writer.record(&rec)?;
                }
                writer.flush()?;
                Ok(writer.records())
            })
            .expect("spawn writer thread");
        ThreadedSink { tx: Some(tx), handle: Some(handle), path }
    }

    fn join(&mut self) -> Result<u64, LogError> {
        self.tx.take();
        match self.handle.take() {
            Some(h) => h.join().unwrap_or_else(|_| Err(LogError::Io(io::Error::other("writer thread panicked")))),
            None => Ok(0),
        }
    }
}

impl Sink {
    fn write(&mut self, rec: &LogRecord) -> Result<(), LogError> {
        match self {
            Sink::Memory(w) => w.record(rec),
            Sink::File(w, _) => w.record(rec),
            Sink::Boxed(w) => w.record(rec),
            Sink::Threaded(t) => match t.tx.as_ref().map(|tx| tx.try_send(rec.clone())) {
                Some(Ok(())) => Ok(()),
                Some(Err(TrySendError::Full(_))) => Err(LogError::Io(io::Error::other("log queue full"))),
                _ => Err(t.join().err().unwrap_or_else(|| LogError::Io(io::Error::other("writer stopped")))),
            },
        }
    }

    fn finish(self) -> Result<FinishedEpisode, LogError> {
        match self {
            Sink::Memory(w) => {
                let records = w.records();
                Ok(FinishedEpisode { path: None, bytes: Some(w.into_inner()?), records })
            }
            Sink::File(w, path) => {
                let records = w.records();
                w.into_inner()?;
                Ok(FinishedEpisode { path: Some(path), bytes: None, records })
            }
            Sink::Boxed(w) => {
                let records = w.records();
                w.into_inner()?;
                Ok(FinishedEpisode { path: None, bytes: None, records })
            }
            Sink::Threaded(mut t) => {
                let records = t.join()?;
                Ok(FinishedEpisode { path: Some(t.path.clone()), bytes: None, records })
            }
        }
    }
}

/// Slider input smoothed by a first-order lag.
#[derive(Debug, Clone)]
struct VirtualOperator {
    target: [f64; CHANNEL_COUNT],
    position: [f64; CHANNEL_COUNT],
    alpha: f64,
}

impl VirtualOperator {
    fn new(profile: &HandProfile, lag_ms: f64, loop_hz: u32) -> VirtualOperator {
        let rest: [f64; CHANNEL_COUNT] = std::array::from_fn(|i| {
            let id = ChannelId::new(i as u8).expect("channel index");
            denormalize(NormalizedFlexion::EXTENDED, &profile.range(id)).0 as f64
        });
        let dt_ms = 1000.0 / f64::from(loop_hz);
        let alpha = if lag_ms <= 0.0 { 1.0 } else { 1.0 - (-dt_ms / lag_ms).exp() };
        VirtualOperator { target: rest, position: rest, alpha }
    }

    fn advance(&mut self) -> [i64; CHANNEL_COUNT] {
        for (p, t) in self.position.iter_mut().zip(&self.target) {
            *p += self.alpha * (t - *p);
        }
        self.position.map(|p| p.round() as i64)
    }
}

/// Block changes logged just before a cycle.
type BlockEvents = Vec<(usize, Option<f64>)>;

/// Per-cycle operator inputs recorded in an episode, for replay mode.
#[derive(Debug, Clone, Default)]
struct RecordedInputs {
    cycles: std::collections::VecDeque<([i64; CHANNEL_COUNT], BlockEvents)>,
}

impl RecordedInputs {
    fn from_episode(ep: &crate::logger::Episode) -> RecordedInputs {
        let mut out = RecordedInputs::default();
        let mut blocks = Vec::new();
        for r in &ep.records {
            match &r.payload {
                Payload::Event(Event::Block { channel, value }) => blocks.push((*channel, *value)),
                Payload::Joints(q) => out.cycles.push_back((*q, std::mem::take(&mut blocks))),
                _ => {}
            }
        }
        out
    }
}

/// Timed command script for simulated-clock runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InputScript {
    /// Run length in cycles (overrides `max_cycles` when set).
    #[serde(default)]
    pub cycles: Option<u64>,
    #[serde(default)]
    pub commands: Vec<ScriptedCommand>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCommand {
    pub cycle: u64,
    pub command: CommandMessage,
}

impl InputScript {
    pub fn load(path: &Path) -> Result<InputScript, SessionError> {
        let text = std::fs::read_to_string(path).map_err(|e| SessionError::Script(e.to_string()))?;
        let mut script: InputScript = serde_json::from_str(&text).map_err(|e| SessionError::Script(e.to_string()))?;
        script.commands.sort_by_key(|c| c.cycle);
        Ok(script)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExitReport {
    pub cycles: u64,
    pub episodes: Vec<PathBuf>,
    pub storage_errors: Vec<String>,
    pub rejected_commands: Vec<String>,
    pub bus_transactions: u64,
    pub bus_time_us: u64,
    pub bus_timeouts: u64,
    pub clamped_inputs: u64,
    /// Wall-clock runs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<JitterStats>,
    #[serde(default)]
    pub dropped_states: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JitterStats {
    pub mean_abs_us: f64,
    pub max_abs_us: f64,
    pub overruns: u64,
}

pub struct Engine {
    config: SessionConfig,
    profile: HandProfile,
    scenario: Scenario,
    params: ForceFeedbackParams,
    bus: Bus,
    state: LoopState,
    operator: VirtualOperator,
    recorded: Option<RecordedInputs>,
    pose: MockPoseSource,
    camera: CameraClock,
    last_pose: Pose,
    last_inputs: [i64; CHANNEL_COUNT],
    pending_blocks: Vec<(usize, Option<f64>)>,
    cycle: u64,
    sink: Option<Sink>,
    episode_count: u32,
    finished: Vec<FinishedEpisode>,
    report: ExitReport,
    stop_requested: bool,
    last_state: Option<StateMessage>,
}

impl Engine {
    /// Loads profile and scenario and validates everything up front; any
    /// configuration problem surfaces here, never mid-loop.
    pub fn new(config: SessionConfig) -> Result<Engine, SessionError> {
        let scenario = Scenario::resolve(&config.scenario)?;
        if !config.input_lag_ms.is_finite() || config.input_lag_ms < 0.0 {
            return Err(SessionError::Config("input_lag_ms must be >= 0".into()));
        }
        let (profile, params, state, recorded) = match config.mode {
            Mode::Virtual => {
                let profile = HandProfile::resolve(&config.profile)?;
                let params = config.ff_overrides.apply(&ForceFeedbackParams::default())?;
                let hand = scenario.initial_hand(profile.rate_limit.unwrap_or(DEFAULT_RATE_LIMIT));
                let state = LoopState::new(hand, &profile);
                (profile, params, state, None)
            }
            Mode::Replay => {
                // The episode carries everything needed to resume where it began.
                let path = config.replay_source.as_ref().ok_or_else(|| SessionError::Config("replay mode needs replay_source".into()))?;
                let ep = crate::logger::Episode::load(path)?;
                let params = config.ff_overrides.apply(&ep.header.ff_params)?;
                let recorded = RecordedInputs::from_episode(&ep);
                let h = ep.header;
                (h.profile.document, params, h.initial_state, Some(recorded))
            }
        };
        if config.state_broadcast_hz == 0 || config.state_broadcast_hz > params.loop_hz {
            return Err(SessionError::Config(format!("state_broadcast_hz must be in 1..={}", params.loop_hz)));
        }
        let bus = Bus::device_bus(config.bus.clone())?;
        let operator = VirtualOperator::new(&profile, config.input_lag_ms, params.loop_hz);
        let pose = MockPoseSource::new(config.seed, POSE_HZ, config.pose_path.clone());
        let last_pose = pose.sample(Timestamp::ZERO);
        let mut engine = Engine {
            last_inputs: operator.position.map(|p| p.round() as i64),
            config,
            profile,
            scenario,
            params,
            bus,
            state,
            operator,
            recorded,
            pose,
            camera: CameraClock::new(CAMERA_HZ),
            last_pose,
            pending_blocks: Vec::new(),
            cycle: 0,
            sink: None,
            episode_count: 0,
            finished: Vec::new(),
            report: ExitReport::default(),
            stop_requested: false,
            last_state: None,
        };
        engine.enable_torque()?;
        Ok(engine)
    }

    fn enable_torque(&mut self) -> Result<(), SessionError> {
        self.bus.transact(&Frame::write(crate::wire::BROADCAST_ID, crate::wire::registers::TORQUE_ENABLE.addr, &[1]))?;
        Ok(())
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn profile(&self) -> &HandProfile {
        &self.profile
    }

    pub fn params(&self) -> &ForceFeedbackParams {
        &self.params
    }

    pub fn loop_state(&self) -> &LoopState {
        &self.state
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn is_recording(&self) -> bool {
        self.sink.is_some()
    }

    pub fn stop_requested(&self) -> bool {
        self.stop_requested
    }

    pub fn last_state(&self) -> Option<&StateMessage> {
        self.last_state.as_ref()
    }

    /// Closed episodes since the last call.
    pub fn take_finished(&mut self) -> Vec<FinishedEpisode> {
        std::mem::take(&mut self.finished)
    }

    pub fn report(&self) -> &ExitReport {
        &self.report
    }

    /// Applies an operator command between cycles.
    pub fn apply(&mut self, cmd: &CommandMessage) -> Result<(), CommandError> {
        let res = self.apply_inner(cmd);
        if let Err(e) = &res {
            self.report.rejected_commands.push(e.message.clone());
        }
        res
    }

    fn apply_inner(&mut self, cmd: &CommandMessage) -> Result<(), CommandError> {
        match cmd {
            CommandMessage::ClaimControl => Ok(()),
            CommandMessage::SetInput { channel, ticks, normalized } => {
                let id = ChannelId::new(*channel).ok_or_else(|| reject(format!("channel {channel} outside 0..=5")))?;
                if self.recorded.is_some() {
                    return Err(reject("inputs come from the recorded episode in replay mode"));
                }
                let value = match (ticks, normalized) {
                    (Some(t), None) => {
                        let max = if id.is_actuated() { 4095 } else { i64::from(AA_RAW_MAX) };
                        if !(0..=max).contains(t) {
                            return Err(reject(format!("ticks {t} outside 0..={max}")));
                        }
                        *t
                    }
                    (None, Some(u)) => {
                        if !(0.0..=1.0).contains(u) {
                            return Err(reject(format!("normalized value {u} outside [0,1]")));
                        }
                        denormalize(NormalizedFlexion::new(*u), &self.profile.range(id)).0
                    }
                    _ => return Err(reject("set_input needs exactly one of ticks / normalized")),
                };
                self.operator.target[id.index()] = value as f64;
                Ok(())
            }
            CommandMessage::SetBlock { channel, value } => {
                let ch = usize::from(*channel);
                if ch >= FE_COUNT {
                    return Err(reject(format!("block channel {channel} outside 0..=4")));
                }
                if let Some(v) = value {
                    if !(0.0..=1.0).contains(v) {
                        return Err(reject(format!("block {v} outside [0,1]")));
                    }
                }
                self.pending_blocks.push((ch, *value));
                Ok(())
            }
            CommandMessage::RecordStart { task, operator } => self.start_recording(task, operator),
            CommandMessage::RecordStop { success } => self.stop_recording(Some(*success)),
            CommandMessage::SetParams { params } => {
                if self.is_recording() {
                    return Err(reject("set_params is not allowed while recording"));
                }
                self.params = params.apply(&self.params).map_err(|e| reject(e.to_string()))?;
                Ok(())
            }
            CommandMessage::Stop => {
                self.stop_requested = true;
                Ok(())
            }
        }
    }

    /// Starts recording into an arbitrary writer instead of the configured
    /// log directory.
    pub fn start_recording_to(&mut self, out: Box<dyn Write + Send>, task: &str, operator: &str) -> Result<(), CommandError> {
        if self.is_recording() {
            return Err(reject("already recording"));
        }
        self.episode_count += 1;
        let mut w = EpisodeWriter::new(out);
        w.write_header(&self.header(task, operator)).map_err(|e| reject(e.to_string()))?;
        self.open(Sink::Boxed(w), task);
        Ok(())
    }

    fn header(&self, task: &str, operator: &str) -> EpisodeHeader {
        EpisodeHeader {
            schema_version: SCHEMA_VERSION,
            session_id: self.config.session_id.clone(),
            profile: ProfileRef::of(&self.profile),
            scenario: self.scenario.name.clone(),
            ff_params: self.params.clone(),
            start_wall_clock_ms: wall_clock_ms(),
            task: task.to_string(),
            operator: operator.to_string(),
            initial_state: self.state.clone(),
        }
    }

    fn open(&mut self, sink: Sink, task: &str) {
        self.sink = Some(sink);
        let t = Timestamp::from_cycle(self.cycle);
        self.log(LogRecord::new(t, Payload::Event(Event::RecordStart { task: task.to_string() })));
    }

    fn start_recording(&mut self, task: &str, operator: &str) -> Result<(), CommandError> {
        if self.is_recording() {
            return Err(reject("already recording"));
        }
        self.episode_count += 1;
        let header = self.header(task, operator);
        let sink = match &self.config.log_dir {
            None => {
                let mut w = EpisodeWriter::new(Vec::new());
                w.write_header(&header).map_err(|e| reject(e.to_string()))?;
                Sink::Memory(w)
            }
            Some(dir) => {
                let path = dir.join(format!("{}-ep{:03}.ndjson", self.config.session_id, self.episode_count));
                let mut w = EpisodeWriter::create(&path).map_err(|e| reject(format!("opening episode: {e}")))?;
                w.write_header(&header).map_err(|e| reject(e.to_string()))?;
                match self.config.clock {
                    Clock::Simulated => Sink::File(w, path),
                    Clock::Wall => Sink::Threaded(ThreadedSink::spawn(w, path)),
                }
            }
        };
        self.open(sink, task);
        Ok(())
    }

    fn stop_recording(&mut self, success: Option<bool>) -> Result<(), CommandError> {
        if !self.is_recording() {
            return Err(reject("not recording"));
        }
        if let Some(success) = success {
            // Stamped at the last completed cycle.
            let t = Timestamp::from_cycle(self.cycle.saturating_sub(1));
            self.log(LogRecord::new(t, Payload::Event(Event::RecordStop { success })));
        }
        if let Some(sink) = self.sink.take() {
            match sink.finish() {
                Ok(ep) => {
                    if let Some(p) = &ep.path {
                        self.report.episodes.push(p.clone());
                    }
                    self.finished.push(ep);
                }
                Err(e) => self.report.storage_errors.push(e.to_string()),
            }
        }
        Ok(())
    }

    /// Appends to the open episode; a storage failure ends the recording
    /// but never the loop.
    fn log(&mut self, rec: LogRecord) {
        let Some(sink) = self.sink.as_mut() else { return };
        if let Err(e) = sink.write(&rec) {
            self.report.storage_errors.push(e.to_string());
            if let Some(sink) = self.sink.take() {
                let _ = sink.finish();
            }
        }
    }

    fn read_inputs(&mut self) -> [i64; CHANNEL_COUNT] {
        let mut blocks = Vec::new();
        let physical = match self.recorded.as_mut().and_then(|r| r.cycles.pop_front()) {
            Some((q, b)) => {
                blocks = b;
                q
            }
            None => self.operator.advance(),
        };
        self.pending_blocks.extend(blocks);
        for (i, id) in ACTUATOR_IDS.iter().enumerate() {
            self.bus.set_present_position(*id, physical[i]);
        }
        self.bus.set_raw_angle(ENCODER_ID, physical[FE_COUNT].clamp(0, i64::from(AA_RAW_MAX)) as u16);

        let mut q = self.last_inputs;
        match self.bus.transact(&Frame::sync_read(PRESENT_POSITION.addr, 4, &ACTUATOR_IDS)) {
            Ok(tx) => {
                for f in tx.responses.iter().filter(|f| f.status_error() == Some(0)) {
                    if let (Some(i), Ok(bytes)) = (ACTUATOR_IDS.iter().position(|id| *id == f.id), <[u8; 4]>::try_from(f.status_data())) {
                        q[i] = i64::from(i32::from_le_bytes(bytes));
                    }
                }
                self.report.bus_timeouts += tx.missing.len() as u64;
            }
            Err(_) => self.report.bus_timeouts += 1,
        }
        match self.bus.transact(&Frame::read(ENCODER_ID, RAW_ANGLE.addr, 2)) {
            Ok(tx) => {
                if let Some(bytes) =
                    tx.responses.first().filter(|f| f.status_error() == Some(0)).and_then(|f| <[u8; 2]>::try_from(f.status_data()).ok())
                {
                    q[FE_COUNT] = i64::from(u16::from_le_bytes(bytes));
                }
            }
            Err(_) => self.report.bus_timeouts += 1,
        }
        self.last_inputs = q;
        q
    }

    fn write_outputs(&mut self, tau: &[f64; FE_COUNT]) -> Result<(), BusError> {
        let currents: Vec<[u8; 2]> = tau.iter().map(|v| (v.round() as i16).to_le_bytes()).collect();
        let entries: Vec<(u8, &[u8])> = ACTUATOR_IDS.iter().zip(&currents).map(|(id, b)| (*id, &b[..])).collect();
        self.bus.transact(&Frame::sync_write(GOAL_CURRENT.addr, 2, &entries))?;
        let goals: Vec<[u8; 4]> = self.state.shadow.q_robot.iter().map(|q| (q.0 as i32).to_le_bytes()).collect();
        let entries: Vec<(u8, &[u8])> = ACTUATOR_IDS.iter().zip(&goals).map(|(id, b)| (*id, &b[..])).collect();
        self.bus.transact(&Frame::sync_write(GOAL_POSITION.addr, 4, &entries))?;
        Ok(())
    }

    /// Runs one 10 ms control cycle. Returns a state snapshot on broadcast
    /// cycles.
    pub fn step(&mut self) -> Result<Option<StateMessage>, SessionError> {
        if self.recorded.as_ref().is_some_and(|r| r.cycles.is_empty()) {
            self.stop_requested = true;
            return Ok(None);
        }
        let q = self.read_inputs();
        let t = Timestamp::from_cycle(self.cycle);

        if self.recorded.is_none() {
            for e in self.scenario.events_at(self.cycle) {
                self.pending_blocks.push((e.channel, e.block));
            }
        }
        let blocks = std::mem::take(&mut self.pending_blocks);
        if self.is_recording() {
            for (channel, value) in &blocks {
                self.log(LogRecord::new(t, Payload::Event(Event::Block { channel: *channel, value: *value })));
            }
        }

        let fe: [Ticks; FE_COUNT] = std::array::from_fn(|i| Ticks(q[i]));
        let aa = q[FE_COUNT] as u16;
        let out = pipeline::cycle(&mut self.state, &fe, aa, &blocks, &self.profile, &self.params, t)?;
        self.report.clamped_inputs += u64::from(out.targets.clamped);
        self.write_outputs(&out.firmware.tau_cmd)?;

        let poses = self.pose.poll(t);
        let frames = self.camera.poll(t);
        if let Some(p) = poses.last() {
            self.last_pose = *p;
        }
        if self.is_recording() {
            self.log(LogRecord::new(t, Payload::Joints(q)));
            self.log(LogRecord::new(t, Payload::Torque(out.firmware.tau_cmd)));
            self.log(LogRecord::new(t, Payload::RobotTargets(out.targets.angles())));
            self.log(LogRecord::new(t, Payload::Contact(out.contacts)));
            for p in &poses {
                self.log(LogRecord::new(p.t, Payload::Pose(p.to_array())));
            }
            for f in &frames {
                self.log(LogRecord::new(f.t, Payload::Camera(f.frame_index)));
            }
        }

        self.cycle += 1;
        self.report.cycles = self.cycle;
        self.report.bus_transactions = self.bus.transactions();
        self.report.bus_time_us = self.bus.clock_us();

        let every = u64::from((self.params.loop_hz / self.config.state_broadcast_hz).max(1));
        let snapshot = self.snapshot(t, &q, &out.targets.joints);
        let emit = (self.cycle - 1).is_multiple_of(every);
        self.last_state = Some(snapshot.clone());
        Ok(emit.then_some(snapshot))
    }

    fn snapshot(&self, t: Timestamp, q: &[i64; CHANNEL_COUNT], targets: &[JointTarget]) -> StateMessage {
        StateMessage {
            kind: "state".into(),
            t,
            cycle: self.cycle - 1,
            q_operator: *q,
            gain_mode: self.state.device.gain_modes(),
            tau: self.state.device.tau(),
            u_actual: self.state.hand.channels.map(|c| c.u_actual),
            contact: self.state.hand.contacts(),
            blocks: self.state.hand.channels.map(|c| c.block),
            robot_targets: targets.to_vec(),
            pose: self.last_pose.to_array(),
            recording: self.is_recording(),
        }
    }

    /// Closes any open episode (without a stop event) and returns the report.
    pub fn shutdown(&mut self) -> ExitReport {
        if self.is_recording() {
            let _ = self.stop_recording(None);
        }
        self.report.clone()
    }
}

fn wall_clock_ms() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Simulated-clock run: steps back to back, applying scripted commands at
/// their cycles, until the script length, `max_cycles` or a stop command.
pub fn run_session(config: SessionConfig, script: &InputScript) -> Result<(ExitReport, Vec<FinishedEpisode>), SessionError> {
    if config.clock != Clock::Simulated {
        return Err(SessionError::Config("run_session drives the simulated clock; use a wall-clock runner".into()));
    }
    let limit = script.cycles.or(config.max_cycles);
    if limit.is_none() && !script.commands.iter().any(|c| c.command == CommandMessage::Stop) && config.mode == Mode::Virtual {
        return Err(SessionError::Config("simulated run needs a cycle count or a stop command".into()));
    }
    let mut engine = Engine::new(config)?;
    let mut commands = script.commands.iter().peekable();
    let mut finished = Vec::new();
    while limit.is_none_or(|n| engine.cycle() < n) && !engine.stop_requested() {
        while let Some(c) = commands.next_if(|c| c.cycle <= engine.cycle()) {
            let _ = engine.apply(&c.command);
        }
        if engine.stop_requested() {
            break;
        }
        engine.step()?;
        finished.extend(engine.take_finished());
    }
    // Commands scheduled exactly at the end (e.g. a final record_stop).
    let end = engine.cycle();
    for c in commands.filter(|c| c.cycle <= end) {
        let _ = engine.apply(&c.command);
    }
    let report = engine.shutdown();
    finished.extend(engine.take_finished());
    Ok((report, finished))
}

/// Writes a [`StateMessage`] as one JSON line.
pub fn write_state<W: Write>(out: &mut W, state: &StateMessage) -> io::Result<()> {
    serde_json::to_writer(&mut *out, state)?;
    out.write_all(b"\n")
}
