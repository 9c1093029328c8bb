//! Hosts an [`Engine`] on its own OS thread. The loop talks to the rest of
//! the process only through bounded channels: commands in, serialized state
//! and server messages out.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tokio::sync::{broadcast, mpsc, oneshot, watch};

use dexmouse_core::api::ServerMessage;
use dexmouse_core::session::{
    Clock, CommandError, CommandMessage, Engine, ExitReport, InputScript, JitterStats, SessionConfig, SessionError, StateMessage,
};

const COMMAND_QUEUE: usize = 64;
const STATE_QUEUE: usize = 32;
const EVENT_QUEUE: usize = 64;

pub struct Envelope {
    pub command: CommandMessage,
    pub reply: oneshot::Sender<Result<(), CommandError>>,
}

/// API-side handle to a running loop.
#[derive(Clone)]
pub struct SessionLink {
    pub commands: mpsc::Sender<Envelope>,
    /// Serialized [`StateMessage`]s at the broadcast rate. Slow receivers
    /// lose messages instead of holding up the loop.
    pub states: broadcast::Sender<Arc<str>>,
    pub events: broadcast::Sender<ServerMessage>,
    pub latest: watch::Receiver<Option<StateMessage>>,
    pub finished: watch::Receiver<Option<ExitReport>>,
    /// State messages lost by lagging receivers.
    pub dropped_states: Arc<AtomicU64>,
}

impl SessionLink {
    /// Sends a command and waits for the loop to apply it.
    pub async fn send(&self, command: CommandMessage) -> Result<(), CommandError> {
        let (reply, rx) = oneshot::channel();
        let gone = || CommandError { message: "session has stopped".into() };
        self.commands.send(Envelope { command, reply }).await.map_err(|_| gone())?;
        rx.await.map_err(|_| gone())?
    }

    pub fn is_running(&self) -> bool {
        self.finished.borrow().is_none()
    }
}

/// Builds the engine on the calling thread, so configuration errors
/// surface before anything starts, then runs it on a dedicated thread.
pub fn spawn(
    config: SessionConfig,
    script: InputScript,
) -> Result<(SessionLink, JoinHandle<Result<ExitReport, SessionError>>), SessionError> {
    let paced = config.clock == Clock::Wall;
    let limit = script.cycles.or(config.max_cycles);
    let engine = Engine::new(config)?;
    let (cmd_tx, cmd_rx) = mpsc::channel(COMMAND_QUEUE);
    let (states, _) = broadcast::channel(STATE_QUEUE);
    let (events, _) = broadcast::channel(EVENT_QUEUE);
    let (latest_tx, latest) = watch::channel(None);
    let (finished_tx, finished) = watch::channel(None);
    let dropped_states = Arc::new(AtomicU64::new(0));
    let link = SessionLink {
        commands: cmd_tx,
        states: states.clone(),
        events: events.clone(),
        latest,
        finished,
        dropped_states: dropped_states.clone(),
    };
    let loop_ctx = LoopContext { engine, script, limit, paced, cmd_rx, states, events, latest_tx, dropped_states };
    let handle = thread::Builder::new()
        .name("control-loop".into())
        .spawn(move || {
            let res = loop_ctx.run();
            let _ = finished_tx.send(Some(res.as_ref().map(|r| r.clone()).unwrap_or_default()));
            res
        })
        .map_err(|e| SessionError::Config(format!("spawning loop thread: {e}")))?;
    Ok((link, handle))
}

struct LoopContext {
    engine: Engine,
    script: InputScript,
    limit: Option<u64>,
    paced: bool,
    cmd_rx: mpsc::Receiver<Envelope>,
    states: broadcast::Sender<Arc<str>>,
    events: broadcast::Sender<ServerMessage>,
    latest_tx: watch::Sender<Option<StateMessage>>,
    dropped_states: Arc<AtomicU64>,
}

#[derive(Default)]
struct Jitter {
    sum_us: f64,
    max_us: f64,
    samples: u64,
    overruns: u64,
}

impl LoopContext {
    fn run(mut self) -> Result<ExitReport, SessionError> {
        let period = Duration::from_nanos(1_000_000_000 / u64::from(self.engine.params().loop_hz));
        let start = Instant::now();
        let mut jitter = Jitter::default();
        let script = std::mem::take(&mut self.script.commands);
        let mut scripted = script.iter().peekable();

        while self.limit.is_none_or(|n| self.engine.cycle() < n) {
            while let Ok(env) = self.cmd_rx.try_recv() {
                let _ = env.reply.send(self.engine.apply(&env.command));
            }
            while let Some(c) = scripted.next_if(|c| c.cycle <= self.engine.cycle()) {
                if let Err(e) = self.engine.apply(&c.command) {
                    tracing::warn!(cycle = c.cycle, "scripted {} rejected: {e}", c.command.name());
                }
            }
            if self.engine.stop_requested() {
                break;
            }
            let state = self.engine.step()?;
            for ep in self.engine.take_finished() {
                let path = ep.path.map(|p| p.display().to_string());
                let _ = self.events.send(ServerMessage::Episode { path, records: ep.records });
            }
            if let Some(s) = state {
                if let Ok(text) = serde_json::to_string(&s) {
                    let _ = self.states.send(Arc::from(text));
                }
                self.latest_tx.send_replace(Some(s));
            }
            if self.paced {
                let deadline = start + period * (self.engine.cycle() as u32);
                let now = Instant::now();
                if now > deadline {
                    jitter.overruns += 1;
                } else {
                    thread::sleep(deadline - now);
                }
                let late = Instant::now().saturating_duration_since(deadline).as_secs_f64() * 1e6;
                jitter.sum_us += late;
                jitter.max_us = jitter.max_us.max(late);
                jitter.samples += 1;
            }
        }
        let end = self.engine.cycle();
        for c in scripted.filter(|c| c.cycle <= end) {
            let _ = self.engine.apply(&c.command);
        }
        let mut report = self.engine.shutdown();
        for ep in self.engine.take_finished() {
            let path = ep.path.map(|p| p.display().to_string());
            let _ = self.events.send(ServerMessage::Episode { path, records: ep.records });
        }
        if self.paced && jitter.samples > 0 {
            report.jitter = Some(JitterStats {
                mean_abs_us: jitter.sum_us / jitter.samples as f64,
                max_abs_us: jitter.max_us,
                overruns: jitter.overruns,
            });
        }
        report.dropped_states = self.dropped_states.load(Ordering::Relaxed);
        // Anyone still waiting on a command learns the loop is gone.
        self.cmd_rx.close();
        while let Ok(env) = self.cmd_rx.try_recv() {
            let _ = env.reply.send(Err(CommandError { message: "session has stopped".into() }));
        }
        let _ = self.events.send(ServerMessage::Stopped { report: report.clone() });
        Ok(report)
    }
}
