mod common;

use std::io::{self, Write};

use dexmouse_core::firmware::{ForceFeedbackParams, ParamOverrides};
use dexmouse_core::logger::{self, Episode, Event, Payload};
use dexmouse_core::session::{run_session, CommandMessage, Engine, InputScript, Mode, SessionConfig};
use dexmouse_core::streams::StreamKind;
use dexmouse_core::units::{Ticks, Timestamp};

use common::{at, record_start, set_ticks};

fn memory_config() -> SessionConfig {
    SessionConfig { session_id: "t".into(), ..SessionConfig::default() }
}

fn episode_text(bytes: &[u8]) -> Episode {
    Episode::parse(std::str::from_utf8(bytes).unwrap()).unwrap()
}

#[test]
fn one_joints_record_per_cycle() {
    let script = InputScript {
        cycles: Some(1000),
        commands: vec![at(0, record_start("count")), at(1000, CommandMessage::RecordStop { success: true })],
    };
    let (report, eps) = run_session(memory_config(), &script).unwrap();
    assert_eq!(report.cycles, 1000);
    let ep = episode_text(eps[0].bytes.as_ref().unwrap());
    let s = logger::stats(&ep);
    assert_eq!(s.records[&StreamKind::Joints], 1000);
    assert_eq!(s.records[&StreamKind::Torque], 1000);
    // 20 Hz pose over 10 s, grid points 0..=9.95 s.
    assert_eq!(s.records[&StreamKind::Pose], 200);
    assert_eq!(s.records[&StreamKind::Camera], 300);
    assert!(s.success);
    assert_eq!(s.completion_time_s, Some(9.99));
    assert!(!s.end_event_missing);
}

#[test]
fn same_script_same_bytes() {
    let script = common::demo_script(1500);
    let run = || {
        let (_, eps) = run_session(memory_config(), &script).unwrap();
        let bytes = eps[0].bytes.clone().unwrap();
        let nl = bytes.iter().position(|b| *b == b'\n').unwrap();
        (bytes[..nl].to_vec(), bytes[nl..].to_vec())
    };
    let (h1, b1) = run();
    let (h2, b2) = run();
    assert_eq!(b1, b2);
    let strip = |h: &[u8]| {
        let mut v: serde_json::Value = serde_json::from_slice(h).unwrap();
        v.as_object_mut().unwrap().remove("start_wall_clock_ms");
        v
    };
    assert_eq!(strip(&h1), strip(&h2));
}

#[test]
fn different_pose_seed_changes_only_pose() {
    let script = common::demo_script(400);
    let run = |seed| {
        let (_, eps) = run_session(SessionConfig { seed, ..memory_config() }, &script).unwrap();
        episode_text(eps[0].bytes.as_ref().unwrap())
    };
    let a = run(1).streams();
    let b = run(2).streams();
    assert_eq!(a.torque, b.torque);
    assert_eq!(a.joints, b.joints);
    assert_ne!(a.pose, b.pose);
}

/// Open scenario, no lag, index finger closing 10 ticks per cycle into a
/// wall at half flexion (tick 2000). The finger reaches the wall at cycle
/// 100 and penetration exceeds the 100-tick dead zone from cycle 111.
fn ramp_into_wall() -> (Episode, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("open.json");
    std::fs::write(&scenario, r#"{"name": "open"}"#).unwrap();
    let mut commands = vec![at(0, record_start("ramp")), at(0, CommandMessage::SetBlock { channel: 0, value: Some(0.5) })];
    commands.extend((0..=200).map(|k| at(k, set_ticks(0, 3000 - 10 * k as i64))));
    commands.push(at(300, CommandMessage::RecordStop { success: true }));
    let config = SessionConfig {
        scenario: scenario.to_string_lossy().into_owned(),
        input_lag_ms: 0.0,
        log_dir: Some(dir.path().to_path_buf()),
        ..memory_config()
    };
    let (_, eps) = run_session(config, &InputScript { cycles: Some(300), commands }).unwrap();
    (Episode::load(eps[0].path.as_ref().unwrap()).unwrap(), dir)
}

#[test]
fn penetration_starts_where_constructed() {
    let (ep, _dir) = ramp_into_wall();
    let first_force = ep
        .records
        .iter()
        .find_map(|r| match &r.payload {
            Payload::Torque(tau) if tau[0] > 0.0 => Some((r.t, tau[0])),
            _ => None,
        })
        .unwrap();
    // Depth 110 ticks at contact gain 5.
    assert_eq!(first_force, (Timestamp::from_cycle(111), 550.0));
}

#[test]
fn perturbed_dead_zone_diverges_at_first_penetration() {
    let (ep, _dir) = ramp_into_wall();
    assert!(logger::replay(&ep, None).unwrap().is_identical());
    let wide = ForceFeedbackParams { epsilon: Ticks(1000), ..ForceFeedbackParams::default() };
    let r = logger::replay(&ep, Some(&wide)).unwrap();
    let first = r.first.unwrap();
    assert_eq!(first.stream, StreamKind::Torque);
    assert_eq!(first.t, Timestamp::from_cycle(111));
    // Robot targets and contact do not depend on the dead zone.
    assert_eq!(r.divergences, 300 - 111);
}

#[test]
fn replay_mode_reproduces_recorded_session() {
    let dir = tempfile::tempdir().unwrap();
    let script = common::demo_script(800);
    let config = SessionConfig { log_dir: Some(dir.path().to_path_buf()), scenario: "hammering".into(), ..memory_config() };
    let (_, eps) = run_session(config, &script).unwrap();
    let source = eps[0].path.clone().unwrap();

    let replay_script = InputScript { cycles: None, commands: vec![at(0, record_start("again"))] };
    let config = SessionConfig { mode: Mode::Replay, replay_source: Some(source.clone()), ..memory_config() };
    let (report, again) = run_session(config, &replay_script).unwrap();
    assert_eq!(report.cycles, 800);

    let a = Episode::load(&source).unwrap().streams();
    let b = episode_text(again[0].bytes.as_ref().unwrap()).streams();
    assert_eq!(a.joints, b.joints);
    assert_eq!(a.torque, b.torque);
    assert_eq!(a.contact, b.contact);
    assert_eq!(a.robot_targets, b.robot_targets);
}

struct FailAfter {
    budget: usize,
}

impl Write for FailAfter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.len() > self.budget {
            return Err(io::Error::other("disk full"));
        }
        self.budget -= buf.len();
        Ok(buf.len())
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[test]
fn storage_failure_stops_recording_not_loop() {
    let mut engine = Engine::new(memory_config()).unwrap();
    engine.start_recording_to(Box::new(FailAfter { budget: 40_000 }), "t", "").unwrap();
    for _ in 0..500 {
        engine.step().unwrap();
    }
    assert_eq!(engine.cycle(), 500);
    assert_eq!(engine.loop_state().device.cycle_count, 500);
    assert!(!engine.is_recording());
    let report = engine.shutdown();
    assert_eq!(report.storage_errors.len(), 1);
    assert!(report.storage_errors[0].contains("disk full"));
    // A new recording can start afterwards.
    assert!(engine.apply(&record_start("retry")).is_ok());
}

#[test]
fn block_changes_are_logged_before_their_cycle() {
    let script = InputScript {
        cycles: Some(1600),
        commands: vec![at(1000, record_start("late")), at(1600, CommandMessage::RecordStop { success: false })],
    };
    let (_, eps) = run_session(memory_config(), &script).unwrap();
    let ep = episode_text(eps[0].bytes.as_ref().unwrap());
    // pick_place releases every finger at cycle 1500.
    let releases: Vec<_> = ep.records.iter().filter(|r| matches!(r.payload, Payload::Event(Event::Block { value: None, .. }))).collect();
    assert_eq!(releases.len(), 5);
    assert!(releases.iter().all(|r| r.t == Timestamp::from_cycle(1500)));
    assert_eq!(ep.header.initial_state.device.cycle_count, 1000);
    assert!(logger::replay(&ep, None).unwrap().is_identical());
    let s = logger::stats(&ep);
    assert!(!s.success);
    assert_eq!(s.completion_time_s, None);
}

#[test]
fn shutdown_while_recording_leaves_valid_file_without_stop_event() {
    let dir = tempfile::tempdir().unwrap();
    let script = InputScript { cycles: None, commands: vec![at(0, record_start("cut")), at(250, CommandMessage::Stop)] };
    let config = SessionConfig { log_dir: Some(dir.path().to_path_buf()), ..memory_config() };
    let (report, _) = run_session(config, &script).unwrap();
    assert_eq!(report.cycles, 250);
    let path = &report.episodes[0];
    assert!(logger::validate(path).unwrap().is_clean());
    let s = logger::stats(&Episode::load(path).unwrap());
    assert!(s.end_event_missing);
    assert_eq!(s.duration_s, 2.49);
}

#[test]
fn params_override_recorded_in_header() {
    let overrides = ParamOverrides { k_nominal: Some(4.0), ..Default::default() };
    let script = InputScript { cycles: Some(10), commands: vec![at(0, record_start("k4"))] };
    let (_, eps) = run_session(SessionConfig { ff_overrides: overrides, ..memory_config() }, &script).unwrap();
    let ep = episode_text(eps[0].bytes.as_ref().unwrap());
    assert_eq!(ep.header.ff_params.k_nominal, 4.0);
}

#[test]
fn env_log_dir_used_when_unset() {
    let dir = tempfile::tempdir().unwrap();
    // Only this test touches the variable.
    std::env::set_var(dexmouse_core::session::ENV_LOG_DIR, dir.path());
    let cfg = memory_config().with_env_log_dir();
    std::env::remove_var(dexmouse_core::session::ENV_LOG_DIR);
    assert_eq!(cfg.log_dir.as_deref(), Some(dir.path()));
}
