use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/episodes/golden.ndjson");

fn dexmouse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dexmouse"))
        .args(args)
        .env_remove("DEXMOUSE_SERVER")
        .env_remove("DEXMOUSE_LOG_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Press finger 0 into a block for `cycles`, recording throughout.
fn squeeze_script(dir: &Path, cycles: u64) -> PathBuf {
    let script = serde_json::json!({
        "cycles": cycles,
        "commands": [
            {"cycle": 0, "command": {"type": "record_start", "task": "squeeze"}},
            {"cycle": 0, "command": {"type": "set_block", "channel": 0, "value": 0.3}},
            {"cycle": 0, "command": {"type": "set_input", "channel": 0, "normalized": 1.0}},
            {"cycle": cycles, "command": {"type": "record_stop", "success": true}}
        ]
    });
    let path = dir.join("script.json");
    std::fs::write(&path, script.to_string()).unwrap();
    path
}

fn sim_episode(dir: &Path) -> PathBuf {
    let script = squeeze_script(dir, 300);
    let o = dexmouse(&[
        "run",
        "--sim-clock",
        "--scenario",
        "pick_place",
        "--script",
        script.to_str().unwrap(),
        "--log-dir",
        dir.to_str().unwrap(),
        "--session-id",
        "t",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["cycles"], 300);
    assert_eq!(report["storage_errors"].as_array().unwrap().len(), 0);
    dir.join("t-ep001.ndjson")
}

#[test]
fn wire_dump_hex_and_file() {
    let o = dexmouse(&["wire", "dump", "FF FF FD 00 01 03 00 01 19 4E"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("frame id=0x01 instr=Ping"));

    let dir = tempfile::tempdir().unwrap();
    let capture = dir.path().join("cap.bin");
    std::fs::write(&capture, [0x00, 0xFF, 0xFF, 0xFD, 0x00, 0x01, 0x03, 0x00, 0x01, 0x19, 0x4F]).unwrap();
    let o = dexmouse(&["wire", "dump", "--json", capture.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["frames"].as_array().unwrap().len(), 0);
    assert!(!v["diagnostics"].as_array().unwrap().is_empty());
}

#[test]
fn validate_sets_exit_status() {
    let o = dexmouse(&["validate", GOLDEN]);
    assert!(o.status.success());
    assert!(stdout(&o).ends_with("0 violation(s)\n"));

    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.ndjson");
    let mut text = std::fs::read_to_string(GOLDEN).unwrap();
    text.push_str("{\"t\":1,\"stream\":\"joints\"}\n");
    std::fs::write(&broken, text).unwrap();
    let o = dexmouse(&["validate", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("line 74:"));
}

#[test]
fn simulated_run_then_episode_tools() {
    let dir = tempfile::tempdir().unwrap();
    let ep = sim_episode(dir.path());
    let ep = ep.to_str().unwrap();

    assert!(dexmouse(&["validate", ep]).status.success());

    let o = dexmouse(&["stats", "--csv", ep, GOLDEN]);
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("file,duration_s,success"));
    assert!(lines[1].contains(",true,"));

    let o = dexmouse(&["replay", "--check", ep]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains(", 0 divergence(s)"));
    // No force survives a dead zone wider than the finger's travel.
    let o = dexmouse(&["replay", "--check", "--epsilon", "4000", ep]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("first: torque at"));

    let csv = dir.path().join("aligned.csv");
    let o = dexmouse(&["align", "--rate", "30", "-o", csv.to_str().unwrap(), ep]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("t_ns,q0,"));
    assert!(text.lines().count() > 80);
}

#[test]
fn retarget_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rows.csv");
    std::fs::write(&input, "fe0,fe1,fe2,fe3,fe4,aa\n3000,3000,3000,3000,2800,1024\n1000,1000,1000,1000,1000,1024\n").unwrap();
    let o = dexmouse(&["retarget", "--profile", "igrisc-11dof", input.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    // Passive joints follow mechanically and get no target.
    assert_eq!(lines[0], "index_flex,middle_flex,ring_flex,little_flex,thumb_flex,thumb_rot");
    assert!(lines[1].starts_with("0,"));

    let o = dexmouse(&["retarget", "--profile", "no-such-hand", input.to_str().unwrap()]);
    assert!(!o.status.success());
}

/// Starts `dexmouse serve` on an ephemeral port and returns it with its URL.
fn serve() -> (std::process::Child, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_dexmouse"))
        .args(["serve", "--port", "0"])
        .env("RUST_LOG", "warn")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    (child, url)
}

#[test]
fn tools_delegate_to_server() {
    let (mut child, url) = serve();
    let local = dexmouse(&["replay", "--json", GOLDEN]);
    let remote = dexmouse(&["--server", &url, "replay", "--json", GOLDEN]);
    let wire = dexmouse(&["--server", &url, "wire", "dump", "FF FF FD 00 01 03 00 01 19 4E"]);
    let bad = dexmouse(&["--server", &url, "stats", "Cargo.toml"]);
    child.kill().unwrap();
    child.wait().unwrap();

    assert!(remote.status.success(), "{}", String::from_utf8_lossy(&remote.stderr));
    assert_eq!(stdout(&local), stdout(&remote));
    assert!(stdout(&wire).contains("instr=Ping"));
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("service returned 422"));

    let o = dexmouse(&["--server", "http://127.0.0.1:9", "validate", GOLDEN]);
    assert!(!o.status.success());
}

#[test]
fn wall_clock_run_serves_until_cycle_limit() {
    let dir = tempfile::tempdir().unwrap();
    let o = dexmouse(&["run", "--port", "0", "--cycles", "50", "--log-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["cycles"], 50);
    assert!(report["jitter"].is_object());
    assert!(String::from_utf8_lossy(&o.stderr).contains("listening on http://127.0.0.1:"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let o = dexmouse(&["run", "--sim-clock", "--profile", "nope", "--cycles", "5"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
    let o = dexmouse(&["run", "--sim-clock"]);
    assert!(!o.status.success());
    let o = dexmouse(&["--server", "http://x", "run"]);
    assert!(!o.status.success());
}

#[test]
fn documented_examples_run() {
    let docs = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/examples");
    let dir = tempfile::tempdir().unwrap();
    let o = dexmouse(&[
        "run",
        "--sim-clock",
        "--config",
        &format!("{docs}/session.json"),
        "--script",
        &format!("{docs}/squeeze.script.json"),
        "--log-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ep = dir.path().join("bench-ep001.ndjson");
    let header: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&ep).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["profile"]["name"], "igrisc-11dof");
    assert_eq!(header["ff_params"]["epsilon"], 80);
    assert!(dexmouse(&["validate", ep.to_str().unwrap()]).status.success());

    let o = dexmouse(&["retarget", "--profile", "igrisc-11dof", &format!("{docs}/readings.csv")]);
    assert_eq!(stdout(&o).lines().nth(3), Some("1.57,1.57,1.57,1.57,1.2,1.75"));
}
