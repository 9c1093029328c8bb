use std::net::SocketAddr;
use std::time::{Duration, Instant};

use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use dexmouse_core::logger;
use dexmouse_core::session::{Clock, InputScript, SessionConfig};
use dexmouse_server::Service;

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

const GOLDEN: &str = include_str!("../../core/fixtures/episodes/golden.ndjson");

fn any_port() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

async fn start(dir: &tempfile::TempDir) -> Service {
    let config =
        SessionConfig { clock: Clock::Wall, log_dir: Some(dir.path().to_path_buf()), session_id: "svc".into(), ..SessionConfig::default() };
    Service::start(any_port(), Some(config), InputScript::default()).await.unwrap()
}

async fn connect(svc: &Service) -> Ws {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/ws", svc.addr)).await.unwrap();
    ws
}

async fn recv(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.expect("message in time").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

/// Next message that is not a state broadcast.
async fn reply(ws: &mut Ws) -> Value {
    loop {
        let v = recv(ws).await;
        if v["type"] != "state" {
            return v;
        }
    }
}

async fn state(ws: &mut Ws) -> Value {
    loop {
        let v = recv(ws).await;
        if v["type"] == "state" {
            return v;
        }
    }
}

async fn send(ws: &mut Ws, v: Value) -> Value {
    ws.send(Message::Text(v.to_string().into())).await.unwrap();
    reply(ws).await
}

#[tokio::test(flavor = "multi_thread")]
async fn single_controller_and_read_only_viewers() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&dir).await;
    let mut a = connect(&svc).await;
    let mut b = connect(&svc).await;
    assert_eq!(reply(&mut a).await, json!({"type": "role", "role": "viewer"}));
    assert_eq!(reply(&mut b).await, json!({"type": "role", "role": "viewer"}));

    assert_eq!(send(&mut a, json!({"type": "claim_control"})).await, json!({"type": "role", "role": "controller"}));
    assert_eq!(send(&mut b, json!({"type": "claim_control"})).await, json!({"type": "error", "message": "controller busy"}));
    let denied = send(&mut b, json!({"type": "set_input", "channel": 0, "normalized": 0.5})).await;
    assert_eq!(denied["type"], "error");
    assert!(denied["message"].as_str().unwrap().contains("read-only"));

    // Controller leaves; control is free again.
    a.close(None).await.unwrap();
    drop(a);
    let mut claimed = Value::Null;
    for _ in 0..50 {
        claimed = send(&mut b, json!({"type": "claim_control"})).await;
        if claimed["type"] == "role" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert_eq!(claimed, json!({"type": "role", "role": "controller"}));
    svc.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn malformed_and_out_of_range_commands_get_error_replies() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&dir).await;
    let mut ws = connect(&svc).await;
    reply(&mut ws).await;
    send(&mut ws, json!({"type": "claim_control"})).await;

    ws.send(Message::Text("{not json".into())).await.unwrap();
    let r = reply(&mut ws).await;
    assert_eq!(r["type"], "error");
    assert!(r["message"].as_str().unwrap().starts_with("malformed command"));
    for bad in [
        json!({"type": "set_input", "channel": 9, "normalized": 0.5}),
        json!({"type": "set_input", "channel": 0, "normalized": 1.5}),
        json!({"type": "set_input", "channel": 0, "ticks": 9000}),
        json!({"type": "set_block", "channel": 5, "value": 0.3}),
        json!({"type": "launch"}),
        json!({"type": "record_stop", "success": true}),
    ] {
        assert_eq!(send(&mut ws, bad.clone()).await["type"], "error", "{bad}");
    }
    // The loop keeps running.
    let c1 = state(&mut ws).await["cycle"].as_u64().unwrap();
    let c2 = state(&mut ws).await["cycle"].as_u64().unwrap();
    assert!(c2 > c1);
    svc.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn slider_input_shows_up_in_state() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&dir).await;
    let mut ws = connect(&svc).await;
    reply(&mut ws).await;
    send(&mut ws, json!({"type": "claim_control"})).await;
    let before = state(&mut ws).await["q_operator"][0].as_i64().unwrap();
    let sent = Instant::now();
    assert_eq!(send(&mut ws, json!({"type": "set_input", "channel": 0, "normalized": 0.8})).await["type"], "ack");
    // Flexion lowers the tick count on this channel.
    let mut seen = Vec::new();
    while seen.len() < 10 {
        seen.push(state(&mut ws).await["q_operator"][0].as_i64().unwrap());
    }
    assert!(seen[0] < before, "no response within one broadcast: {before} -> {seen:?}");
    assert!(sent.elapsed() < Duration::from_secs(2));
    assert!(seen.windows(2).all(|w| w[1] <= w[0]), "{seen:?}");
    assert!((seen[9] - 1400).abs() <= 5, "{seen:?}");
    svc.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn recording_produces_listed_valid_episode() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&dir).await;
    let mut ws = connect(&svc).await;
    reply(&mut ws).await;
    send(&mut ws, json!({"type": "claim_control"})).await;
    assert_eq!(send(&mut ws, json!({"type": "record_start", "task": "pick", "operator": "op-b"})).await["type"], "ack");
    let params = send(&mut ws, json!({"type": "set_params", "params": {"epsilon": 150}})).await;
    assert_eq!(params["type"], "error");
    send(&mut ws, json!({"type": "set_input", "channel": 1, "normalized": 0.9})).await;
    for _ in 0..6 {
        state(&mut ws).await;
    }
    assert_eq!(state(&mut ws).await["recording"], true);
    assert_eq!(send(&mut ws, json!({"type": "record_stop", "success": true})).await["type"], "ack");
    let ep = reply(&mut ws).await;
    assert_eq!(ep["type"], "episode");
    let path = ep["path"].as_str().unwrap().to_string();

    let base = format!("http://{}", svc.addr);
    let list: Value = reqwest_get(&format!("{base}/api/episodes")).await;
    assert_eq!(list[0]["name"], "svc-ep001.ndjson");
    let report = logger::validate(std::path::Path::new(&path)).unwrap();
    assert!(report.is_clean(), "{:?}", report.violations);
    let ep = logger::Episode::load(std::path::Path::new(&path)).unwrap();
    assert_eq!(ep.header.operator, "op-b");
    assert!(logger::replay(&ep, None).unwrap().is_identical());
    assert!(logger::stats(&ep).success);

    // Parameters may change again once recording has stopped.
    assert_eq!(send(&mut ws, json!({"type": "set_params", "params": {"epsilon": 150}})).await["type"], "ack");
    let report = svc.shutdown().await.unwrap().unwrap();
    assert_eq!(report.episodes.len(), 1);
    assert!(report.jitter.is_some());
}

#[tokio::test(flavor = "multi_thread")]
async fn stop_command_ends_loop_and_notifies() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&dir).await;
    let mut ws = connect(&svc).await;
    reply(&mut ws).await;
    send(&mut ws, json!({"type": "claim_control"})).await;
    assert_eq!(send(&mut ws, json!({"type": "stop"})).await["type"], "ack");
    let stopped = reply(&mut ws).await;
    assert_eq!(stopped["type"], "stopped");
    assert!(stopped["report"]["cycles"].as_u64().unwrap() > 0);
    tokio::time::timeout(Duration::from_secs(2), svc.loop_finished()).await.unwrap();
    let after = send(&mut ws, json!({"type": "set_input", "channel": 0, "normalized": 0.1})).await;
    assert_eq!(after, json!({"type": "error", "message": "session has stopped"}));
    svc.shutdown().await.unwrap();
}

/// 20 Hz broadcast held to within 10 % over a 10 s window.
#[tokio::test(flavor = "multi_thread")]
async fn state_cadence_in_wall_clock_mode() {
    let dir = tempfile::tempdir().unwrap();
    let svc = start(&dir).await;
    let mut ws = connect(&svc).await;
    reply(&mut ws).await;
    state(&mut ws).await;
    let start = Instant::now();
    let mut count = 0u32;
    let mut cycles = Vec::new();
    while start.elapsed() < Duration::from_secs(10) {
        cycles.push(state(&mut ws).await["cycle"].as_u64().unwrap());
        count += 1;
    }
    let rate = f64::from(count) / start.elapsed().as_secs_f64();
    assert!((18.0..=22.0).contains(&rate), "{rate} Hz");
    // Every fifth cycle, none skipped.
    assert!(cycles.windows(2).all(|w| w[1] - w[0] == 5), "gap in broadcast cycles");
    let report = svc.shutdown().await.unwrap().unwrap();
    let jitter = report.jitter.unwrap();
    assert!(jitter.mean_abs_us < 5_000.0, "{jitter:?}");
}

/// A subscriber that stops reading loses state messages; the loop keeps
/// its pace regardless.
#[tokio::test(flavor = "multi_thread")]
async fn stalled_subscriber_loses_states_not_the_loop() {
    let config = SessionConfig { clock: Clock::Wall, ..SessionConfig::default() };
    let (link, handle) = dexmouse_server::spawn(config, InputScript::default()).unwrap();
    let mut rx = link.states.subscribe();
    let start = Instant::now();
    tokio::time::sleep(Duration::from_millis(2500)).await;
    let lost = match rx.recv().await {
        Err(tokio::sync::broadcast::error::RecvError::Lagged(n)) => n,
        other => panic!("expected lag, got {other:?}"),
    };
    assert!(lost >= 10, "{lost}");
    let cycle = link.latest.borrow().as_ref().unwrap().cycle;
    let expected = start.elapsed().as_millis() as u64 / 10;
    assert!(cycle + 20 >= expected, "loop at cycle {cycle}, wall clock says {expected}");
    link.send(dexmouse_core::session::CommandMessage::Stop).await.unwrap();
    let report = tokio::task::spawn_blocking(move || handle.join().unwrap()).await.unwrap().unwrap();
    assert!(report.cycles >= 250);
}

async fn reqwest_get(url: &str) -> Value {
    // Minimal HTTP/1.1 GET over a raw socket keeps the test dependency-light.
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let rest = url.strip_prefix("http://").unwrap();
    let (host, path) = rest.split_once('/').unwrap();
    let mut s = TcpStream::connect(host).await.unwrap();
    s.write_all(format!("GET /{path} HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\n\r\n").as_bytes()).await.unwrap();
    let mut buf = Vec::new();
    s.read_to_end(&mut buf).await.unwrap();
    let text = String::from_utf8(buf).unwrap();
    let (_, body) = text.split_once("\r\n\r\n").unwrap();
    serde_json::from_str(body).unwrap()
}

async fn http_post(addr: SocketAddr, path: &str, body: &Value) -> (u16, Value) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let payload = body.to_string();
    let mut s = TcpStream::connect(addr).await.unwrap();
    let req = format!(
        "POST {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    s.write_all(req.as_bytes()).await.unwrap();
    let mut buf = Vec::new();
    s.read_to_end(&mut buf).await.unwrap();
    let text = String::from_utf8(buf).unwrap();
    let status: u16 = text[9..12].parse().unwrap();
    let (_, body) = text.split_once("\r\n\r\n").unwrap();
    (status, serde_json::from_str(body).unwrap_or(Value::Null))
}

#[tokio::test]
async fn http_tools_without_a_session() {
    let svc = Service::start(any_port(), None, InputScript::default()).await.unwrap();
    let base = format!("http://{}", svc.addr);
    let health = reqwest_get(&format!("{base}/api/health")).await;
    assert_eq!(health["status"], "ok");
    assert_eq!(health["session"], false);
    assert_eq!(reqwest_get(&format!("{base}/api/profiles")).await, json!(["bluerobin-8dof", "igrisc-11dof", "adroit-30dof"]));

    let (status, decoded) = http_post(svc.addr, "/api/wire/decode", &json!({"hex": "FF FF FD 00 01 03 00 01 19 4E FF FF"})).await;
    assert_eq!(status, 200);
    assert_eq!(decoded["frames"][0]["instruction"], "ping");
    assert_eq!(decoded["residue"], 2);
    let (status, bad) = http_post(svc.addr, "/api/wire/decode", &json!({"hex": "zz"})).await;
    assert_eq!(status, 422);
    assert!(bad["error"].as_str().unwrap().contains("hex"));

    let (_, enc) =
        http_post(svc.addr, "/api/wire/encode", &json!({"frame": {"id": 1, "instruction": "read", "params": [132, 0, 4, 0]}})).await;
    assert_eq!(enc["hex"], "FF FF FD 00 01 07 00 02 84 00 04 00 1D 15");

    let (_, rt) =
        http_post(svc.addr, "/api/retarget", &json!({"profile": "igrisc-11dof", "rows": [[2000, 3000, 3000, 3000, 2800, 1024]]})).await;
    assert_eq!(rt["joint_names"][0], "index_flex");
    assert_eq!(rt["rows"][0][0], 0.785);

    let ep = json!({"episode": GOLDEN});
    let (_, v) = http_post(svc.addr, "/api/episodes/validate", &ep).await;
    assert_eq!(v["violations"], json!([]));
    let (_, s) = http_post(svc.addr, "/api/episodes/stats", &ep).await;
    assert_eq!(s["success"], true);
    let (_, r) = http_post(svc.addr, "/api/episodes/replay", &ep).await;
    assert_eq!(r["divergences"], 0);
    let (_, r) = http_post(svc.addr, "/api/episodes/replay", &json!({"episode": GOLDEN, "overrides": {"k_nominal": 2.0}})).await;
    assert!(r["divergences"].as_u64().unwrap() > 0);
    let (_, a) = http_post(svc.addr, "/api/episodes/align", &json!({"episode": GOLDEN, "align": {"rate_hz": 50}})).await;
    assert!(a["csv"].as_str().unwrap().starts_with("t_ns,q0,"));

    let (status, _) = http_post(svc.addr, "/api/episodes/stats", &json!({"episode": "garbage"})).await;
    assert_eq!(status, 422);
    let (status, _) = http_post(svc.addr, "/api/episodes/stats", &json!({"nope": 1})).await;
    assert_eq!(status, 422);
    svc.shutdown().await.unwrap();
}
