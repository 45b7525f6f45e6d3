use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::{Duration, Instant};

use edubal::fixtures;
use edubal::service::{
    Control, Outbound, Server, ServerConfig, ServerHandle, SessionCommand, SessionHandle,
    SessionSpec,
};
use edubal::simulation::{run_experiment, ImuNoise, SimConfig};
use serde_json::{json, Value};

fn start(cfg: ServerConfig) -> ServerHandle {
    Server::bind(ServerConfig { port: 0, ..cfg })
        .unwrap()
        .spawn()
        .unwrap()
}

fn start_default() -> ServerHandle {
    start(ServerConfig::default())
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    seq: u64,
}

impl Client {
    fn connect(server: &ServerHandle) -> Client {
        let s = TcpStream::connect(server.addr()).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        Client {
            reader: BufReader::new(s.try_clone().unwrap()),
            writer: s,
            seq: 0,
        }
    }

    /// Sends `msg` with a fresh `seq` and returns that seq.
    fn send(&mut self, mut msg: Value) -> u64 {
        self.seq += 1;
        msg["seq"] = json!(self.seq);
        msg["ts"] = json!(0.0);
        let mut line = msg.to_string();
        line.push('\n');
        self.writer.write_all(line.as_bytes()).unwrap();
        self.seq
    }

    fn raw(&mut self, text: &str) {
        self.writer.write_all(text.as_bytes()).unwrap();
    }

    fn recv(&mut self) -> Value {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).unwrap();
        assert!(n > 0, "connection closed");
        serde_json::from_str(&line).unwrap()
    }

    fn recv_until(&mut self, pred: impl Fn(&Value) -> bool) -> Value {
        loop {
            let v = self.recv();
            if pred(&v) {
                return v;
            }
        }
    }

    fn reply(&mut self, seq: u64) -> Value {
        self.recv_until(|v| v["reply_to"] == json!(seq))
    }

    fn open(&mut self, extra: Value) -> (String, Value) {
        let mut msg = json!({"type": "open"});
        if let Value::Object(m) = extra {
            for (k, v) in m {
                msg[k] = v;
            }
        }
        let seq = self.send(msg);
        let info = self.reply(seq);
        assert_eq!(info["type"], "session_info", "{info}");
        (info["session"].as_str().unwrap().to_string(), info)
    }

    fn command(&mut self, kind: &str, payload: Value) -> Value {
        let seq = self.send(json!({"type": "command", "kind": kind, "payload": payload}));
        self.reply(seq)
    }
}

fn is_telemetry(v: &Value) -> bool {
    v["type"] == "telemetry"
}

fn frame_t(v: &Value) -> f64 {
    v["frame"]["t"].as_f64().unwrap()
}

fn gains_u(k: &[f64], frame: &Value) -> f64 {
    let x = ["phi", "phi_dot", "theta", "theta_dot"].map(|n| frame[n].as_f64().unwrap());
    -k.iter().zip(x).map(|(k, x)| k * x).sum::<f64>()
}

#[test]
fn envelope_fields_and_increasing_seq() {
    let server = start_default();
    let mut c = Client::connect(&server);
    let (_, info) = c.open(json!({"time_scale": 20.0}));
    assert_eq!(info["telemetry_rate"], 50.0);
    assert_eq!(info["control_rate"], 200.0);
    let mut last_seq = info["seq"].as_u64().unwrap();
    for _ in 0..30 {
        let v = c.recv();
        for field in ["type", "seq", "ts"] {
            assert!(v.get(field).is_some(), "missing {field} in {v}");
        }
        let seq = v["seq"].as_u64().unwrap();
        assert!(seq > last_seq);
        last_seq = seq;
        if is_telemetry(&v) {
            assert_eq!(v["ts"], v["frame"]["t"]);
        }
    }
}

#[test]
fn fifty_hz_by_simulation_time() {
    let server = start_default();
    let mut c = Client::connect(&server);
    c.open(json!({"time_scale": 10.0}));
    let mut ts = Vec::new();
    loop {
        let v = c.recv();
        if is_telemetry(&v) {
            let t = frame_t(&v);
            if t >= 2.2 {
                break;
            }
            ts.push(t);
        }
    }
    let in_window = ts.iter().filter(|&&t| (0.0..2.0).contains(&t)).count();
    assert!((99..=101).contains(&in_window), "{in_window} frames in 2 s");
    for w in ts.windows(2) {
        assert!((w[1] - w[0] - 0.02).abs() < 1e-9, "gap {w:?}");
    }
}

#[test]
fn gain_edit_is_acknowledged_and_visible_within_three_control_periods() {
    let server = start_default();
    let mut c = Client::connect(&server);
    c.open(
        json!({"time_scale": 1.0, "telemetry_rate": 200.0, "config": {"initial": {"theta": 0.05}}}),
    );
    c.recv_until(|v| is_telemetry(v) && frame_t(v) > 0.1);
    let k = [-0.2, -2.5, -95.0, -15.5];
    let ack = c.command("set_gains", json!({"gains": k}));
    assert_eq!(ack["type"], "ack", "{ack}");
    let t_ack = ack["ts"].as_f64().unwrap();
    let t_effect = ack["t_effect"].as_f64().unwrap();
    let dt = 5e-3;
    assert!(t_effect - t_ack <= 3.0 * dt + 1e-12);
    let frame = c.recv_until(|v| is_telemetry(v) && frame_t(v) >= t_effect - 1e-12);
    assert!(frame_t(&frame) - t_ack <= 3.0 * dt + 1e-12);
    let u = frame["frame"]["u"].as_f64().unwrap();
    assert!((u - gains_u(&k, &frame["frame"])).abs() < 1e-12);
}

#[test]
fn rejected_command_changes_nothing() {
    let server = start_default();
    let mut c = Client::connect(&server);
    c.open(
        json!({"time_scale": 2.0, "telemetry_rate": 200.0, "config": {"initial": {"theta": 0.05}}}),
    );
    let err = c.command("set_gains", json!({"gains": [1.0, 2.0, 3.0]}));
    assert_eq!(err["type"], "error");
    assert_eq!(err["code"], "rejected");
    let published = fixtures::reference_values().lqr4_gains;
    for _ in 0..5 {
        let f = c.recv_until(is_telemetry);
        let u = f["frame"]["u"].as_f64().unwrap();
        assert!((u - gains_u(&published, &f["frame"])).abs() < 1e-12);
    }
    let err = c.command(
        "set_sim_option",
        json!({"name": "torque_limit", "value": -1.0}),
    );
    assert_eq!(err["code"], "rejected");
    let err = c.command(
        "set_weights_and_resynthesize",
        json!({"q": [1.0, 1.0], "r": 1.0}),
    );
    assert_eq!(err["code"], "rejected");
    let err = c.command("warp", json!({}));
    assert_eq!(err["code"], "unknown_kind");
    let err = c.command("set_gains", json!({"k": [1.0]}));
    assert_eq!(err["code"], "invalid_payload");
}

#[test]
fn resynthesis_returns_the_lqr_gains() {
    let server = start_default();
    let mut c = Client::connect(&server);
    c.open(json!({"time_scale": 0.0}));
    let w = fixtures::lqr4_weights();
    let ack = c.command("set_weights_and_resynthesize", json!({"q": w.q, "r": w.r}));
    assert_eq!(ack["type"], "ack", "{ack}");
    let k: Vec<f64> = serde_json::from_value(ack["result"]["gains"].clone()).unwrap();
    let published = fixtures::reference_values().lqr4_gains;
    for (a, b) in k.iter().zip(&published) {
        assert!(((a - b) / b).abs() < 0.05);
    }
}

#[test]
fn acks_follow_command_order() {
    let server = start_default();
    let mut c = Client::connect(&server);
    c.open(json!({"time_scale": 5.0}));
    let seqs: Vec<u64> = (0..10)
        .map(|i| c.send(json!({"type": "command", "kind": "set_reference", "payload": {"p_ref": i as f64 * 0.01}})))
        .collect();
    let mut acks = Vec::new();
    while acks.len() < seqs.len() {
        let v = c.recv();
        if v["type"] == "ack" {
            acks.push(v["reply_to"].as_u64().unwrap());
        }
    }
    assert_eq!(acks, seqs);
}

#[test]
fn ninth_session_is_rejected() {
    let server = start_default();
    let mut c = Client::connect(&server);
    for _ in 0..8 {
        c.open(json!({"time_scale": 0.0}));
    }
    assert_eq!(server.session_count(), 8);
    let seq = c.send(json!({"type": "open", "time_scale": 0.0}));
    let err = c.reply(seq);
    assert_eq!(err["type"], "error");
    assert_eq!(err["code"], "resource_limit");
    let close = c.send(json!({"type": "close"}));
    assert_eq!(c.reply(close)["type"], "ack");
    c.recv_until(|v| v["type"] == "end");
    let deadline = Instant::now() + Duration::from_secs(5);
    while server.session_count() > 7 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    let (id, _) = c.open(json!({"time_scale": 0.0}));
    assert_eq!(id, "s9");
}

#[test]
fn paused_session_sends_only_heartbeats() {
    let server = start_default();
    let mut c = Client::connect(&server);
    let (_, info) = c.open(json!({"time_scale": 0.0}));
    assert_eq!(info["paused"], true);
    let first = c.recv_until(is_telemetry);
    assert_eq!(frame_t(&first), 0.0);
    let hb = c.recv();
    assert_eq!(hb["type"], "heartbeat", "{hb}");
    assert_eq!(hb["paused"], true);
    assert_eq!(hb["t_sim"], 0.0);
    let err = c.command("resume", json!({}));
    assert_eq!(err["code"], "rejected");
    assert_eq!(
        c.command(
            "set_sim_option",
            json!({"name": "time_scale", "value": 10.0})
        )["type"],
        "ack"
    );
    assert_eq!(c.command("resume", json!({}))["type"], "ack");
    c.recv_until(|v| v["type"] == "event" && v["event"] == "resumed");
    let next = c.recv_until(is_telemetry);
    assert!(frame_t(&next) > 0.0);
}

fn collect_frames(c: &mut Client, until: f64) -> Vec<Value> {
    let mut frames = Vec::new();
    loop {
        let v = c.recv();
        if is_telemetry(&v) {
            if frame_t(&v) > until {
                return frames;
            }
            frames.push(v["frame"].clone());
        }
    }
}

#[test]
fn session_matches_batch_run_and_reset_is_bit_identical() {
    let cfg = SimConfig {
        seed: 42,
        imu_noise: ImuNoise {
            accel_sigma: 0.05,
            gyro_sigma: 0.01,
        },
        estimator: edubal::simulation::Estimator::Complementary { alpha: 0.98 },
        initial: edubal::model::PlantState::new(0.2, 0.0, 0.1, 0.0),
        duration: 1.0,
        ..SimConfig::default()
    };
    let server = start_default();
    let mut c = Client::connect(&server);
    c.open(json!({"time_scale": 20.0, "telemetry_rate": 200.0, "config": cfg}));
    let first = collect_frames(&mut c, 0.5);
    let ack = c.command("reset", json!({}));
    assert_eq!(ack["t_effect"], 0.0);
    c.recv_until(|v| v["type"] == "event" && v["event"] == "reset");
    let second = collect_frames(&mut c, 0.5);
    assert_eq!(first.len(), 101);
    assert_eq!(first, second);

    let batch = run_experiment(&cfg, &fixtures::robot_params()).unwrap();
    for (f, b) in first.iter().zip(&batch) {
        assert_eq!(f, &serde_json::to_value(b).unwrap());
    }
}

#[test]
fn stalled_subscriber_leaves_cadence_unchanged() {
    let server = start_default();
    let mut a = Client::connect(&server);
    let (id, _) = a.open(json!({"time_scale": 10.0, "telemetry_rate": 100.0}));
    let mut stalled = Client::connect(&server);
    stalled.send(json!({"type": "attach", "session": id}));

    let wall0 = Instant::now();
    let mut first_t = None;
    let mut last_t = 0.0;
    let mut prev: Option<f64> = None;
    while wall0.elapsed() < Duration::from_secs(3) {
        let v = a.recv();
        if !is_telemetry(&v) {
            continue;
        }
        let t = frame_t(&v);
        if let Some(p) = prev {
            assert!((t - p - 0.01).abs() < 1e-9, "gap between {p} and {t}");
        }
        prev = Some(t);
        first_t.get_or_insert(t);
        last_t = t;
    }
    let wall = wall0.elapsed().as_secs_f64();
    let advanced = last_t - first_t.unwrap();
    assert!(
        advanced > 0.8 * 10.0 * wall,
        "simulation slowed: {advanced} s in {wall} s"
    );
    drop(stalled);
}

#[test]
fn stalled_queue_drops_oldest_telemetry_in_process() {
    let opener = Arc::new(Outbound::new(8));
    let spec = SessionSpec {
        time_scale: 50.0,
        telemetry_rate: 200.0,
        ..SessionSpec::default()
    };
    let h =
        SessionHandle::spawn("t1".into(), spec, opener.clone(), 1, None, Box::new(|| {})).unwrap();
    let reply = Arc::new(Outbound::new(8));
    std::thread::sleep(Duration::from_millis(300));
    assert!(opener.dropped() > 0);
    assert!(opener.len() <= 8 + 4, "queue grew to {}", opener.len());
    assert!(h.send(Control::Command {
        reply_to: 2,
        cmd: SessionCommand::Pause,
        reply: reply.clone(),
    }));
    let ack = reply.pop_timeout(Duration::from_secs(5)).unwrap();
    assert!(matches!(ack.msg, edubal::service::ServerMsg::Ack { .. }));
    opener.close();
    h.join();
}

#[test]
fn two_subscribers_see_identical_frames() {
    let server = start_default();
    let mut a = Client::connect(&server);
    let (id, _) = a.open(json!({"time_scale": 0.0}));
    let mut b = Client::connect(&server);
    let seq = b.send(json!({"type": "attach", "session": id}));
    assert_eq!(b.reply(seq)["type"], "session_info");
    a.command(
        "set_sim_option",
        json!({"name": "time_scale", "value": 10.0}),
    );
    a.command("resume", json!({}));
    let fa: Vec<Value> = (0..10)
        .map(|_| a.recv_until(|v| is_telemetry(v) && frame_t(v) > 0.0)["frame"].clone())
        .collect();
    let t0 = fa[0]["t"].as_f64().unwrap();
    let fb0 = b.recv_until(|v| is_telemetry(v) && (frame_t(v) - t0).abs() < 1e-12);
    assert_eq!(fb0["frame"], fa[0]);
}

#[test]
fn malformed_input_reports_and_keeps_connection() {
    let server = start_default();
    let mut c = Client::connect(&server);
    c.raw("{not json\n");
    let err = c.recv();
    assert_eq!(err["type"], "error");
    assert_eq!(err["code"], "parse");
    assert_eq!(err["reply_to"], Value::Null);
    c.raw("{\"type\":\"teleport\",\"seq\":77}\n");
    let err = c.recv();
    assert_eq!(err["code"], "unknown_type");
    assert_eq!(err["reply_to"], 77);
    let err = c.command("pause", json!({}));
    assert_eq!(err["code"], "no_session");
    let seq = c.send(json!({"type": "ping"}));
    assert_eq!(c.reply(seq)["type"], "pong");
    let seq = c.send(json!({"type": "open", "config": {"dt_control": -1.0}}));
    assert_eq!(c.reply(seq)["code"], "invalid_payload");
}

#[test]
fn websocket_framing_carries_the_same_messages() {
    let server = start_default();
    let (mut ws, _) = tungstenite::connect(format!("ws://{}/", server.addr())).unwrap();
    ws.send(tungstenite::Message::text(
        r#"{"type":"open","seq":1,"ts":0,"time_scale":10}"#,
    ))
    .unwrap();
    let mut types = Vec::new();
    while types.len() < 3 {
        if let tungstenite::Message::Text(t) = ws.read().unwrap() {
            let v: Value = serde_json::from_str(t.as_str()).unwrap();
            types.push(v["type"].as_str().unwrap().to_string());
        }
    }
    assert_eq!(types[0], "session_info");
    assert!(types[1..].iter().all(|t| t == "telemetry"));
    ws.close(None).unwrap();
}

#[test]
fn static_ui_is_served_over_http() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>edubal</html>").unwrap();
    let server = start(ServerConfig {
        ui_dir: Some(dir.path().to_path_buf()),
        ..ServerConfig::default()
    });
    let get = |path: &str| {
        let mut s = TcpStream::connect(server.addr()).unwrap();
        write!(s, "GET {path} HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
        let mut body = String::new();
        s.read_to_string(&mut body).unwrap();
        body
    };
    let ok = get("/");
    assert!(ok.starts_with("HTTP/1.1 200"), "{ok}");
    assert!(ok.ends_with("<html>edubal</html>"));
    assert!(get("/../secret").starts_with("HTTP/1.1 404"));
}

#[test]
fn log_file_records_broadcasts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.ndjson");
    let server = start(ServerConfig {
        log_path: Some(path.clone()),
        ..ServerConfig::default()
    });
    let mut c = Client::connect(&server);
    c.open(json!({"time_scale": 20.0}));
    c.recv_until(|v| is_telemetry(v) && frame_t(v) > 0.5);
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let text = std::fs::read_to_string(&path).unwrap_or_default();
        if text.lines().filter(|l| l.contains("\"telemetry\"")).count() > 5 {
            break;
        }
        assert!(Instant::now() < deadline, "log not written");
        std::thread::sleep(Duration::from_millis(50));
    }
}
