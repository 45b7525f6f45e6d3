use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::Value;
use tungstenite::{Message, WebSocket};

use super::outbound::{Outbound, DEFAULT_QUEUE_CAPACITY};
use super::protocol::{self, ClientMsg, ErrorCode, Outgoing, ServerMsg, SessionCommand};
use super::session::{Control, SessionHandle, SessionSpec};
use crate::model::RobotParams;
use crate::simulation::SimConfig;

pub const DEFAULT_PORT: u16 = 9870;
pub const DEFAULT_MAX_SESSIONS: usize = 8;
const POLL: Duration = Duration::from_millis(5);
const MAX_HEAD: usize = 16 * 1024;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub addr: String,
    /// 0 asks the OS for a free port.
    pub port: u16,
    pub ui_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub max_sessions: usize,
    pub queue_capacity: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            addr: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            ui_dir: None,
            log_path: None,
            max_sessions: DEFAULT_MAX_SESSIONS,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Invalid(String),
}

struct Shared {
    cfg: ServerConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    next_session: AtomicU64,
    log: Option<Arc<Outbound>>,
    stop: AtomicBool,
}

impl Shared {
    fn open(
        self: &Arc<Self>,
        spec: SessionSpec,
        opener: Arc<Outbound>,
        reply_to: u64,
    ) -> Result<String, (ErrorCode, String)> {
        let mut sessions = self.sessions.lock().unwrap();
        sessions.retain(|_, h| !h.is_finished());
        if sessions.len() >= self.cfg.max_sessions {
            return Err((
                ErrorCode::ResourceLimit,
                format!("session limit of {} reached", self.cfg.max_sessions),
            ));
        }
        let id = format!("s{}", self.next_session.fetch_add(1, Ordering::Relaxed));
        let weak = Arc::downgrade(self);
        let exit_id = id.clone();
        let on_exit = Box::new(move || {
            if let Some(shared) = weak.upgrade() {
                if let Ok(mut s) = shared.sessions.lock() {
                    s.remove(&exit_id);
                }
            }
        });
        let handle = SessionHandle::spawn(
            id.clone(),
            spec,
            opener,
            reply_to,
            self.log.clone(),
            on_exit,
        )
        .map_err(|m| (ErrorCode::InvalidPayload, m))?;
        sessions.insert(id.clone(), handle);
        Ok(id)
    }

    fn send(&self, session: &str, c: Control) -> bool {
        self.sessions
            .lock()
            .unwrap()
            .get(session)
            .is_some_and(|h| h.send(c))
    }

    fn session_count(&self) -> usize {
        let mut s = self.sessions.lock().unwrap();
        s.retain(|_, h| !h.is_finished());
        s.len()
    }
}

/// A bound server. [`Server::run`] blocks; [`Server::spawn`] runs the
/// accept loop on a background thread.
pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
    log_thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(cfg: ServerConfig) -> Result<Server, ServiceError> {
        if cfg.max_sessions == 0 {
            return Err(ServiceError::Invalid("max_sessions must be ≥ 1".into()));
        }
        if let Some(dir) = &cfg.ui_dir {
            if !dir.is_dir() {
                return Err(ServiceError::Invalid(format!(
                    "ui directory {} does not exist",
                    dir.display()
                )));
            }
        }
        let listener = TcpListener::bind((cfg.addr.as_str(), cfg.port))?;
        let (log, log_thread) = match &cfg.log_path {
            Some(path) => {
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)?;
                let out = Arc::new(Outbound::new(usize::MAX));
                let q = out.clone();
                let t = thread::spawn(move || {
                    let mut w = io::BufWriter::new(file);
                    let mut seq = 0;
                    loop {
                        match q.pop_timeout(Duration::from_millis(200)) {
                            Some(o) => {
                                seq += 1;
                                let _ = writeln!(w, "{}", protocol::encode(&o, seq));
                            }
                            None if q.is_closed() => break,
                            None => {
                                let _ = w.flush();
                            }
                        }
                    }
                    let _ = w.flush();
                });
                (Some(out), Some(t))
            }
            None => (None, None),
        };
        Ok(Server {
            listener,
            shared: Arc::new(Shared {
                cfg,
                sessions: Mutex::new(HashMap::new()),
                next_session: AtomicU64::new(1),
                log,
                stop: AtomicBool::new(false),
            }),
            log_thread,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn run(self) -> Result<(), ServiceError> {
        for stream in self.listener.incoming() {
            if self.shared.stop.load(Ordering::Acquire) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let shared = self.shared.clone();
            let _ = thread::Builder::new()
                .name("edubal-conn".into())
                .spawn(move || handle_connection(stream, shared));
        }
        if let Some(log) = &self.shared.log {
            log.close();
        }
        if let Some(t) = self.log_thread {
            let _ = t.join();
        }
        Ok(())
    }

    pub fn spawn(self) -> Result<ServerHandle, ServiceError> {
        let addr = self.local_addr()?;
        let shared = self.shared.clone();
        let join = thread::Builder::new()
            .name("edubal-accept".into())
            .spawn(move || {
                let _ = self.run();
            })?;
        Ok(ServerHandle {
            addr,
            shared,
            join: Some(join),
        })
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn session_count(&self) -> usize {
        self.shared.session_count()
    }

    /// Stops accepting connections. Open sessions end with their clients.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        let _ = TcpStream::connect(self.addr);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

enum Framing {
    Ndjson,
    WebSocket,
    Http,
}

/// Looks at the first bytes without consuming them: `GET` with an
/// `Upgrade: websocket` header is a WebSocket handshake, any other `GET`
/// is a static file request, everything else is NDJSON.
fn detect(stream: &TcpStream) -> io::Result<Framing> {
    let mut buf = vec![0u8; MAX_HEAD];
    loop {
        let n = stream.peek(&mut buf)?;
        if n == 0 {
            return Ok(Framing::Ndjson);
        }
        let head = &buf[..n];
        if !b"GET ".starts_with(&head[..n.min(4)]) {
            return Ok(Framing::Ndjson);
        }
        if n >= 4 {
            if let Some(end) = find(head, b"\r\n\r\n") {
                let text = String::from_utf8_lossy(&head[..end]).to_ascii_lowercase();
                let upgrade = text
                    .lines()
                    .any(|l| l.starts_with("upgrade:") && l.contains("websocket"));
                return Ok(if upgrade {
                    Framing::WebSocket
                } else {
                    Framing::Http
                });
            }
            if n == MAX_HEAD {
                return Ok(Framing::Http);
            }
        }
        thread::sleep(Duration::from_millis(1));
    }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn handle_connection(stream: TcpStream, shared: Arc<Shared>) {
    if shared.stop.load(Ordering::Acquire) {
        return;
    }
    let _ = stream.set_nodelay(true);
    match detect(&stream) {
        Ok(Framing::Ndjson) => serve_ndjson(stream, shared),
        Ok(Framing::WebSocket) => serve_websocket(stream, shared),
        Ok(Framing::Http) => {
            let _ = serve_http(stream, shared.cfg.ui_dir.as_deref());
        }
        Err(_) => {}
    }
}

/// Per-connection protocol state shared by both framings.
struct Conn {
    shared: Arc<Shared>,
    out: Arc<Outbound>,
    sessions: Vec<String>,
}

impl Conn {
    fn new(shared: Arc<Shared>) -> Conn {
        let out = Arc::new(Outbound::new(shared.cfg.queue_capacity));
        Conn {
            shared,
            out,
            sessions: Vec::new(),
        }
    }

    fn error(&self, reply_to: Option<u64>, code: ErrorCode, message: String) {
        self.out.push(Outgoing {
            ts: self.out.last_ts(),
            msg: ServerMsg::Error {
                reply_to,
                code,
                message,
            },
        });
    }

    fn target(&self, session: Option<String>) -> Option<String> {
        session.or_else(|| self.sessions.last().cloned())
    }

    fn handle_text(&mut self, text: &str) {
        let text = text.trim();
        if text.is_empty() {
            return;
        }
        match protocol::parse_client(text) {
            Ok(msg) => self.handle(msg),
            Err((reply_to, code, message)) => self.error(reply_to, code, message),
        }
    }

    fn handle(&mut self, msg: ClientMsg) {
        let seq = msg.seq();
        match msg {
            ClientMsg::Ping { seq } => self.out.push(Outgoing {
                ts: self.out.last_ts(),
                msg: ServerMsg::Pong { reply_to: seq },
            }),
            ClientMsg::Open {
                config,
                params,
                time_scale,
                telemetry_rate,
                ..
            } => match build_spec(config, params, time_scale, telemetry_rate) {
                Ok(spec) => match self.shared.open(spec, self.out.clone(), seq) {
                    Ok(id) => self.sessions.push(id),
                    Err((code, m)) => self.error(Some(seq), code, m),
                },
                Err(m) => self.error(Some(seq), ErrorCode::InvalidPayload, m),
            },
            ClientMsg::Attach { session, .. } => {
                let ok = self.shared.send(
                    &session,
                    Control::Subscribe {
                        reply_to: seq,
                        out: self.out.clone(),
                    },
                );
                if ok {
                    self.sessions.retain(|s| s != &session);
                    self.sessions.push(session);
                } else {
                    self.error(
                        Some(seq),
                        ErrorCode::NoSession,
                        format!("no session `{session}`"),
                    );
                }
            }
            ClientMsg::Command {
                session,
                kind,
                payload,
                ..
            } => {
                let Some(id) = self.target(session) else {
                    return self.error(
                        Some(seq),
                        ErrorCode::NoSession,
                        "no session opened or attached".into(),
                    );
                };
                let cmd = match SessionCommand::parse(&kind, &payload) {
                    Ok(c) => c,
                    Err((code, m)) => return self.error(Some(seq), code, m),
                };
                let sent = self.shared.send(
                    &id,
                    Control::Command {
                        reply_to: seq,
                        cmd,
                        reply: self.out.clone(),
                    },
                );
                if !sent {
                    self.error(
                        Some(seq),
                        ErrorCode::NoSession,
                        format!("no session `{id}`"),
                    );
                }
            }
            ClientMsg::Close { session, .. } => {
                let Some(id) = self.target(session) else {
                    return self.error(
                        Some(seq),
                        ErrorCode::NoSession,
                        "no session opened or attached".into(),
                    );
                };
                let sent = self.shared.send(
                    &id,
                    Control::Close {
                        reply_to: seq,
                        reply: self.out.clone(),
                    },
                );
                self.sessions.retain(|s| s != &id);
                if !sent {
                    self.error(
                        Some(seq),
                        ErrorCode::NoSession,
                        format!("no session `{id}`"),
                    );
                }
            }
        }
    }
}

impl Drop for Conn {
    fn drop(&mut self) {
        self.out.close();
        for s in &self.sessions {
            self.shared.send(
                s,
                Control::Unsubscribe {
                    out_id: self.out.id(),
                },
            );
        }
    }
}

fn build_spec(
    config: Option<Value>,
    params: Option<Value>,
    time_scale: Option<f64>,
    telemetry_rate: Option<f64>,
) -> Result<SessionSpec, String> {
    let mut spec = SessionSpec::default();
    if let Some(c) = config {
        spec.config = serde_json::from_value::<SimConfig>(c).map_err(|e| format!("config: {e}"))?;
    }
    if let Some(p) = params {
        spec.params =
            serde_json::from_value::<RobotParams>(p).map_err(|e| format!("params: {e}"))?;
    }
    if let Some(t) = time_scale {
        spec.time_scale = t;
    }
    if let Some(r) = telemetry_rate {
        spec.telemetry_rate = r;
    }
    spec.validate()?;
    Ok(spec)
}

fn serve_ndjson(stream: TcpStream, shared: Arc<Shared>) {
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let mut conn = Conn::new(shared);
    let out = conn.out.clone();
    let writer = thread::spawn(move || {
        let mut w = io::BufWriter::new(write_half);
        let mut seq = 0u64;
        loop {
            let Some(o) = out.pop_timeout(Duration::from_millis(250)) else {
                if out.is_closed() {
                    break;
                }
                continue;
            };
            seq += 1;
            let mut line = protocol::encode(&o, seq);
            line.push('\n');
            if w.write_all(line.as_bytes()).is_err() {
                break;
            }
            if out.is_empty() && w.flush().is_err() {
                break;
            }
        }
        let _ = w.flush();
        let _ = w.get_ref().shutdown(Shutdown::Write);
    });
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        conn.handle_text(&line);
        if conn.out.is_closed() {
            break;
        }
    }
    drop(conn);
    let _ = writer.join();
}

fn serve_websocket(stream: TcpStream, shared: Arc<Shared>) {
    let Ok(mut ws) = tungstenite::accept(stream) else {
        return;
    };
    if ws.get_ref().set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    let mut conn = Conn::new(shared);
    let mut seq = 0u64;
    loop {
        if flush_ws(&mut ws, &conn.out, &mut seq).is_err() {
            break;
        }
        match ws.read() {
            Ok(Message::Text(t)) => conn.handle_text(t.as_str()),
            Ok(Message::Binary(b)) => conn.handle_text(&String::from_utf8_lossy(&b)),
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) => {}
            Err(_) => break,
        }
    }
    drop(conn);
    let _ = ws.close(None);
    let _ = ws.flush();
}

fn flush_ws(
    ws: &mut WebSocket<TcpStream>,
    out: &Outbound,
    seq: &mut u64,
) -> tungstenite::Result<()> {
    let mut wrote = false;
    while let Some(o) = out.try_pop() {
        *seq += 1;
        ws.write(Message::text(protocol::encode(&o, *seq)))?;
        wrote = true;
    }
    if wrote {
        ws.flush()?;
    }
    Ok(())
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" | "htm" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "wasm" => "application/wasm",
        "ico" => "image/x-icon",
        _ => "application/octet-stream",
    }
}

/// Minimal static file responder for the bundled UI.
fn serve_http(mut stream: TcpStream, ui_dir: Option<&Path>) -> io::Result<()> {
    let mut head = Vec::new();
    let mut byte = [0u8; 1];
    while find(&head, b"\r\n\r\n").is_none() && head.len() < MAX_HEAD {
        if stream.read(&mut byte)? == 0 {
            break;
        }
        head.push(byte[0]);
    }
    let text = String::from_utf8_lossy(&head);
    let target = text.split_whitespace().nth(1).unwrap_or("/");
    let path = target.split(['?', '#']).next().unwrap_or("/");
    let resolved = ui_dir.and_then(|root| resolve(root, path));
    let (status, ctype, body) = match resolved.and_then(|p| fs::read(&p).ok().map(|b| (p, b))) {
        Some((p, body)) => ("200 OK", content_type(&p), body),
        None => (
            "404 Not Found",
            "text/plain; charset=utf-8",
            b"not found\n".to_vec(),
        ),
    };
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    stream.write_all(&body)?;
    stream.flush()
}

fn resolve(root: &Path, url_path: &str) -> Option<PathBuf> {
    let rel = Path::new(url_path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let mut p = root.join(rel);
    if p.is_dir() {
        p.push("index.html");
    }
    p.is_file().then_some(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_resolution_stays_inside_root() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("index.html"), "<html></html>").unwrap();
        assert_eq!(
            resolve(dir.path(), "/"),
            Some(dir.path().join("index.html"))
        );
        assert_eq!(resolve(dir.path(), "/../etc/passwd"), None);
        assert_eq!(resolve(dir.path(), "/missing.js"), None);
    }

    #[test]
    fn framing_needle() {
        assert_eq!(find(b"ab\r\n\r\ncd", b"\r\n\r\n"), Some(2));
        assert_eq!(find(b"abc", b"\r\n\r\n"), None);
    }
}
