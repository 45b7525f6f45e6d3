//! One simulation session: a thread that owns the [`Simulator`], applies
//! queued commands between control steps and fans messages out to its
//! subscribers.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::outbound::Outbound;
use super::protocol::{ErrorCode, EventKind, Outgoing, ServerMsg, SessionCommand, SessionInfo};
use crate::fixtures;
use crate::model::RobotParams;
use crate::simulation::{
    ControlMode, ControllerConfig, SafetyStatus, SimConfig, SimError, Simulator, TelemetryFrame,
};
use crate::synthesis::{self, GainVector, LQRWeights};

pub const DEFAULT_TELEMETRY_RATE: f64 = 50.0;
pub const HEARTBEAT_PERIOD: Duration = Duration::from_secs(1);
/// Wall-clock lag after which pacing restarts from "now" instead of
/// running the missed steps back to back.
pub const MAX_PACING_LAG: Duration = Duration::from_millis(200);

/// Everything `open` fixes. `reset` rebuilds the simulator from it.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionSpec {
    pub config: SimConfig,
    pub params: RobotParams,
    /// Simulated seconds per wall second; 0 opens the session paused.
    pub time_scale: f64,
    /// Telemetry frames per simulated second.
    pub telemetry_rate: f64,
}

impl Default for SessionSpec {
    fn default() -> Self {
        SessionSpec {
            config: SimConfig::default(),
            params: RobotParams::default(),
            time_scale: 1.0,
            telemetry_rate: DEFAULT_TELEMETRY_RATE,
        }
    }
}

impl SessionSpec {
    pub fn validate(&self) -> Result<(), String> {
        Simulator::new(self.config.clone(), self.params).map_err(|e| e.to_string())?;
        check_time_scale(self.time_scale)?;
        check_rate(self.telemetry_rate, self.config.dt_control)
    }
}

fn check_time_scale(v: f64) -> Result<(), String> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(format!("time_scale must be finite and ≥ 0, got {v}"))
    }
}

fn check_rate(v: f64, dt_control: f64) -> Result<(), String> {
    if v > 0.0 && v <= 1.0 / dt_control * (1.0 + 1e-9) {
        Ok(())
    } else {
        Err(format!(
            "telemetry_rate must be in (0, {}], got {v}",
            1.0 / dt_control
        ))
    }
}

pub enum Control {
    Command {
        reply_to: u64,
        cmd: SessionCommand,
        reply: Arc<Outbound>,
    },
    Subscribe {
        reply_to: u64,
        out: Arc<Outbound>,
    },
    Unsubscribe {
        out_id: u64,
    },
    Close {
        reply_to: u64,
        reply: Arc<Outbound>,
    },
}

/// Handle to a running session thread.
#[derive(Debug)]
pub struct SessionHandle {
    id: String,
    tx: Sender<Control>,
    join: Option<JoinHandle<()>>,
}

impl SessionHandle {
    /// Starts the session and subscribes `opener`, which receives the
    /// `session_info` answer to `reply_to` before any telemetry.
    pub fn spawn(
        id: String,
        spec: SessionSpec,
        opener: Arc<Outbound>,
        reply_to: u64,
        log: Option<Arc<Outbound>>,
        on_exit: Box<dyn FnOnce() + Send>,
    ) -> Result<SessionHandle, String> {
        spec.validate()?;
        let (tx, rx) = mpsc::channel();
        let sid = id.clone();
        let join = thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || {
                let mut core = Core::new(sid, spec, log);
                core.subscribe(opener, reply_to);
                core.run(rx);
                on_exit();
            })
            .map_err(|e| e.to_string())?;
        Ok(SessionHandle {
            id,
            tx,
            join: Some(join),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// `false` once the session thread has ended.
    pub fn send(&self, c: Control) -> bool {
        self.tx.send(c).is_ok()
    }

    pub fn is_finished(&self) -> bool {
        self.join.as_ref().is_none_or(|j| j.is_finished())
    }

    pub fn join(mut self) {
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

/// Broadcasts a command causes, sent after its ack.
enum After {
    Event(EventKind, f64),
    Frame,
}

enum Flow {
    Continue,
    Exit,
}

struct Core {
    id: String,
    spec: SessionSpec,
    sim: Simulator,
    subs: Vec<Arc<Outbound>>,
    log: Option<Arc<Outbound>>,
    paused: bool,
    time_scale: f64,
    telemetry_rate: f64,
    next_emit: u64,
    anchor: (Instant, u64),
    last_heartbeat: Instant,
    prev_safety: SafetyStatus,
    last_frame: Option<TelemetryFrame>,
    deferred: Vec<After>,
}

fn nominal_safety() -> SafetyStatus {
    SafetyStatus {
        motors_enabled: true,
        angle_ok: true,
        slip_detected: false,
        battery_low: false,
        delta_p_ddot: 0.0,
    }
}

impl Core {
    fn new(id: String, spec: SessionSpec, log: Option<Arc<Outbound>>) -> Core {
        let sim = Simulator::new(spec.config.clone(), spec.params).expect("validated spec");
        let now = Instant::now();
        Core {
            id,
            sim,
            subs: Vec::new(),
            log,
            paused: spec.time_scale == 0.0,
            time_scale: spec.time_scale,
            telemetry_rate: spec.telemetry_rate,
            next_emit: 0,
            anchor: (now, 0),
            last_heartbeat: now,
            prev_safety: nominal_safety(),
            last_frame: None,
            deferred: Vec::new(),
            spec,
        }
    }

    fn info(&self) -> SessionInfo {
        SessionInfo {
            session: self.id.clone(),
            time_scale: self.time_scale,
            telemetry_rate: self.telemetry_rate,
            control_rate: 1.0 / self.sim.config().dt_control,
            paused: self.paused,
            controller: ControllerConfig {
                references: *self.sim.references(),
                ..self.sim.controller().clone()
            },
            params: *self.sim.params(),
        }
    }

    fn out(&self, msg: ServerMsg) -> Outgoing {
        Outgoing {
            ts: self.sim.time(),
            msg,
        }
    }

    fn broadcast(&self, msg: ServerMsg) {
        let o = self.out(msg);
        for s in &self.subs {
            s.push(o.clone());
        }
        if let Some(log) = &self.log {
            log.push(o);
        }
    }

    fn subscribe(&mut self, out: Arc<Outbound>, reply_to: u64) {
        out.push(self.out(ServerMsg::SessionInfo {
            reply_to,
            info: self.info(),
        }));
        if !self.subs.iter().any(|s| s.id() == out.id()) {
            self.subs.push(out);
        }
        if self.last_frame.is_none() {
            self.step_frame();
        }
    }

    fn run(&mut self, rx: Receiver<Control>) {
        loop {
            loop {
                match rx.try_recv() {
                    Ok(c) => {
                        if let Flow::Exit = self.handle(c) {
                            return;
                        }
                    }
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Disconnected) => return,
                }
            }
            self.subs.retain(|s| !s.is_closed());
            if self.subs.is_empty() {
                return;
            }
            let now = Instant::now();
            let hb_due = self.last_heartbeat + HEARTBEAT_PERIOD;
            if now >= hb_due {
                self.broadcast(ServerMsg::Heartbeat {
                    session: Some(self.id.clone()),
                    t_sim: self.sim.time(),
                    paused: self.paused,
                });
                self.last_heartbeat = now;
                continue;
            }
            let wake = if self.paused {
                hb_due
            } else {
                self.deadline().min(hb_due)
            };
            if now < wake {
                match rx.recv_timeout(wake - now) {
                    Ok(c) => {
                        if let Flow::Exit = self.handle(c) {
                            return;
                        }
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => return,
                }
                continue;
            }
            if self.paused {
                continue;
            }
            if now.saturating_duration_since(self.deadline()) > MAX_PACING_LAG {
                self.anchor = (now, self.sim.step_index());
            }
            if let Err(e) = self.sim.advance() {
                let reason = match e {
                    SimError::Diverged { t } => format!("diverged at t = {t}"),
                    other => other.to_string(),
                };
                self.broadcast(ServerMsg::End {
                    session: self.id.clone(),
                    reason,
                });
                return;
            }
            self.step_frame();
        }
    }

    /// Wall instant at which the next control step is due.
    fn deadline(&self) -> Instant {
        let (wall, step) = self.anchor;
        let sim_ahead = (self.sim.step_index() + 1 - step) as f64 * self.sim.config().dt_control;
        wall + Duration::from_secs_f64(sim_ahead / self.time_scale)
    }

    fn reanchor(&mut self) {
        self.anchor = (Instant::now(), self.sim.step_index());
    }

    /// Runs the control update at the current instant and publishes the
    /// frame and any safety edges.
    fn step_frame(&mut self) {
        let frame = self.sim.control_update();
        let now = frame.safety;
        let prev = self.prev_safety;
        let edges = [
            (prev.angle_ok && !now.angle_ok, EventKind::LimiterTrip),
            (!prev.angle_ok && now.angle_ok, EventKind::LimiterClear),
            (
                !prev.slip_detected && now.slip_detected,
                EventKind::SlipDetected,
            ),
            (
                prev.slip_detected && !now.slip_detected,
                EventKind::SlipCleared,
            ),
            (!prev.battery_low && now.battery_low, EventKind::BatteryLow),
        ];
        for (fired, event) in edges {
            if fired {
                self.broadcast(ServerMsg::Event {
                    session: self.id.clone(),
                    event,
                    t: frame.t,
                });
            }
        }
        self.prev_safety = now;
        let k = self.sim.step_index();
        let steps_per_frame = 1.0 / (self.telemetry_rate * self.sim.config().dt_control);
        if k >= self.next_emit {
            let o = Outgoing {
                ts: frame.t,
                msg: ServerMsg::Telemetry {
                    session: self.id.clone(),
                    frame,
                },
            };
            for s in &self.subs {
                s.push(o.clone());
            }
            if let Some(log) = &self.log {
                log.push(o);
            }
            let n = (k as f64 / steps_per_frame + 1e-9).floor() + 1.0;
            self.next_emit = (n * steps_per_frame - 1e-9).ceil() as u64;
        }
        self.last_frame = Some(frame);
    }

    fn handle(&mut self, c: Control) -> Flow {
        match c {
            Control::Subscribe { reply_to, out } => self.subscribe(out, reply_to),
            Control::Unsubscribe { out_id } => self.subs.retain(|s| s.id() != out_id),
            Control::Close { reply_to, reply } => {
                reply.push(self.out(ServerMsg::Ack {
                    reply_to,
                    session: self.id.clone(),
                    kind: "close".into(),
                    t_effect: self.sim.time(),
                    result: Value::Null,
                }));
                self.broadcast(ServerMsg::End {
                    session: self.id.clone(),
                    reason: "closed".into(),
                });
                return Flow::Exit;
            }
            Control::Command {
                reply_to,
                cmd,
                reply,
            } => {
                let kind = cmd.kind();
                let msg = match self.apply(cmd) {
                    Ok((t_effect, result)) => ServerMsg::Ack {
                        reply_to,
                        session: self.id.clone(),
                        kind: kind.into(),
                        t_effect,
                        result,
                    },
                    Err(message) => ServerMsg::Error {
                        reply_to: Some(reply_to),
                        code: ErrorCode::Rejected,
                        message,
                    },
                };
                reply.push(self.out(msg));
                for after in std::mem::take(&mut self.deferred) {
                    match after {
                        After::Event(event, t) => self.broadcast(ServerMsg::Event {
                            session: self.id.clone(),
                            event,
                            t,
                        }),
                        After::Frame => self.step_frame(),
                    }
                }
            }
        }
        Flow::Continue
    }

    /// Validates and applies one command. A rejected command leaves the
    /// session untouched.
    fn apply(&mut self, cmd: SessionCommand) -> Result<(f64, Value), String> {
        let next = self.sim.time() + self.sim.config().dt_control;
        let current = self.sim.controller().clone();
        let refs = *self.sim.references();
        match cmd {
            SessionCommand::SetGains(g) => {
                let n = current
                    .mode
                    .gain_len()
                    .ok_or_else(|| "velocity_ref mode has no gains".to_string())?;
                if g.gains.len() != n {
                    return Err(format!(
                        "{} mode needs {n} gains, got {}",
                        current.mode.name(),
                        g.gains.len()
                    ));
                }
                let cfg = ControllerConfig {
                    gains: GainVector::new(g.gains),
                    references: refs,
                    ..current
                };
                self.sim.set_controller(cfg).map_err(|e| e.to_string())?;
                Ok((next, Value::Null))
            }
            SessionCommand::SetWeightsAndResynthesize(w) => {
                let weights = LQRWeights::new(w.q, w.r).map_err(|e| e.to_string())?;
                let params = self.sim.params();
                let design = match current.mode {
                    ControlMode::Lqr4 if weights.q.len() == 4 => synthesis::lqr4(params, &weights),
                    ControlMode::Cascade if weights.q.len() == 3 => {
                        synthesis::lqr3(params, &weights)
                    }
                    ControlMode::VelocityRef => return Err("velocity_ref mode has no gains".into()),
                    mode => {
                        return Err(format!(
                            "{} mode needs {} weights, got {}",
                            mode.name(),
                            mode.gain_len().unwrap_or(0),
                            weights.q.len()
                        ))
                    }
                }
                .map_err(|e| e.to_string())?;
                let gains = design.gains.k.clone();
                let cfg = ControllerConfig {
                    gains: design.gains,
                    references: refs,
                    ..current
                };
                self.sim.set_controller(cfg).map_err(|e| e.to_string())?;
                Ok((next, json!({ "gains": gains })))
            }
            SessionCommand::SetReference(r) => {
                let mut refs = refs;
                refs.p_ref = r.p_ref.unwrap_or(refs.p_ref);
                refs.theta_ref = r.theta_ref.unwrap_or(refs.theta_ref);
                refs.phi_dot_ref = r.phi_dot_ref.unwrap_or(refs.phi_dot_ref);
                self.sim.set_references(refs).map_err(|e| e.to_string())?;
                Ok((next, Value::Null))
            }
            SessionCommand::TeleopVelocity(v) => {
                let mut refs = refs;
                refs.phi_dot_ref = v.value;
                self.sim.set_references(refs).map_err(|e| e.to_string())?;
                Ok((next, Value::Null))
            }
            SessionCommand::SetMode(m) => {
                let published = fixtures::reference_values();
                let gains = match (m.gains, m.mode.gain_len()) {
                    (Some(g), _) => GainVector::new(g),
                    (None, Some(n)) if current.gains.len() == n => current.gains.clone(),
                    (None, _) => match m.mode {
                        ControlMode::Lqr4 => published.lqr4_gains(),
                        ControlMode::Cascade => published.lqr3_gains(),
                        ControlMode::VelocityRef => GainVector::new(Vec::new()),
                    },
                };
                let kp_pos = m.kp_pos.unwrap_or(match m.mode {
                    ControlMode::Cascade if current.mode != ControlMode::Cascade => {
                        published.kp_pos_stable
                    }
                    _ => current.kp_pos,
                });
                let mut refs = refs;
                if current.mode == ControlMode::VelocityRef && m.mode != ControlMode::VelocityRef {
                    refs.p_ref = self.sim.state().position(self.sim.params());
                }
                let cfg = ControllerConfig {
                    mode: m.mode,
                    gains,
                    kp_pos,
                    references: refs,
                };
                self.sim.set_controller(cfg).map_err(|e| e.to_string())?;
                Ok((next, Value::Null))
            }
            SessionCommand::Pause => {
                if !self.paused {
                    self.paused = true;
                    self.deferred
                        .push(After::Event(EventKind::Paused, self.sim.time()));
                }
                Ok((self.sim.time(), Value::Null))
            }
            SessionCommand::Resume => {
                if self.time_scale == 0.0 {
                    return Err("time_scale is 0; set it before resuming".into());
                }
                if self.paused {
                    self.paused = false;
                    self.reanchor();
                    self.deferred
                        .push(After::Event(EventKind::Resumed, self.sim.time()));
                }
                Ok((next, Value::Null))
            }
            SessionCommand::Reset(r) => {
                let mut cfg = self.spec.config.clone();
                if let Some(initial) = r.initial {
                    cfg.initial = initial;
                }
                let sim = Simulator::new(cfg, self.spec.params).map_err(|e| e.to_string())?;
                self.sim = sim;
                self.next_emit = 0;
                self.prev_safety = nominal_safety();
                self.reanchor();
                self.deferred.push(After::Event(EventKind::Reset, 0.0));
                self.deferred.push(After::Frame);
                Ok((0.0, Value::Null))
            }
            SessionCommand::SetSimOption(o) => {
                let v = o.value;
                match o.name.as_str() {
                    "time_scale" => {
                        check_time_scale(v)?;
                        self.time_scale = v;
                        if v == 0.0 {
                            self.paused = true;
                        }
                        self.reanchor();
                        return Ok((self.sim.time(), Value::Null));
                    }
                    "telemetry_rate" => {
                        check_rate(v, self.sim.config().dt_control)?;
                        self.telemetry_rate = v;
                        self.next_emit = self.sim.step_index() + 1;
                        return Ok((next, Value::Null));
                    }
                    _ => {}
                }
                let mut cfg = self.sim.config().clone();
                match o.name.as_str() {
                    "backlash_halfwidth" => cfg.backlash_halfwidth = v,
                    "torque_limit" => cfg.torque_limit = v,
                    "accel_sigma" => cfg.imu_noise.accel_sigma = v,
                    "gyro_sigma" => cfg.imu_noise.gyro_sigma = v,
                    "slip_threshold" => cfg.slip_threshold = v,
                    "slip_hold" => cfg.slip_hold = v,
                    "theta_ref_offset" => cfg.theta_ref_offset = v,
                    other => return Err(format!("unknown sim option `{other}`")),
                }
                cfg.controller.references = refs;
                self.sim.set_options(cfg).map_err(|e| e.to_string())?;
                Ok((next, Value::Null))
            }
        }
    }
}
