//! Wire messages. Every message is one JSON object carrying `type`, `seq`
//! and `ts`; on the raw socket each object is terminated by `\n`, on the
//! WebSocket each object is one text frame.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::model::{PlantState, RobotParams};
use crate::simulation::{ControlMode, ControllerConfig, TelemetryFrame};

/// Client-to-server messages after envelope validation.
#[derive(Clone, Debug, PartialEq)]
pub enum ClientMsg {
    Open {
        seq: u64,
        config: Option<Value>,
        params: Option<Value>,
        time_scale: Option<f64>,
        telemetry_rate: Option<f64>,
    },
    Attach {
        seq: u64,
        session: String,
    },
    Command {
        seq: u64,
        session: Option<String>,
        kind: String,
        payload: Value,
    },
    Close {
        seq: u64,
        session: Option<String>,
    },
    Ping {
        seq: u64,
    },
}

impl ClientMsg {
    pub fn seq(&self) -> u64 {
        match self {
            ClientMsg::Open { seq, .. }
            | ClientMsg::Attach { seq, .. }
            | ClientMsg::Command { seq, .. }
            | ClientMsg::Close { seq, .. }
            | ClientMsg::Ping { seq } => *seq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Parse,
    InvalidEnvelope,
    UnknownType,
    UnknownKind,
    InvalidPayload,
    Rejected,
    NoSession,
    ResourceLimit,
}

/// Parses one line or text frame.
pub fn parse_client(text: &str) -> Result<ClientMsg, (Option<u64>, ErrorCode, String)> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| (None, ErrorCode::Parse, e.to_string()))?;
    let obj = value.as_object().ok_or((
        None,
        ErrorCode::InvalidEnvelope,
        "message must be a JSON object".to_string(),
    ))?;
    let seq = obj.get("seq").and_then(Value::as_u64);
    let Some(seq) = seq else {
        return Err((
            None,
            ErrorCode::InvalidEnvelope,
            "missing integer `seq`".into(),
        ));
    };
    if let Some(ts) = obj.get("ts") {
        if !ts.is_number() {
            return Err((
                Some(seq),
                ErrorCode::InvalidEnvelope,
                "`ts` must be a number".into(),
            ));
        }
    }
    let kind = obj.get("type").and_then(Value::as_str).ok_or((
        Some(seq),
        ErrorCode::InvalidEnvelope,
        "missing string `type`".to_string(),
    ))?;
    let opt_str = |k: &str| obj.get(k).and_then(Value::as_str).map(str::to_string);
    let opt_f64 = |k: &str| -> Result<Option<f64>, (Option<u64>, ErrorCode, String)> {
        match obj.get(k) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v.as_f64().map(Some).ok_or((
                Some(seq),
                ErrorCode::InvalidPayload,
                format!("`{k}` must be a number"),
            )),
        }
    };
    match kind {
        "open" => Ok(ClientMsg::Open {
            seq,
            config: obj.get("config").cloned().filter(|v| !v.is_null()),
            params: obj.get("params").cloned().filter(|v| !v.is_null()),
            time_scale: opt_f64("time_scale")?,
            telemetry_rate: opt_f64("telemetry_rate")?,
        }),
        "attach" => Ok(ClientMsg::Attach {
            seq,
            session: opt_str("session").ok_or((
                Some(seq),
                ErrorCode::InvalidPayload,
                "attach needs `session`".to_string(),
            ))?,
        }),
        "command" => Ok(ClientMsg::Command {
            seq,
            session: opt_str("session"),
            kind: opt_str("kind").ok_or((
                Some(seq),
                ErrorCode::InvalidPayload,
                "command needs string `kind`".to_string(),
            ))?,
            payload: obj
                .get("payload")
                .cloned()
                .unwrap_or(Value::Object(Map::new())),
        }),
        "close" => Ok(ClientMsg::Close {
            seq,
            session: opt_str("session"),
        }),
        "ping" => Ok(ClientMsg::Ping { seq }),
        other => Err((
            Some(seq),
            ErrorCode::UnknownType,
            format!("unknown message type `{other}`"),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionInfo {
    pub session: String,
    pub time_scale: f64,
    pub telemetry_rate: f64,
    pub control_rate: f64,
    pub paused: bool,
    pub controller: ControllerConfig,
    pub params: RobotParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    LimiterTrip,
    LimiterClear,
    SlipDetected,
    SlipCleared,
    BatteryLow,
    Paused,
    Resumed,
    Reset,
}

/// Server-to-client messages; `seq` and `ts` are added on send.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    SessionInfo {
        reply_to: u64,
        #[serde(flatten)]
        info: SessionInfo,
    },
    Ack {
        reply_to: u64,
        session: String,
        kind: String,
        /// Simulation time at which the command is in force.
        t_effect: f64,
        #[serde(skip_serializing_if = "Value::is_null")]
        result: Value,
    },
    Error {
        reply_to: Option<u64>,
        code: ErrorCode,
        message: String,
    },
    Telemetry {
        session: String,
        frame: TelemetryFrame,
    },
    Event {
        session: String,
        event: EventKind,
        t: f64,
    },
    Heartbeat {
        session: Option<String>,
        t_sim: f64,
        paused: bool,
    },
    Pong {
        reply_to: u64,
    },
    End {
        session: String,
        reason: String,
    },
}

impl ServerMsg {
    pub fn is_telemetry(&self) -> bool {
        matches!(self, ServerMsg::Telemetry { .. })
    }
}

/// A message queued for one connection, with the `ts` it will carry.
#[derive(Clone, Debug, PartialEq)]
pub struct Outgoing {
    pub ts: f64,
    pub msg: ServerMsg,
}

/// JSON text of `out` with envelope fields, without a trailing newline.
pub fn encode(out: &Outgoing, seq: u64) -> String {
    let mut v = serde_json::to_value(&out.msg).expect("server messages serialise");
    if let Value::Object(map) = &mut v {
        map.insert("seq".into(), Value::from(seq));
        map.insert("ts".into(), Value::from(out.ts));
    }
    serde_json::to_string(&v).expect("value serialises")
}

// ---- command payloads ----

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetGains {
    pub gains: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetWeights {
    pub q: Vec<f64>,
    pub r: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetReference {
    pub p_ref: Option<f64>,
    pub theta_ref: Option<f64>,
    pub phi_dot_ref: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeleopVelocity {
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetMode {
    pub mode: ControlMode,
    pub gains: Option<Vec<f64>>,
    #[serde(rename = "Kp_pos")]
    pub kp_pos: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reset {
    pub initial: Option<PlantState>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSimOption {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Empty {}

#[derive(Clone, Debug, PartialEq)]
pub enum SessionCommand {
    SetGains(SetGains),
    SetWeightsAndResynthesize(SetWeights),
    SetReference(SetReference),
    TeleopVelocity(TeleopVelocity),
    SetMode(SetMode),
    Pause,
    Resume,
    Reset(Reset),
    SetSimOption(SetSimOption),
}

pub const COMMAND_KINDS: [&str; 9] = [
    "set_gains",
    "set_weights_and_resynthesize",
    "set_reference",
    "teleop_velocity",
    "set_mode",
    "pause",
    "resume",
    "reset",
    "set_sim_option",
];

impl SessionCommand {
    pub fn parse(kind: &str, payload: &Value) -> Result<SessionCommand, (ErrorCode, String)> {
        fn p<T: serde::de::DeserializeOwned>(
            kind: &str,
            v: &Value,
        ) -> Result<T, (ErrorCode, String)> {
            serde_json::from_value(v.clone())
                .map_err(|e| (ErrorCode::InvalidPayload, format!("{kind}: {e}")))
        }
        let payload = if payload.is_null() {
            &Value::Object(Map::new())
        } else {
            payload
        };
        Ok(match kind {
            "set_gains" => SessionCommand::SetGains(p(kind, payload)?),
            "set_weights_and_resynthesize" => {
                SessionCommand::SetWeightsAndResynthesize(p(kind, payload)?)
            }
            "set_reference" => SessionCommand::SetReference(p(kind, payload)?),
            "teleop_velocity" => SessionCommand::TeleopVelocity(p(kind, payload)?),
            "set_mode" => SessionCommand::SetMode(p(kind, payload)?),
            "pause" => {
                p::<Empty>(kind, payload)?;
                SessionCommand::Pause
            }
            "resume" => {
                p::<Empty>(kind, payload)?;
                SessionCommand::Resume
            }
            "reset" => SessionCommand::Reset(p(kind, payload)?),
            "set_sim_option" => SessionCommand::SetSimOption(p(kind, payload)?),
            other => {
                return Err((
                    ErrorCode::UnknownKind,
                    format!("unknown command kind `{other}`"),
                ))
            }
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SessionCommand::SetGains(_) => "set_gains",
            SessionCommand::SetWeightsAndResynthesize(_) => "set_weights_and_resynthesize",
            SessionCommand::SetReference(_) => "set_reference",
            SessionCommand::TeleopVelocity(_) => "teleop_velocity",
            SessionCommand::SetMode(_) => "set_mode",
            SessionCommand::Pause => "pause",
            SessionCommand::Resume => "resume",
            SessionCommand::Reset(_) => "reset",
            SessionCommand::SetSimOption(_) => "set_sim_option",
        }
    }
}
