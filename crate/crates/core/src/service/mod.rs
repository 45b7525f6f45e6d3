//! Live simulation service. One TCP port carries newline-delimited JSON,
//! WebSocket text frames with the same messages, and plain HTTP for the
//! static UI bundle.

mod outbound;
pub mod protocol;
mod server;
mod session;

pub use outbound::{Outbound, DEFAULT_QUEUE_CAPACITY};
pub use protocol::{
    ClientMsg, ErrorCode, EventKind, Outgoing, ServerMsg, SessionCommand, SessionInfo,
    COMMAND_KINDS,
};
pub use server::{
    Server, ServerConfig, ServerHandle, ServiceError, DEFAULT_MAX_SESSIONS, DEFAULT_PORT,
};
pub use session::{
    Control, SessionHandle, SessionSpec, DEFAULT_TELEMETRY_RATE, HEARTBEAT_PERIOD, MAX_PACING_LAG,
};
