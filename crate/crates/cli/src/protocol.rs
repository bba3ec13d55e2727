//! Operator protocol: JSON text frames over a websocket.

use sandbot_core::autonomy::{CorrectionInput, CorrectionMode};
use sandbot_core::driver::DriverInput;
use sandbot_core::perception::PoseNudge;
use sandbot_core::session::{OperatorAction, SessionSnapshot};
use sandbot_core::task::{MarkerSet, NominalParameters};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::render::ViewFrame;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    PhaseAction { action: OperatorAction },
    MarkerUpdate { markers: MarkerSet },
    ParameterUpdate { parameters: NominalParameters },
    /// Latest gamepad state; components must lie in [-1, 1].
    CorrectionStream { input: CorrectionInput },
    PoseNudge { nudge: PoseNudge },
    RequestSnapshot,
    RequestView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ClientEnvelope {
    pub protocol_version: u32,
    pub session_id: String,
    /// Strictly increasing per connection.
    pub seq: u64,
    pub message: ClientMessage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    StateSnapshot {
        /// Execution-loop step the snapshot was taken after.
        step: u64,
        snapshot: Box<SessionSnapshot>,
    },
    ViewFrame {
        step: u64,
        frame: Box<ViewFrame>,
    },
    Error {
        code: ErrorCode,
        message: String,
        /// Client seq of the offending message, when it parsed that far.
        in_reply_to: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    ProtocolVersion,
    WrongSession,
    OutOfOrder,
    OutOfRange,
    Rejected,
    Busy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ServerEnvelope {
    pub protocol_version: u32,
    pub session_id: String,
    /// Strictly increasing over everything the server sends on a connection.
    pub seq: u64,
    pub message: ServerMessage,
}

/// Operator protocol, version 1: clients send `client` frames, the server
/// answers with `server` frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ProtocolSchema {
    pub client: ClientEnvelope,
    pub server: ServerEnvelope,
}

pub fn schema_json() -> String {
    serde_json::to_string_pretty(&schemars::schema_for!(ProtocolSchema)).expect("schema serialises")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolViolation {
    pub code: ErrorCode,
    pub message: String,
    pub in_reply_to: Option<u64>,
}

impl ProtocolViolation {
    pub fn into_message(self) -> ServerMessage {
        ServerMessage::Error { code: self.code, message: self.message, in_reply_to: self.in_reply_to }
    }
}

fn violation(code: ErrorCode, message: impl Into<String>, seq: Option<u64>) -> ProtocolViolation {
    ProtocolViolation { code, message: message.into(), in_reply_to: seq }
}

fn in_unit(v: f64) -> bool {
    (-1.0..=1.0).contains(&v)
}

/// Per-connection checks: parse, version, session, ordering and ranges.
#[derive(Debug)]
pub struct InboundValidator {
    session_id: String,
    last_seq: Option<u64>,
}

impl InboundValidator {
    pub fn new(session_id: impl Into<String>) -> Self {
        InboundValidator { session_id: session_id.into(), last_seq: None }
    }

    pub fn check(&mut self, text: &str) -> Result<ClientEnvelope, ProtocolViolation> {
        let env: ClientEnvelope =
            serde_json::from_str(text).map_err(|e| violation(ErrorCode::Malformed, e.to_string(), None))?;
        let seq = Some(env.seq);
        if env.protocol_version != PROTOCOL_VERSION {
            return Err(violation(
                ErrorCode::ProtocolVersion,
                format!("protocol_version {} unsupported, server speaks {PROTOCOL_VERSION}", env.protocol_version),
                seq,
            ));
        }
        if env.session_id != self.session_id {
            return Err(violation(ErrorCode::WrongSession, format!("unknown session '{}'", env.session_id), seq));
        }
        if self.last_seq.is_some_and(|last| env.seq <= last) {
            return Err(violation(ErrorCode::OutOfOrder, format!("seq {} not above {}", env.seq, self.last_seq.unwrap()), seq));
        }
        if let ClientMessage::CorrectionStream { input } = &env.message {
            let ok = match input.mode {
                CorrectionMode::Coupled { u } => in_unit(u),
                CorrectionMode::Independent { axes } => axes.iter().all(|a| in_unit(*a)),
            };
            if !ok {
                return Err(violation(ErrorCode::OutOfRange, "correction components must lie in [-1, 1]", seq));
            }
        }
        self.last_seq = Some(env.seq);
        Ok(env)
    }
}

/// What the execution loop should do with a client message.
pub fn driver_input(env: &ClientEnvelope) -> Option<DriverInput> {
    let action = |action| Some(DriverInput::Action { action });
    match &env.message {
        ClientMessage::PhaseAction { action: a } => action(a.clone()),
        ClientMessage::MarkerUpdate { markers } => action(OperatorAction::SetMarkers { markers: *markers }),
        ClientMessage::ParameterUpdate { parameters } => {
            action(OperatorAction::SetParameters { parameters: *parameters })
        }
        ClientMessage::PoseNudge { nudge } => action(OperatorAction::NudgePose { nudge: *nudge }),
        ClientMessage::CorrectionStream { input } => Some(DriverInput::Correction { input: *input, seq: Some(env.seq) }),
        ClientMessage::RequestSnapshot | ClientMessage::RequestView => None,
    }
}
