//! JSON wire format shared with the browser cockpit.
//!
//! Every message is an object `{"version": 1, "type": ..., "payload": ...}`.
//! `type` is one of `input` (client to server), `telemetry` (server to
//! client) or `control` (both ways). A message without a `version` field, or
//! with a version other than [`PROTOCOL_VERSION`], is rejected.

use geoshield::telemetry::TelemetryRow;
use geoshield::{GeofenceBox, QuadCommand};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub version: u32,
    #[serde(flatten)]
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum Message {
    Input(PilotInputMsg),
    Telemetry(TelemetryFrame),
    Control(Control),
}

/// One stick sample. Rates are normalized to `[-1, 1]` and scaled by the
/// vehicle's rate limit on arrival; throttle is raw in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotInputMsg {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub throttle: f64,
    pub roll_rate: f64,
    pub pitch_rate: f64,
    pub yaw_rate: f64,
}

impl PilotInputMsg {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(0.0..=1.0).contains(&self.throttle) {
            return Err(ProtocolError::Malformed(format!(
                "throttle {} outside [0, 1]",
                self.throttle
            )));
        }
        for (name, v) in [
            ("roll_rate", self.roll_rate),
            ("pitch_rate", self.pitch_rate),
            ("yaw_rate", self.yaw_rate),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(ProtocolError::Malformed(format!(
                    "{name} {v} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn to_command(&self, rate_limit: f64) -> QuadCommand {
        QuadCommand::new(
            self.throttle,
            Vector3::new(self.roll_rate, self.pitch_rate, self.yaw_rate) * rate_limit,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandWire {
    pub throttle: f64,
    /// Body rates, rad/s.
    pub rates: [f64; 3],
}

impl From<&QuadCommand> for CommandWire {
    fn from(u: &QuadCommand) -> Self {
        Self {
            throttle: u.throttle,
            rates: u.rates.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeofenceDescriptor {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
}

impl From<&GeofenceBox> for GeofenceDescriptor {
    fn from(b: &GeofenceBox) -> Self {
        Self {
            center: b.center.into(),
            half_extents: b.half_extents.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Armed,
    Flying,
    ViolatedHalt,
}

/// Decimated snapshot of the control loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    /// Frame counter within the session; gaps mean frames were superseded
    /// before the client read them.
    pub seq: u64,
    /// Control-loop tick the frame was taken at.
    pub tick: u64,
    pub phase: Phase,
    pub t: f64,
    pub position: [f64; 3],
    /// `[w, x, y, z]`.
    pub quaternion: [f64; 4],
    pub velocity: [f64; 3],
    pub h_i: f64,
    pub lambda: f64,
    pub v_perp: f64,
    pub u_des: CommandWire,
    pub u_cmd: CommandWire,
    /// Present on the first frame a client receives and whenever the box
    /// changes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geofence: Option<GeofenceDescriptor>,
    /// Milliseconds since the last accepted stick message, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_age_ms: Option<f64>,
}

impl TelemetryFrame {
    pub fn from_row(seq: u64, tick: u64, phase: Phase, row: &TelemetryRow) -> Self {
        let q = &row.state.attitude;
        Self {
            seq,
            tick,
            phase,
            t: row.t,
            position: row.state.position.into(),
            quaternion: [q.w, q.i, q.j, q.k],
            velocity: row.state.velocity.into(),
            // JSON has no infinities; a diverged rollout reports -inf.
            h_i: row.h_i.clamp(-f64::MAX, f64::MAX),
            lambda: row.lambda,
            v_perp: row.v_perp,
            u_des: (&row.u_des).into(),
            u_cmd: (&row.u_cmd).into(),
            geofence: None,
            input_age_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub phase: Phase,
    pub scenario: Option<String>,
    pub accepted_inputs: u64,
    pub stale_inputs: u64,
    pub malformed_inputs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Control {
    /// Client: load a scenario and arm at its initial state.
    Start { scenario: String },
    /// Client: leave `armed` and start integrating.
    Launch,
    /// Client: end the session.
    Stop,
    /// Server: phase change or reply to a control command.
    Status(SessionStatus),
    /// Server: a command was refused.
    Error {
        message: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        available: Vec<String>,
    },
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProtocolError {
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("message has no version field")]
    MissingVersion,
    #[error("protocol version {0} is not supported (expected {PROTOCOL_VERSION})")]
    UnsupportedVersion(u64),
    #[error("malformed message: {0}")]
    Malformed(String),
}

pub fn encode(message: &Message) -> String {
    serde_json::to_string(&Envelope {
        version: PROTOCOL_VERSION,
        message: message.clone(),
    })
    .expect("wire types always serialize")
}

/// Parse and validate one text frame.
pub fn decode(text: &str) -> Result<Message, ProtocolError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ProtocolError::Json(e.to_string()))?;
    let version = value
        .get("version")
        .ok_or(ProtocolError::MissingVersion)?
        .as_u64()
        .ok_or_else(|| ProtocolError::Malformed("version must be an unsigned integer".into()))?;
    if version != u64::from(PROTOCOL_VERSION) {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    let envelope: Envelope =
        serde_json::from_value(value).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    if let Message::Input(msg) = &envelope.message {
        msg.validate()?;
    }
    Ok(envelope.message)
}
