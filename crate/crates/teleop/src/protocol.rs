//! Wire messages.
//!
//! Every message is a JSON object with a `kind` field, sent as one frame
//! prefixed by its byte length as a big-endian `u32`.

use bytes::Bytes;
use driftsafe_core::{EllipseBarrier, VehicleState};
use serde::{Deserialize, Serialize};
use tokio_util::codec::LengthDelimitedCodec;

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on a single frame.
pub const MAX_FRAME_BYTES: usize = 64 * 1024;

pub fn codec() -> LengthDelimitedCodec {
    LengthDelimitedCodec::builder()
        .length_field_length(4)
        .big_endian()
        .max_frame_length(MAX_FRAME_BYTES)
        .new_codec()
}

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Inbound {
    Command {
        /// Handwheel angle (rad).
        handwheel: f64,
        /// Rear axle torque request (N m).
        torque: f64,
        client_time_ms: f64,
    },
    SetBypass {
        bypass: bool,
    },
    Reset {
        #[serde(default)]
        state: Option<VehicleState>,
    },
    LoadScenario {
        name: String,
    },
}

/// Ellipse coefficients of the safe set `d - (a beta^2 + b beta r + c r^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl From<&EllipseBarrier> for EnvelopeCoefficients {
    fn from(e: &EllipseBarrier) -> Self {
        Self { a: e.a, b: e.b, c: e.c, d: e.d }
    }
}

/// One control tick as seen by clients. Vehicle fields describe the state
/// at the end of the tick; command and filter fields describe what was
/// applied during it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub tick: u64,
    /// Simulation time at the end of the tick (s).
    pub t: f64,
    pub r: f64,
    pub beta: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub delta: f64,
    pub tau: f64,
    /// Display-only pose (m, m, rad).
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Handwheel angle as applied, after clamping (rad).
    pub handwheel: f64,
    /// Torque request as applied, after any stale-command decay (N m).
    pub torque: f64,
    /// Timestamp of the client command in force, if any arrived yet.
    pub client_time_ms: Option<f64>,
    pub delta_d: f64,
    pub tau_d: f64,
    pub delta_cmd: f64,
    pub tau_cmd: f64,
    pub delta_dot_cmd: f64,
    pub tau_dot_cmd: f64,
    pub eps: f64,
    pub active: bool,
    /// Filter solve time of the last substep (s).
    pub solve_time: f64,
    pub bypass: bool,
    pub h: f64,
    pub nu1: f64,
    /// Present on the first frame of a session and whenever the set changes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<EnvelopeCoefficients>,
}

impl Frame {
    pub fn state(&self) -> VehicleState {
        VehicleState::new(self.r, self.beta, self.v, self.delta, self.tau)
    }
}

/// Server to client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outbound {
    Hello {
        protocol: u32,
        /// Control ticks per second.
        rate_hz: f64,
        /// Integration step (s).
        dt: f64,
        scenario: String,
        bypass: bool,
        handwheel_limit: f64,
        envelope: EnvelopeCoefficients,
    },
    Frame(Frame),
    Fault {
        tick: u64,
        t: f64,
        reason: String,
        /// State the vehicle was reset to.
        reset_state: VehicleState,
    },
    Error {
        message: String,
    },
}

impl Outbound {
    pub fn encode(&self) -> Bytes {
        Bytes::from(serde_json::to_vec(self).expect("outbound messages serialise"))
    }

    pub fn decode(bytes: &[u8]) -> serde_json::Result<Self> {
        serde_json::from_slice(bytes)
    }
}

impl Inbound {
    pub fn encode(&self) -> Bytes {
        Bytes::from(serde_json::to_vec(self).expect("inbound messages serialise"))
    }

    pub fn decode(bytes: &[u8]) -> serde_json::Result<Self> {
        serde_json::from_slice(bytes)
    }
}
