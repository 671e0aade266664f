//! Live teleoperation service: the simulator and safety filter run as a
//! fixed-rate loop that human or scripted drivers steer over a socket.
//!
//! * [`session`]: the authoritative loop state, free of I/O.
//! * [`protocol`]: wire messages and framing.
//! * [`server`]: the async network front end.
//! * [`client`]: a headless client for scripted drivers.
//! * [`log`]: session logs in the simulator's trace format.

pub mod client;
pub mod log;
pub mod protocol;
pub mod server;
pub mod session;

pub use client::BotClient;
pub use protocol::{Frame, Inbound, Outbound, PROTOCOL_VERSION};
pub use server::{start, LoopReport, ServerHandle, ServerOptions, TickMode};
pub use session::{LiveSession, SessionConfig};
