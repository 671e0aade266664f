//! Shared-control safety toolkit for a single-track vehicle at the handling limit.
//!
//! The crate is organised bottom-up:
//!
//! * [`params`] and [`vehicle`]: physical parameters, tire model and the
//!   control-affine dynamics with analytic Jacobians.
//! * [`envelope`]: recoverability envelope tracing in the sideslip/yaw-rate
//!   plane and the inscribed ellipse used as the safe set.
//! * [`ecbf`]: the ellipse barrier, its Lie derivatives and the exponential
//!   CBF coefficient machinery.
//! * [`filter`]: the per-tick QP that minimally modifies driver rates.
//! * [`sim`]: fixed-step closed-loop simulation, scripted scenarios and
//!   drift equilibria.

pub mod ecbf;
pub mod envelope;
pub mod error;
pub mod filter;
pub mod kv;
pub mod params;
pub mod sim;
pub mod trace;
pub mod vehicle;

pub use ecbf::{BarrierEvaluation, ConstraintRow, EcbfCompanion};
pub use envelope::{EllipseBarrier, EnvelopeArtifact, EnvelopeTrace, SteerSign};
pub use error::{ModelError, ParamsError};
pub use filter::{DriverCommand, FilterConfig, FilterDecision};
pub use params::VehicleParams;
pub use sim::{Scenario, TraceRecord};
pub use vehicle::{CapacityPolicy, RateInput, TireState, VehicleModel, VehicleState};
