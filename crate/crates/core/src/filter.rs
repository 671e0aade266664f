//! Per-tick safety filter.
//!
//! The driver asks for a roadwheel angle and a torque; these become desired
//! rates by finite differencing over the control period. The filter solves
//!
//! ```text
//! min  1/2 (w_d (dd - dd_d)^2 + w_t (dt - dt_d)^2 + w_e eps^2)
//! s.t. g_delta dd + g_tau dt + eps >= rhs
//! ```
//!
//! which, with one inequality and a diagonal Hessian, has a closed-form
//! solution: either the desired point is feasible, or the answer is its
//! weighted projection onto the constraint hyperplane.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ecbf::{self, BarrierEvaluation, ConstraintRow};
use crate::envelope::EllipseBarrier;
use crate::error::{ParamsError, Result};
use crate::kv::KvDocument;
use crate::vehicle::{VehicleModel, VehicleState};

pub const DEFAULT_DELTA_DOT_MAX: f64 = 10.0;
pub const DEFAULT_TAU_DOT_MAX: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub w_delta: f64,
    pub w_tau: f64,
    pub w_eps: f64,
    /// Control period (s).
    pub dt: f64,
    /// Steering-rate limit (rad/s) applied to the desired rate.
    pub delta_dot_max: Option<f64>,
    /// Torque-rate limit (N m/s) applied to the desired rate.
    pub tau_dot_max: Option<f64>,
    /// Pass driver commands straight through.
    pub bypass: bool,
    pub alpha0: f64,
    pub alpha1: f64,
    /// Record wall-clock solve times. Disable for bitwise-reproducible output.
    pub record_timing: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            w_delta: 1.0,
            w_tau: 1e-6,
            w_eps: 1e3,
            dt: 1e-3,
            delta_dot_max: Some(DEFAULT_DELTA_DOT_MAX),
            tau_dot_max: Some(DEFAULT_TAU_DOT_MAX),
            bypass: false,
            alpha0: ecbf::DEFAULT_ALPHA0,
            alpha1: ecbf::DEFAULT_ALPHA1,
            record_timing: true,
        }
    }
}

const CONFIG_KEYS: [&str; 10] = [
    "w_delta",
    "w_tau",
    "w_eps",
    "dt",
    "delta_dot_max",
    "tau_dot_max",
    "bypass",
    "alpha0",
    "alpha1",
    "record_timing",
];

impl FilterConfig {
    /// Reads a key/value config; absent keys keep their defaults.
    pub fn from_kv(doc: &KvDocument) -> Result<Self, ParamsError> {
        doc.check_keys(&CONFIG_KEYS)?;
        let d = Self::default();
        let cfg = Self {
            w_delta: doc.f64("w_delta")?.unwrap_or(d.w_delta),
            w_tau: doc.f64("w_tau")?.unwrap_or(d.w_tau),
            w_eps: doc.f64("w_eps")?.unwrap_or(d.w_eps),
            dt: doc.f64("dt")?.unwrap_or(d.dt),
            delta_dot_max: doc.optional_limit("delta_dot_max", d.delta_dot_max)?,
            tau_dot_max: doc.optional_limit("tau_dot_max", d.tau_dot_max)?,
            bypass: doc.bool("bypass")?.unwrap_or(d.bypass),
            alpha0: doc.f64("alpha0")?.unwrap_or(d.alpha0),
            alpha1: doc.f64("alpha1")?.unwrap_or(d.alpha1),
            record_timing: doc.bool("record_timing")?.unwrap_or(d.record_timing),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ParamsError> {
        Self::from_kv(&KvDocument::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        Self::from_kv(&KvDocument::load(path)?)
    }

    /// The barrier with this config's pole gains.
    pub fn barrier(&self, ellipse: &EllipseBarrier) -> EllipseBarrier {
        ellipse.with_gains(self.alpha0, self.alpha1)
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        let positive = [
            ("w_delta", self.w_delta),
            ("w_tau", self.w_tau),
            ("w_eps", self.w_eps),
            ("dt", self.dt),
            ("alpha0", self.alpha0),
            ("alpha1", self.alpha1),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ParamsError::Invalid {
                    name,
                    reason: format!("{v} must be strictly positive"),
                });
            }
        }
        for (name, lim) in [("delta_dot_max", self.delta_dot_max), ("tau_dot_max", self.tau_dot_max)] {
            if let Some(v) = lim {
                if !(v > 0.0) {
                    return Err(ParamsError::Invalid {
                        name,
                        reason: format!("{v} must be strictly positive"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// What the driver asks for on one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverCommand {
    /// Desired roadwheel angle (rad).
    pub delta_d: f64,
    /// Desired rear axle torque (N m).
    pub tau_d: f64,
    pub timestamp: f64,
}

impl DriverCommand {
    /// Builds a command from a handwheel angle, clamping to the steering limit.
    pub fn from_handwheel(
        handwheel: f64,
        tau_d: f64,
        timestamp: f64,
        params: &crate::params::VehicleParams,
    ) -> Self {
        let delta_d = params
            .handwheel_to_roadwheel(handwheel)
            .clamp(-params.delta_max, params.delta_max);
        Self { delta_d, tau_d, timestamp }
    }
}

/// Output of one filter tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub delta_dot_cmd: f64,
    pub tau_dot_cmd: f64,
    pub eps: f64,
    pub active: bool,
    pub delta_cmd: f64,
    pub tau_cmd: f64,
    /// Seconds spent assembling and solving (zero when timing is disabled).
    pub solve_time: f64,
    pub row: ConstraintRow,
}

impl FilterDecision {
    /// Equality ignoring wall-clock timing.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self { solve_time: 0.0, ..*self } == Self { solve_time: 0.0, ..*other }
    }
}

/// Finite-difference rates towards the driver's targets, optionally clamped.
pub fn desired_rates(cmd: &DriverCommand, state: &VehicleState, config: &FilterConfig) -> (f64, f64) {
    let mut dd = (cmd.delta_d - state.delta) / config.dt;
    let mut td = (cmd.tau_d - state.tau) / config.dt;
    if let Some(lim) = config.delta_dot_max {
        dd = dd.clamp(-lim, lim);
    }
    if let Some(lim) = config.tau_dot_max {
        td = td.clamp(-lim, lim);
    }
    (dd, td)
}

/// Solution of the filter QP for one constraint row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSolution {
    pub delta_dot: f64,
    pub tau_dot: f64,
    pub eps: f64,
    pub active: bool,
}

impl QpSolution {
    pub fn objective(&self, desired: (f64, f64), config: &FilterConfig) -> f64 {
        qp_objective(
            [self.delta_dot, self.tau_dot, self.eps],
            desired,
            config,
        )
    }
}

/// `1/2 u^T H u + F^T u` for `u = (delta_dot, tau_dot, eps)`.
pub fn qp_objective(u: [f64; 3], desired: (f64, f64), config: &FilterConfig) -> f64 {
    let h = [config.w_delta, config.w_tau, config.w_eps];
    let f = [-config.w_delta * desired.0, -config.w_tau * desired.1, 0.0];
    (0..3).map(|i| 0.5 * h[i] * u[i] * u[i] + f[i] * u[i]).sum()
}

/// Closed-form KKT solution of the single-constraint QP.
pub fn solve_qp(row: &ConstraintRow, desired: (f64, f64), config: &FilterConfig) -> QpSolution {
    let (dd, td) = desired;
    let margin = row.margin(dd, td, 0.0);
    if margin >= 0.0 {
        return QpSolution {
            delta_dot: dd,
            tau_dot: td,
            eps: 0.0,
            active: false,
        };
    }
    let inv_w = [1.0 / config.w_delta, 1.0 / config.w_tau, 1.0 / config.w_eps];
    let n = [row.g_delta, row.g_tau, 1.0];
    let denom: f64 = (0..3).map(|i| n[i] * n[i] * inv_w[i]).sum();
    debug_assert!(denom > 0.0, "slack coefficient keeps the row non-degenerate");
    let lambda = -margin / denom;
    QpSolution {
        delta_dot: dd + lambda * n[0] * inv_w[0],
        tau_dot: td + lambda * n[1] * inv_w[1],
        eps: lambda * n[2] * inv_w[2],
        active: true,
    }
}

/// The QP for given desired rates, assembling the constraint at `state`.
pub fn solve_filter(
    state: &VehicleState,
    desired: (f64, f64),
    ellipse: &EllipseBarrier,
    model: &VehicleModel,
    config: &FilterConfig,
) -> Result<FilterDecision> {
    let start = config.record_timing.then(Instant::now);
    let ellipse = config.barrier(ellipse);
    let row = ecbf::constraint_row(state, &ellipse, model)?;
    let sol = solve_qp(&row, desired, config);
    let solve_time = start.map_or(0.0, |s| s.elapsed().as_secs_f64());
    Ok(decision_from(state, &row, &sol, model, config, solve_time))
}

fn decision_from(
    state: &VehicleState,
    row: &ConstraintRow,
    sol: &QpSolution,
    model: &VehicleModel,
    config: &FilterConfig,
    solve_time: f64,
) -> FilterDecision {
    let dmax = model.params.delta_max;
    FilterDecision {
        delta_dot_cmd: sol.delta_dot,
        tau_dot_cmd: sol.tau_dot,
        eps: sol.eps,
        active: sol.active,
        delta_cmd: (state.delta + sol.delta_dot * config.dt).clamp(-dmax, dmax),
        tau_cmd: state.tau + sol.tau_dot * config.dt,
        solve_time,
        row: *row,
    }
}

/// One full filter tick; also returns the barrier evaluation for diagnostics.
pub fn step_with_barrier(
    cmd: &DriverCommand,
    state: &VehicleState,
    ellipse: &EllipseBarrier,
    model: &VehicleModel,
    config: &FilterConfig,
) -> Result<(FilterDecision, BarrierEvaluation)> {
    let start = config.record_timing.then(Instant::now);
    let ellipse = config.barrier(ellipse);
    let ev = ecbf::evaluate(state, &ellipse, model)?;
    let (p0, p1) = ellipse.poly_coefficients();
    let row = ConstraintRow::from_evaluation(&ev, p0, p1);
    let desired = desired_rates(cmd, state, config);
    if config.bypass {
        let solve_time = start.map_or(0.0, |s| s.elapsed().as_secs_f64());
        let decision = FilterDecision {
            delta_dot_cmd: desired.0,
            tau_dot_cmd: desired.1,
            eps: 0.0,
            active: false,
            delta_cmd: cmd.delta_d,
            tau_cmd: cmd.tau_d,
            solve_time,
            row,
        };
        return Ok((decision, ev));
    }
    let sol = solve_qp(&row, desired, config);
    let solve_time = start.map_or(0.0, |s| s.elapsed().as_secs_f64());
    Ok((decision_from(state, &row, &sol, model, config, solve_time), ev))
}

/// Desired rates, constraint assembly, QP and integration back to angle and
/// torque commands.
pub fn step(
    cmd: &DriverCommand,
    state: &VehicleState,
    ellipse: &EllipseBarrier,
    model: &VehicleModel,
    config: &FilterConfig,
) -> Result<FilterDecision> {
    step_with_barrier(cmd, state, ellipse, model, config).map(|(d, _)| d)
}
