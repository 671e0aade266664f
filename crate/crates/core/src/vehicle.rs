//! Single-track vehicle dynamics with a saturating cubic tire model.
//!
//! State ordering is `[r, beta, V, delta, tau]` and the input is the rate pair
//! `[delta_dot, tau_dot]`, giving a control-affine system `f(x) + g(x) u`
//! where `g` simply routes the rates into the two actuator states.

use nalgebra::{Matrix3, Matrix3x2};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::VehicleParams;

/// Default speed floor below which the slip kinematics are singular.
pub const DEFAULT_V_MIN: f64 = 0.1;
/// Width of the band below the sliding slip angle where the saturated
/// (zero) slope is used.
pub const DEFAULT_KINK_TOL: f64 = 1e-9;
/// Fraction of the friction limit that clamped longitudinal force may reach.
const CAPACITY_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    /// Yaw rate (rad/s).
    pub r: f64,
    /// Sideslip at the centre of mass (rad).
    pub beta: f64,
    /// Speed of the centre of mass (m/s).
    #[serde(rename = "V")]
    pub v: f64,
    /// Roadwheel angle (rad).
    pub delta: f64,
    /// Rear axle torque (N m).
    pub tau: f64,
}

impl VehicleState {
    pub fn new(r: f64, beta: f64, v: f64, delta: f64, tau: f64) -> Self {
        Self { r, beta, v, delta, tau }
    }

    /// Straight-line driving at `speed`.
    pub fn straight(speed: f64) -> Self {
        Self::new(0.0, 0.0, speed, 0.0, 0.0)
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.r, self.beta, self.v, self.delta, self.tau]
    }

    pub fn from_array(x: [f64; 5]) -> Self {
        Self::new(x[0], x[1], x[2], x[3], x[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RateInput {
    pub delta_dot: f64,
    pub tau_dot: f64,
}

impl RateInput {
    pub const ZERO: Self = Self { delta_dot: 0.0, tau_dot: 0.0 };

    pub fn new(delta_dot: f64, tau_dot: f64) -> Self {
        Self { delta_dot, tau_dot }
    }
}

/// Snapshot of both axles' tire quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TireState {
    pub alpha_f: f64,
    pub alpha_r: f64,
    pub fyf: f64,
    pub fyr: f64,
    pub fxf: f64,
    pub fxr: f64,
    pub fzf: f64,
    pub fzr: f64,
    pub alpha_sl_f: f64,
    pub alpha_sl_r: f64,
    pub fy_max_f: f64,
    pub fy_max_r: f64,
}

/// Static weight distribution: `(Fzf, Fzr)`.
pub fn normal_forces(params: &VehicleParams) -> (f64, f64) {
    let weight = params.m * params.g;
    let l = params.wheelbase();
    (weight * params.b / l, weight * params.a / l)
}

/// Rear-wheel drive: `(Fxf, Fxr) = (0, tau / rw)`.
pub fn longitudinal_forces(tau: f64, params: &VehicleParams) -> (f64, f64) {
    (0.0, tau / params.rw)
}

/// Front and rear slip angles, `(alpha_f, alpha_r)`.
pub fn slip_angles(state: &VehicleState, params: &VehicleParams) -> Result<(f64, f64)> {
    check_speed(state.v, DEFAULT_V_MIN)?;
    Ok(slip_pair(state, params))
}

fn slip_pair(state: &VehicleState, params: &VehicleParams) -> (f64, f64) {
    let (sb, cb) = state.beta.sin_cos();
    let vx = state.v * cb;
    let vy = state.v * sb;
    let alpha_f = ((vy + params.a * state.r) / vx).atan() - state.delta;
    let alpha_r = ((vy - params.b * state.r) / vx).atan();
    (alpha_f, alpha_r)
}

/// Lateral capacity `sqrt((mu Fz)^2 - gamma Fx^2)`.
pub fn lateral_capacity(fz: f64, fx: f64, params: &VehicleParams) -> Result<f64> {
    let grip = params.mu * fz;
    let rem = grip * grip - params.gamma * fx * fx;
    if rem <= 0.0 {
        return Err(ModelError::CapacityExceeded { fx, limit: grip });
    }
    Ok(rem.sqrt())
}

/// Sliding-onset slip angle `atan(3 Fy_max / Cc)`.
pub fn sliding_slip_angle(fy_max: f64, cc: f64) -> f64 {
    (3.0 * fy_max / cc).atan()
}

/// Lateral tire force for slip angle `alpha`.
///
/// The force opposes the slip: a cubic in `tan(alpha)` below the sliding
/// angle, saturated at `-Fy_max sgn(alpha)` at and beyond it.
pub fn lateral_force(alpha: f64, fz: f64, fx: f64, cc: f64, params: &VehicleParams) -> Result<f64> {
    let fy_max = lateral_capacity(fz, fx, params)?;
    Ok(tire_curve(alpha, fy_max, cc, 0.0).force)
}

#[derive(Debug, Clone, Copy)]
struct TireCurve {
    force: f64,
    /// dFy/dalpha
    d_alpha: f64,
    /// dFy/dFy_max at fixed alpha
    d_capacity: f64,
    alpha_sl: f64,
}

fn tire_curve(alpha: f64, fy_max: f64, cc: f64, kink_tol: f64) -> TireCurve {
    let alpha_sl = sliding_slip_angle(fy_max, cc);
    let sign = alpha.signum();
    let saturated = TireCurve {
        force: -fy_max * sign,
        d_alpha: 0.0,
        d_capacity: -sign,
        alpha_sl,
    };
    if alpha == 0.0 {
        return TireCurve {
            force: 0.0,
            d_alpha: -cc,
            d_capacity: 0.0,
            alpha_sl,
        };
    }
    if alpha.abs() >= alpha_sl {
        return saturated;
    }
    let t = alpha.tan();
    let ta = t.abs();
    let k1 = cc * cc / (3.0 * fy_max);
    let k2 = cc * cc * cc / (27.0 * fy_max * fy_max);
    let force = -cc * t + k1 * ta * t - k2 * t * t * t;
    if alpha.abs() >= alpha_sl - kink_tol {
        return TireCurve { force, ..saturated };
    }
    let d_t = -cc + 2.0 * k1 * ta - 3.0 * k2 * t * t;
    let sec2 = 1.0 + t * t;
    TireCurve {
        force,
        d_alpha: d_t * sec2,
        d_capacity: -k1 * ta * t / fy_max + 2.0 * k2 * t * t * t / fy_max,
        alpha_sl,
    }
}

fn check_speed(v: f64, floor: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(ModelError::NonFinite("speed"));
    }
    if v <= floor {
        return Err(ModelError::SingularSpeed { speed: v, floor });
    }
    Ok(())
}

/// What to do when the commanded longitudinal force leaves no lateral capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CapacityPolicy {
    /// Report [`ModelError::CapacityExceeded`].
    #[default]
    Strict,
    /// Clamp |Fx| just under the friction limit.
    Clamp,
}

/// Partial derivatives of `(r_dot, beta_dot, V_dot)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityJacobian {
    /// Columns `(r, beta, V)`.
    pub wrt_state: Matrix3<f64>,
    /// Columns `(delta, tau)`.
    pub wrt_actuators: Matrix3x2<f64>,
}

/// The vehicle model together with its numerical options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleModel {
    pub params: VehicleParams,
    pub v_min: f64,
    pub kink_tol: f64,
    pub capacity: CapacityPolicy,
}

impl VehicleModel {
    pub fn new(params: VehicleParams) -> Self {
        Self {
            params,
            v_min: DEFAULT_V_MIN,
            kink_tol: DEFAULT_KINK_TOL,
            capacity: CapacityPolicy::Strict,
        }
    }

    /// Model configured the way the simulator drives it (clamped capacity).
    pub fn for_simulation(params: VehicleParams) -> Self {
        Self {
            capacity: CapacityPolicy::Clamp,
            ..Self::new(params)
        }
    }

    pub fn with_capacity(mut self, capacity: CapacityPolicy) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn tire_state(&self, state: &VehicleState) -> Result<TireState> {
        let ev = self.evaluate(state)?;
        Ok(TireState {
            alpha_f: ev.front.alpha,
            alpha_r: ev.rear.alpha,
            fyf: ev.front.fy,
            fyr: ev.rear.fy,
            fxf: ev.front.fx,
            fxr: ev.rear.fx,
            fzf: ev.front.fz,
            fzr: ev.rear.fz,
            alpha_sl_f: ev.front.alpha_sl,
            alpha_sl_r: ev.rear.alpha_sl,
            fy_max_f: ev.front.fy_max,
            fy_max_r: ev.rear.fy_max,
        })
    }

    /// `f(x) + g(x) u`.
    pub fn state_derivative(&self, state: &VehicleState, input: &RateInput) -> Result<[f64; 5]> {
        let [r_dot, beta_dot, v_dot] = self.velocity_derivative(state)?;
        Ok([r_dot, beta_dot, v_dot, input.delta_dot, input.tau_dot])
    }

    /// The first three rows of `f(x)`; the actuator rows are zero.
    pub fn velocity_derivative(&self, state: &VehicleState) -> Result<[f64; 3]> {
        let ev = self.evaluate(state)?;
        Ok(ev.rates())
    }

    /// `(r_dot, beta_dot)` with speed held fixed, for phase-plane work.
    pub fn planar_derivative(&self, state: &VehicleState) -> Result<[f64; 2]> {
        let [r_dot, beta_dot, _] = self.velocity_derivative(state)?;
        Ok([r_dot, beta_dot])
    }

    pub fn velocity_jacobian(&self, state: &VehicleState) -> Result<VelocityJacobian> {
        Ok(self.evaluate(state)?.jacobian())
    }

    /// Rates and Jacobian from one tire evaluation.
    pub fn rates_and_jacobian(&self, state: &VehicleState) -> Result<([f64; 3], VelocityJacobian)> {
        let ev = self.evaluate(state)?;
        Ok((ev.rates(), ev.jacobian()))
    }

    fn evaluate(&self, state: &VehicleState) -> Result<Evaluation> {
        if !state.is_finite() {
            return Err(ModelError::NonFinite("state"));
        }
        check_speed(state.v, self.v_min)?;
        let p = &self.params;
        let (fzf, fzr) = normal_forces(p);
        let (sb, cb) = state.beta.sin_cos();
        let vx = state.v * cb;
        let vy = state.v * sb;

        // Slip angle gradients w.r.t. (r, beta, V, delta, tau).
        let slip = |arm: f64| {
            let y = vy + arm * state.r;
            let den = vx * vx + y * y;
            let alpha = (y / vx).atan();
            let grad = [
                arm * vx / den,
                (vx * vx + y * vy) / den,
                (vx * sb - y * cb) / den,
                0.0,
                0.0,
            ];
            (alpha, grad)
        };
        let (alpha_f, mut d_alpha_f) = slip(p.a);
        let alpha_f = alpha_f - state.delta;
        d_alpha_f[3] = -1.0;
        let (alpha_r, d_alpha_r) = slip(-p.b);

        let (fxf, _) = longitudinal_forces(state.tau, p);
        let front = self.axle(alpha_f, d_alpha_f, fzf, fxf, [0.0; 5], p.cc_front)?;

        let (_, mut fxr) = longitudinal_forces(state.tau, p);
        let mut d_fxr = [0.0, 0.0, 0.0, 0.0, 1.0 / p.rw];
        if self.capacity == CapacityPolicy::Clamp {
            let limit = p.mu * fzr * (1.0 - CAPACITY_MARGIN) / p.gamma.sqrt();
            if fxr.abs() > limit {
                fxr = limit.copysign(fxr);
                d_fxr = [0.0; 5];
            }
        }
        let rear = self.axle(alpha_r, d_alpha_r, fzr, fxr, d_fxr, p.cc_rear)?;

        Ok(Evaluation {
            params: *p,
            state: *state,
            front,
            rear,
        })
    }

    fn axle(
        &self,
        alpha: f64,
        d_alpha: [f64; 5],
        fz: f64,
        fx: f64,
        d_fx: [f64; 5],
        cc: f64,
    ) -> Result<Axle> {
        let fy_max = lateral_capacity(fz, fx, &self.params)?;
        let curve = tire_curve(alpha, fy_max, cc, self.kink_tol);
        let d_cap_d_fx = -self.params.gamma * fx / fy_max;
        let mut d_fy = [0.0; 5];
        for (k, d) in d_fy.iter_mut().enumerate() {
            *d = curve.d_alpha * d_alpha[k] + curve.d_capacity * d_cap_d_fx * d_fx[k];
        }
        Ok(Axle {
            alpha,
            alpha_sl: curve.alpha_sl,
            fx,
            fy: curve.force,
            fz,
            fy_max,
            d_fx,
            d_fy,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Axle {
    alpha: f64,
    alpha_sl: f64,
    fx: f64,
    fy: f64,
    fz: f64,
    fy_max: f64,
    d_fx: [f64; 5],
    d_fy: [f64; 5],
}

struct Evaluation {
    params: VehicleParams,
    state: VehicleState,
    front: Axle,
    rear: Axle,
}

const R: usize = 0;
const BETA: usize = 1;
const V: usize = 2;
const DELTA: usize = 3;

impl Evaluation {
    fn trig(&self) -> (f64, f64, f64, f64, f64, f64) {
        let (sd, cd) = self.state.delta.sin_cos();
        let (sdb, cdb) = (self.state.delta - self.state.beta).sin_cos();
        let (sb, cb) = self.state.beta.sin_cos();
        (sd, cd, sdb, cdb, sb, cb)
    }

    /// Numerators of the lateral and longitudinal balances.
    fn balances(&self) -> (f64, f64) {
        let (_, _, sdb, cdb, sb, cb) = self.trig();
        let (f, r) = (&self.front, &self.rear);
        let lateral = f.fx * sdb + f.fy * cdb - r.fx * sb + r.fy * cb;
        let longitudinal = f.fx * cdb - f.fy * sdb + r.fx * cb + r.fy * sb;
        (lateral, longitudinal)
    }

    fn rates(&self) -> [f64; 3] {
        let p = &self.params;
        let (sd, cd, ..) = self.trig();
        let (f, r) = (&self.front, &self.rear);
        let (lateral, longitudinal) = self.balances();
        let r_dot = (p.a * (f.fx * sd + f.fy * cd) - p.b * r.fy) / p.iz;
        let beta_dot = lateral / (p.m * self.state.v) - self.state.r;
        let v_dot = longitudinal / p.m;
        [r_dot, beta_dot, v_dot]
    }

    fn jacobian(&self) -> VelocityJacobian {
        let p = &self.params;
        let v = self.state.v;
        let (sd, cd, sdb, cdb, sb, cb) = self.trig();
        let (f, r) = (&self.front, &self.rear);
        let (lateral, longitudinal) = self.balances();

        let mut d_r_dot = [0.0; 5];
        let mut d_beta_dot = [0.0; 5];
        let mut d_v_dot = [0.0; 5];
        for k in 0..5 {
            let yaw = p.a * (f.d_fx[k] * sd + f.d_fy[k] * cd) - p.b * r.d_fy[k];
            let mut lat = f.d_fx[k] * sdb + f.d_fy[k] * cdb - r.d_fx[k] * sb + r.d_fy[k] * cb;
            let mut lon = f.d_fx[k] * cdb - f.d_fy[k] * sdb + r.d_fx[k] * cb + r.d_fy[k] * sb;
            let mut yaw_explicit = 0.0;
            match k {
                BETA => {
                    lat -= longitudinal;
                    lon += lateral;
                }
                DELTA => {
                    yaw_explicit = p.a * (f.fx * cd - f.fy * sd);
                    lat += f.fx * cdb - f.fy * sdb;
                    lon -= f.fx * sdb + f.fy * cdb;
                }
                _ => {}
            }
            d_r_dot[k] = (yaw + yaw_explicit) / p.iz;
            d_beta_dot[k] = lat / (p.m * v);
            d_v_dot[k] = lon / p.m;
        }
        d_beta_dot[R] -= 1.0;
        d_beta_dot[V] -= lateral / (p.m * v * v);

        let rows = [d_r_dot, d_beta_dot, d_v_dot];
        VelocityJacobian {
            wrt_state: Matrix3::from_fn(|i, j| rows[i][j]),
            wrt_actuators: Matrix3x2::from_fn(|i, j| rows[i][j + 3]),
        }
    }
}
