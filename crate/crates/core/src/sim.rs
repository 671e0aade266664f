//! Fixed-step closed-loop simulation, scripted scenarios and drift equilibria.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ecbf::BarrierEvaluation;
use crate::envelope::EllipseBarrier;
use crate::error::{ModelError, ParamsError, Result};
use crate::filter::{self, DriverCommand, FilterConfig, FilterDecision};
use crate::params::VehicleParams;
use crate::vehicle::{RateInput, VehicleModel, VehicleState};

pub const DEFAULT_H_TOL: f64 = 0.02;
pub const SPIN_OUT_BETA: f64 = FRAC_PI_2;
pub const DEFAULT_SPEED: f64 = 7.0;
pub const DEFAULT_SEED: u64 = 0x5eed;

/// One classical Runge-Kutta step. The actuator channels have constant rates,
/// so they are advanced exactly as `x + u dt`.
pub fn integrate_rk4(
    state: &VehicleState,
    input: &RateInput,
    model: &VehicleModel,
    dt: f64,
) -> Result<VehicleState> {
    let x = state.to_array();
    let f = |x: [f64; 5]| model.state_derivative(&VehicleState::from_array(x), input);
    let offset = |k: &[f64; 5], s: f64| {
        let mut y = x;
        for i in 0..5 {
            y[i] += s * k[i];
        }
        y
    };
    let k1 = f(x)?;
    let k2 = f(offset(&k1, 0.5 * dt))?;
    let k3 = f(offset(&k2, 0.5 * dt))?;
    let k4 = f(offset(&k3, dt))?;
    let mut y = x;
    for i in 0..3 {
        y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    y[3] = x[3] + input.delta_dot * dt;
    y[4] = x[4] + input.tau_dot * dt;
    let next = VehicleState::from_array(y);
    if !next.is_finite() {
        return Err(ModelError::NonFinite("rk4 step"));
    }
    Ok(next)
}

/// A steady drift: all three velocity rates vanish under constant inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftEquilibrium {
    pub state: VehicleState,
    pub delta: f64,
    pub tau: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl DriftEquilibrium {
    /// Eigenvalues of the frozen-speed `(r, beta)` Jacobian.
    pub fn planar_eigenvalues(&self, model: &VehicleModel) -> Result<[(f64, f64); 2]> {
        let j = model.velocity_jacobian(&self.state)?.wrt_state;
        let m = Matrix2::new(j[(0, 0)], j[(0, 1)], j[(1, 0)], j[(1, 1)]);
        let ev = m.complex_eigenvalues();
        Ok([(ev[0].re, ev[0].im), (ev[1].re, ev[1].im)])
    }

    pub fn is_open_loop_unstable(&self, model: &VehicleModel) -> Result<bool> {
        Ok(self.planar_eigenvalues(model)?.iter().any(|(re, _)| *re > 0.0))
    }
}

const EQ_TOL: f64 = 1e-8;
const EQ_MAX_ITER: usize = 100;
const EQ_RESTARTS: usize = 5;

/// Newton's method on `(r_dot, beta_dot, V_dot) = 0` over `(r, delta, tau)`
/// with `beta` and `V` held fixed.
pub fn find_drift_equilibrium(
    target_beta: f64,
    speed: f64,
    model: &VehicleModel,
    seed: u64,
) -> Result<DriftEquilibrium> {
    if !(speed.is_finite() && speed > model.v_min) || !target_beta.is_finite() {
        return Err(ModelError::NoConvergence(format!(
            "invalid target beta={target_beta} V={speed}"
        )));
    }
    let p = &model.params;
    let side = -target_beta.signum();
    let r_ss = p.mu * p.g / speed;
    let (_, fzr) = crate::vehicle::normal_forces(p);
    let tau_cap = p.mu * fzr * p.rw / p.gamma.sqrt();
    let mut guesses = vec![[side * r_ss, 0.7 * target_beta, 0.5 * tau_cap]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..EQ_RESTARTS {
        guesses.push([
            side * rng.gen_range(0.0..2.0 * r_ss),
            rng.gen_range(-p.delta_max..p.delta_max),
            rng.gen_range(0.0..tau_cap),
        ]);
    }
    let mut best = f64::INFINITY;
    for guess in guesses {
        match newton(guess, target_beta, speed, model) {
            Ok(eq) => return Ok(eq),
            Err(res) => best = best.min(res),
        }
    }
    Err(ModelError::NoConvergence(format!(
        "no drift equilibrium at beta={target_beta} V={speed} (best residual {best:.3e})"
    )))
}

fn newton(
    guess: [f64; 3],
    beta: f64,
    speed: f64,
    model: &VehicleModel,
) -> std::result::Result<DriftEquilibrium, f64> {
    let build = |u: &Vector3<f64>| VehicleState::new(u[0], beta, speed, u[1], u[2]);
    let eval = |u: &Vector3<f64>| -> Option<(Vector3<f64>, Matrix3<f64>)> {
        let (rates, jac) = model.rates_and_jacobian(&build(u)).ok()?;
        let f = Vector3::from(rates);
        let mut j = Matrix3::zeros();
        j.set_column(0, &jac.wrt_state.column(0));
        j.set_column(1, &jac.wrt_actuators.column(0));
        j.set_column(2, &jac.wrt_actuators.column(1));
        Some((f, j))
    };
    let norm = |f: &Vector3<f64>| f.amax();
    let mut u = Vector3::from(guess);
    let Some((mut f, mut j)) = eval(&u) else {
        return Err(f64::INFINITY);
    };
    for it in 0..=EQ_MAX_ITER {
        let res = norm(&f);
        if res <= EQ_TOL {
            let state = build(&u);
            return Ok(DriftEquilibrium {
                state,
                delta: u[1],
                tau: u[2],
                residual: res,
                iterations: it,
            });
        }
        if it == EQ_MAX_ITER {
            return Err(res);
        }
        let Some(step) = j.lu().solve(&(-f)) else {
            return Err(res);
        };
        let mut t = 1.0;
        loop {
            let trial = u + step * t;
            if let Some((ft, jt)) = eval(&trial) {
                if norm(&ft) < res || t < 1e-4 {
                    u = trial;
                    f = ft;
                    j = jt;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-4 {
                return Err(res);
            }
        }
    }
    unreachable!()
}

/// Constant driver hold starting at `start` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptSegment {
    pub start: f64,
    /// Handwheel angle (rad).
    pub handwheel: f64,
    /// Torque request (N m).
    pub torque: f64,
}

/// Piecewise-constant driver inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverScript {
    pub segments: Vec<ScriptSegment>,
}

impl DriverScript {
    pub fn constant(handwheel: f64, torque: f64) -> Self {
        Self {
            segments: vec![ScriptSegment {
                start: 0.0,
                handwheel,
                torque,
            }],
        }
    }

    /// `(handwheel, torque)` in force at time `t`.
    pub fn sample(&self, t: f64) -> (f64, f64) {
        let idx = self.segments.partition_point(|s| s.start <= t);
        let seg = &self.segments[idx.saturating_sub(1)];
        (seg.handwheel, seg.torque)
    }
}

/// A scripted closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub initial: VehicleState,
    pub script: DriverScript,
    pub duration: f64,
}

pub const SCENARIO_NAMES: [&str; 3] = ["initiation", "equilibrium", "transition"];

pub const EQUILIBRIUM_BETA: f64 = -0.44;

impl Scenario {
    pub fn new(name: &str, initial: VehicleState, script: DriverScript, duration: f64) -> Result<Self> {
        let s = Self {
            name: name.to_string(),
            initial,
            script,
            duration,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| {
            ModelError::Params(ParamsError::Invalid {
                name: "scenario",
                reason,
            })
        };
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(invalid(format!("duration {} must be positive", self.duration)));
        }
        let segs = &self.script.segments;
        if segs.is_empty() || segs[0].start > 0.0 {
            return Err(invalid("script must start at t = 0".into()));
        }
        if segs.windows(2).any(|w| w[1].start <= w[0].start) {
            return Err(invalid("script segments must be strictly increasing".into()));
        }
        if segs.iter().any(|s| !(s.handwheel.is_finite() && s.torque.is_finite())) {
            return Err(invalid("script values must be finite".into()));
        }
        if !self.initial.is_finite() {
            return Err(invalid("initial state must be finite".into()));
        }
        Ok(())
    }

    /// Straight-line start at the origin, handwheel 1.5 rad, 856 N m.
    pub fn initiation(speed: f64) -> Self {
        Self {
            name: "initiation".into(),
            initial: VehicleState::straight(speed),
            script: DriverScript::constant(1.5, 856.0),
            duration: 8.0,
        }
    }

    /// Starts in a computed drift, handwheel -1.5 rad, 700 N m.
    pub fn equilibrium(speed: f64, model: &VehicleModel, seed: u64) -> Result<Self> {
        let eq = find_drift_equilibrium(EQUILIBRIUM_BETA, speed, model, seed)?;
        Ok(Self {
            name: "equilibrium".into(),
            initial: eq.state,
            script: DriverScript::constant(-1.5, 700.0),
            duration: 8.0,
        })
    }

    /// Clockwise-drift exit at `(beta, r) = (-0.98, 0.15)`, handwheel 1.5 rad,
    /// 800 N m.
    pub fn transition(speed: f64) -> Self {
        Self {
            name: "transition".into(),
            initial: VehicleState::new(0.15, -0.98, speed, 0.0, 0.0),
            script: DriverScript::constant(1.5, 800.0),
            duration: 8.0,
        }
    }

    pub fn builtin(name: &str, speed: f64, model: &VehicleModel, seed: u64) -> Result<Self> {
        match name {
            "initiation" => Ok(Self::initiation(speed)),
            "equilibrium" => Self::equilibrium(speed, model, seed),
            "transition" => Ok(Self::transition(speed)),
            other => Err(ModelError::Params(ParamsError::Invalid {
                name: "scenario",
                reason: format!("unknown scenario `{other}` (expected one of {SCENARIO_NAMES:?})"),
            })),
        }
    }

    /// Driver command at tick `k`.
    pub fn command(&self, k: usize, dt: f64, params: &VehicleParams) -> DriverCommand {
        let t = k as f64 * dt;
        let (hw, tq) = self.script.sample(t);
        DriverCommand::from_handwheel(hw, tq, t, params)
    }

    pub fn ticks(&self, dt: f64) -> usize {
        (self.duration / dt).round() as usize
    }
}

/// Everything recorded about one control tick. `state` is the state at `t`,
/// before the commanded rates are applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub state: VehicleState,
    pub command: DriverCommand,
    pub decision: FilterDecision,
    pub h: f64,
    pub lf_h: f64,
    pub nu1: f64,
}

/// Filter plus one RK4 step. Shared by the batch runner and the live loop.
pub fn advance(
    t: f64,
    state: &VehicleState,
    command: &DriverCommand,
    ellipse: &EllipseBarrier,
    model: &VehicleModel,
    config: &FilterConfig,
) -> Result<(TickRecord, VehicleState)> {
    let (decision, ev): (FilterDecision, BarrierEvaluation) =
        filter::step_with_barrier(command, state, ellipse, model, config)?;
    let input = RateInput::new(
        (decision.delta_cmd - state.delta) / config.dt,
        (decision.tau_cmd - state.tau) / config.dt,
    );
    let mut next = integrate_rk4(state, &input, model, config.dt)?;
    next.delta = decision.delta_cmd;
    next.tau = decision.tau_cmd;
    let record = TickRecord {
        t,
        state: *state,
        command: *command,
        decision,
        h: ev.h,
        lf_h: ev.lf_h,
        nu1: ev.nu1(config.alpha0),
    };
    Ok((record, next))
}

/// The active tick closest to the barrier boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstTick {
    pub t: f64,
    pub h: f64,
    pub beta: f64,
    pub r: f64,
    /// `tau_d - tau_cmd` (N m).
    pub torque_reduction: f64,
    /// `delta_cmd - delta_d` in handwheel radians.
    pub steering_augmentation: f64,
}

impl WorstTick {
    /// Less torque than the driver asked for and steering pushed against
    /// the yaw rate.
    pub fn directions_match(&self) -> bool {
        self.torque_reduction > 0.0 && self.steering_augmentation * self.r < 0.0
    }
}

/// Summary numbers for a run, recomputable from its ticks. Intervention
/// figures only consider ticks where the filter was active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Largest `tau_d - tau_cmd` (N m).
    pub max_torque_reduction: f64,
    pub beta_at_max_torque_reduction: f64,
    /// Largest `|delta_cmd - delta_d|`, in handwheel radians.
    pub max_steering_augmentation: f64,
    /// Signed handwheel augmentation at that tick.
    pub steering_augmentation_at_max: f64,
    pub beta_at_max_steering_augmentation: f64,
    pub worst_tick: Option<WorstTick>,
    pub min_h: f64,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
    pub active_ticks: usize,
    pub ticks: usize,
    pub spin_out: bool,
    pub truncated: bool,
}

impl Metrics {
    pub fn from_ticks(ticks: &[TickRecord], params: &VehicleParams, spin_out: bool, truncated: bool) -> Self {
        let mut m = Self {
            max_torque_reduction: 0.0,
            beta_at_max_torque_reduction: 0.0,
            max_steering_augmentation: 0.0,
            steering_augmentation_at_max: 0.0,
            beta_at_max_steering_augmentation: 0.0,
            worst_tick: None,
            min_h: f64::INFINITY,
            mean_solve_time: 0.0,
            max_solve_time: 0.0,
            active_ticks: 0,
            ticks: ticks.len(),
            spin_out,
            truncated,
        };
        let mut total = 0.0;
        for tick in ticks {
            let d = &tick.decision;
            m.min_h = m.min_h.min(tick.h);
            total += d.solve_time;
            m.max_solve_time = m.max_solve_time.max(d.solve_time);
            if !d.active {
                continue;
            }
            m.active_ticks += 1;
            let reduction = tick.command.tau_d - d.tau_cmd;
            if reduction > m.max_torque_reduction {
                m.max_torque_reduction = reduction;
                m.beta_at_max_torque_reduction = tick.state.beta;
            }
            let aug = params.roadwheel_to_handwheel(d.delta_cmd - tick.command.delta_d);
            if aug.abs() > m.max_steering_augmentation {
                m.max_steering_augmentation = aug.abs();
                m.steering_augmentation_at_max = aug;
                m.beta_at_max_steering_augmentation = tick.state.beta;
            }
            if m.worst_tick.is_none_or(|w| tick.h < w.h) {
                m.worst_tick = Some(WorstTick {
                    t: tick.t,
                    h: tick.h,
                    beta: tick.state.beta,
                    r: tick.state.r,
                    torque_reduction: reduction,
                    steering_augmentation: aug,
                });
            }
        }
        if !ticks.is_empty() {
            m.mean_solve_time = total / ticks.len() as f64;
        }
        m
    }

    /// Intervention directions at the worst tick; false if the filter never acted.
    pub fn intervention_directions_match(&self) -> bool {
        self.worst_tick.is_some_and(|w| w.directions_match())
    }
}

/// Full record of a scenario run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub scenario: String,
    pub bypass: bool,
    pub dt: f64,
    pub ticks: Vec<TickRecord>,
    /// State after the last recorded tick.
    pub final_state: VehicleState,
    pub metrics: Metrics,
    pub error: Option<String>,
}

impl TraceRecord {
    pub fn recompute_metrics(&self, params: &VehicleParams) -> Metrics {
        Metrics::from_ticks(&self.ticks, params, self.metrics.spin_out, self.metrics.truncated)
    }
}

/// Runs a scenario tick by tick. Model failures end the run and mark it
/// truncated; leaving `|beta| <= pi/2` ends it with the spin-out flag.
pub fn run_scenario(
    scenario: &Scenario,
    ellipse: &EllipseBarrier,
    model: &VehicleModel,
    config: &FilterConfig,
) -> TraceRecord {
    let n = scenario.ticks(config.dt);
    let mut ticks = Vec::with_capacity(n);
    let mut state = scenario.initial;
    let mut spin_out = state.beta.abs() > SPIN_OUT_BETA;
    let mut error = None;
    if !spin_out {
        for k in 0..n {
            let t = k as f64 * config.dt;
            let cmd = scenario.command(k, config.dt, &model.params);
            match advance(t, &state, &cmd, ellipse, model, config) {
                Ok((record, next)) => {
                    ticks.push(record);
                    state = next;
                }
                Err(e) => {
                    log::warn!("{}: stopped at t={t:.3}: {e}", scenario.name);
                    error = Some(e.to_string());
                    break;
                }
            }
            if state.beta.abs() > SPIN_OUT_BETA {
                spin_out = true;
                break;
            }
        }
    }
    let truncated = error.is_some();
    let metrics = Metrics::from_ticks(&ticks, &model.params, spin_out, truncated);
    TraceRecord {
        scenario: scenario.name.clone(),
        bypass: config.bypass,
        dt: config.dt,
        ticks,
        final_state: state,
        metrics,
        error,
    }
}

/// The figure-eight transition run.
pub fn run_transition_scenario(
    ellipse: &EllipseBarrier,
    model: &VehicleModel,
    config: &FilterConfig,
    speed: f64,
) -> TraceRecord {
    run_scenario(&Scenario::transition(speed), ellipse, model, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> VehicleModel {
        VehicleModel::for_simulation(VehicleParams::default())
    }

    #[test]
    fn straight_line_is_a_fixed_point() {
        let s = VehicleState::straight(7.0);
        let n = integrate_rk4(&s, &RateInput::ZERO, &model(), 1e-3).unwrap();
        assert_eq!(n, s);
    }

    #[test]
    fn actuator_channels_advance_linearly() {
        let s = VehicleState::new(0.1, -0.1, 7.0, 0.0, 0.0);
        let n = integrate_rk4(&s, &RateInput::new(0.1, 50.0), &model(), 0.01).unwrap();
        assert_eq!(n.delta, 0.1 * 0.01);
        assert_eq!(n.tau, 50.0 * 0.01);
    }

    #[test]
    fn script_sampling_is_piecewise_constant() {
        let script = DriverScript {
            segments: vec![
                ScriptSegment { start: 0.0, handwheel: 1.0, torque: 10.0 },
                ScriptSegment { start: 2.0, handwheel: -1.0, torque: 20.0 },
            ],
        };
        assert_eq!(script.sample(0.0), (1.0, 10.0));
        assert_eq!(script.sample(1.999), (1.0, 10.0));
        assert_eq!(script.sample(2.0), (-1.0, 20.0));
        assert_eq!(script.sample(50.0), (-1.0, 20.0));
    }

    #[test]
    fn scenario_validation() {
        let s = VehicleState::straight(7.0);
        assert!(Scenario::new("x", s, DriverScript::constant(0.0, 0.0), 0.0).is_err());
        let late = DriverScript {
            segments: vec![ScriptSegment { start: 1.0, handwheel: 0.0, torque: 0.0 }],
        };
        assert!(Scenario::new("x", s, late, 1.0).is_err());
        assert!(Scenario::new("x", s, DriverScript::constant(0.0, 0.0), 1.0).is_ok());
    }

    #[test]
    fn unknown_builtin_is_rejected() {
        assert!(Scenario::builtin("donut", 7.0, &model(), DEFAULT_SEED).is_err());
    }

    #[test]
    fn zero_sideslip_solution_is_a_fixed_point() {
        // Zero sideslip admits steady turns as well as straight running.
        let m = VehicleModel::new(VehicleParams::default());
        let eq = find_drift_equilibrium(0.0, 7.0, &m, 1).unwrap();
        assert!(eq.residual <= 1e-8);
        let rates = m.velocity_derivative(&eq.state).unwrap();
        assert!(rates.iter().all(|x| x.abs() <= 1e-8));
        assert_eq!(eq.state.beta, 0.0);
    }

    #[test]
    fn straight_run_keeps_speed_exactly() {
        let m = model();
        let e = EllipseBarrier::new(1.0, 0.0, 1.0, 1.0, 4.0, 8.0).unwrap();
        let sc = Scenario::new("coast", VehicleState::straight(7.0), DriverScript::constant(0.0, 0.0), 0.5).unwrap();
        let cfg = FilterConfig { record_timing: false, ..FilterConfig::default() };
        let tr = run_scenario(&sc, &e, &m, &cfg);
        assert_eq!(tr.ticks.len(), 500);
        assert!(tr.ticks.iter().all(|t| t.state.v == 7.0));
        assert_eq!(tr.metrics.min_h, 1.0);
    }
}
