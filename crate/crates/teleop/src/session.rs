//! The authoritative live simulation. Single-threaded and free of I/O so
//! it can be driven by the network loop or directly by tests.

use driftsafe_core::ecbf;
use driftsafe_core::sim::{advance, Scenario, TickRecord, DEFAULT_SEED, SPIN_OUT_BETA};
use driftsafe_core::{
    DriverCommand, EllipseBarrier, FilterConfig, VehicleModel, VehicleParams, VehicleState,
};

use crate::log::SessionLog;
use crate::protocol::{EnvelopeCoefficients, Frame, Inbound, Outbound};

pub const DEFAULT_SUBSTEPS: usize = 10;
/// Command age after which the torque request starts to decay (s).
pub const DEFAULT_STALE_AFTER: f64 = 0.5;
/// Duration of the linear torque decay once a command is stale (s).
pub const DEFAULT_TORQUE_RAMP: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub params: VehicleParams,
    pub ellipse: EllipseBarrier,
    pub filter: FilterConfig,
    pub scenario: Scenario,
    /// Speed used when a client loads a builtin scenario.
    pub speed: f64,
    pub seed: u64,
    /// Integration steps per control tick, each `filter.dt` long.
    pub substeps: usize,
    pub stale_after: f64,
    pub torque_ramp: f64,
}

impl SessionConfig {
    pub fn new(params: VehicleParams, ellipse: EllipseBarrier, filter: FilterConfig, scenario: Scenario) -> Self {
        Self {
            speed: scenario.initial.v,
            params,
            ellipse,
            filter,
            scenario,
            seed: DEFAULT_SEED,
            substeps: DEFAULT_SUBSTEPS,
            stale_after: DEFAULT_STALE_AFTER,
            torque_ramp: DEFAULT_TORQUE_RAMP,
        }
    }

    /// Control period (s).
    pub fn tick_period(&self) -> f64 {
        self.substeps as f64 * self.filter.dt
    }

    pub fn rate_hz(&self) -> f64 {
        1.0 / self.tick_period()
    }
}

/// Most recent driver command and when it arrived (session time).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldCommand {
    pub handwheel: f64,
    pub torque: f64,
    pub client_time_ms: f64,
    pub received_at: f64,
}

/// Display pose integrated from the authoritative state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    fn advance(&mut self, from: &VehicleState, to: &VehicleState, dt: f64) {
        let heading = self.heading + 0.5 * dt * (from.r + to.r);
        let (c0, c1) = (self.heading + from.beta, heading + to.beta);
        self.x += 0.5 * dt * (from.v * c0.cos() + to.v * c1.cos());
        self.y += 0.5 * dt * (from.v * c0.sin() + to.v * c1.sin());
        self.heading = heading;
    }
}

/// What one control tick produced.
#[derive(Debug, Clone, Default)]
pub struct TickOutput {
    /// Per-substep records, in order.
    pub records: Vec<TickRecord>,
    /// Frame or fault to broadcast.
    pub messages: Vec<Outbound>,
}

pub struct LiveSession {
    cfg: SessionConfig,
    model: VehicleModel,
    barrier: EllipseBarrier,
    state: VehicleState,
    pose: Pose,
    held: Option<HeldCommand>,
    tick: u64,
    /// Substeps since the last reset.
    step: u64,
    envelope_pending: bool,
    log: Option<SessionLog>,
}

impl LiveSession {
    pub fn new(cfg: SessionConfig) -> Self {
        let model = VehicleModel::for_simulation(cfg.params);
        let barrier = cfg.filter.barrier(&cfg.ellipse);
        let state = cfg.scenario.initial;
        Self {
            cfg,
            model,
            barrier,
            state,
            pose: Pose::default(),
            held: None,
            tick: 0,
            step: 0,
            envelope_pending: true,
            log: None,
        }
    }

    pub fn with_log(mut self, log: SessionLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn state(&self) -> VehicleState {
        self.state
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    /// Session time since the last reset (s).
    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.filter.dt
    }

    pub fn bypass(&self) -> bool {
        self.cfg.filter.bypass
    }

    pub fn held(&self) -> Option<HeldCommand> {
        self.held
    }

    pub fn hello(&self) -> Outbound {
        Outbound::Hello {
            protocol: crate::protocol::PROTOCOL_VERSION,
            rate_hz: self.cfg.rate_hz(),
            dt: self.cfg.filter.dt,
            scenario: self.cfg.scenario.name.clone(),
            bypass: self.cfg.filter.bypass,
            handwheel_limit: self.cfg.params.handwheel_limit(),
            envelope: EnvelopeCoefficients::from(&self.barrier),
        }
    }

    /// Applies a client message. Returns a reply for the sender, if any.
    pub fn apply(&mut self, msg: Inbound) -> Option<Outbound> {
        match msg {
            Inbound::Command { handwheel, torque, client_time_ms } => {
                if !(handwheel.is_finite() && torque.is_finite() && client_time_ms.is_finite()) {
                    return Some(Outbound::Error { message: "command values must be finite".into() });
                }
                let limit = self.cfg.params.handwheel_limit();
                self.held = Some(HeldCommand {
                    handwheel: handwheel.clamp(-limit, limit),
                    torque,
                    client_time_ms,
                    received_at: self.time(),
                });
                None
            }
            Inbound::SetBypass { bypass } => {
                self.cfg.filter.bypass = bypass;
                None
            }
            Inbound::Reset { state } => {
                let state = state.unwrap_or(self.cfg.scenario.initial);
                if !state.is_finite() || self.model.velocity_derivative(&state).is_err() {
                    return Some(Outbound::Error { message: format!("cannot reset to {state:?}") });
                }
                self.reset_to(state);
                None
            }
            Inbound::LoadScenario { name } => {
                match Scenario::builtin(&name, self.cfg.speed, &self.model, self.cfg.seed) {
                    Ok(sc) => {
                        let initial = sc.initial;
                        self.cfg.scenario = sc;
                        self.reset_to(initial);
                        None
                    }
                    Err(e) => Some(Outbound::Error { message: e.to_string() }),
                }
            }
        }
    }

    fn reset_to(&mut self, state: VehicleState) {
        self.state = state;
        self.pose = Pose::default();
        self.held = None;
        self.step = 0;
        self.envelope_pending = true;
        if let Some(log) = &mut self.log {
            log.new_segment();
        }
    }

    /// Handwheel, torque and client timestamp in force at the current time.
    /// Torque decays linearly to zero once the command is stale.
    pub fn effective_command(&self) -> (f64, f64, Option<f64>) {
        let Some(h) = self.held else {
            return (0.0, 0.0, None);
        };
        let age = self.time() - h.received_at;
        let scale = if age <= self.cfg.stale_after {
            1.0
        } else if self.cfg.torque_ramp > 0.0 {
            (1.0 - (age - self.cfg.stale_after) / self.cfg.torque_ramp).max(0.0)
        } else {
            0.0
        };
        (h.handwheel, h.torque * scale, Some(h.client_time_ms))
    }

    /// Runs one control tick: `substeps` filter and integration steps with
    /// the driver command held.
    pub fn tick(&mut self) -> TickOutput {
        let mut out = TickOutput { records: Vec::with_capacity(self.cfg.substeps), messages: Vec::with_capacity(1) };
        let tick = self.tick;
        self.tick += 1;
        let (handwheel, torque, client_time_ms) = self.effective_command();
        let dt = self.cfg.filter.dt;
        for _ in 0..self.cfg.substeps {
            let t = self.time();
            let cmd = DriverCommand::from_handwheel(handwheel, torque, t, &self.cfg.params);
            let (record, next) = match advance(t, &self.state, &cmd, &self.barrier, &self.model, &self.cfg.filter) {
                Ok(step) => step,
                Err(e) => return self.fault(out, tick, e.to_string()),
            };
            self.pose.advance(&self.state, &next, dt);
            self.state = next;
            self.step += 1;
            if let Some(log) = &mut self.log {
                log.record(&record);
            }
            out.records.push(record);
            if self.state.beta.abs() > SPIN_OUT_BETA {
                return self.fault(out, tick, "spin_out".into());
            }
        }
        let ev = match ecbf::evaluate(&self.state, &self.barrier, &self.model) {
            Ok(ev) => ev,
            Err(e) => return self.fault(out, tick, e.to_string()),
        };
        let last = out.records.last().expect("at least one substep");
        let d = &last.decision;
        let envelope = std::mem::take(&mut self.envelope_pending).then(|| EnvelopeCoefficients::from(&self.barrier));
        let frame = Frame {
            tick,
            t: self.time(),
            r: self.state.r,
            beta: self.state.beta,
            v: self.state.v,
            delta: self.state.delta,
            tau: self.state.tau,
            x: self.pose.x,
            y: self.pose.y,
            heading: self.pose.heading,
            handwheel,
            torque,
            client_time_ms,
            delta_d: last.command.delta_d,
            tau_d: last.command.tau_d,
            delta_cmd: d.delta_cmd,
            tau_cmd: d.tau_cmd,
            delta_dot_cmd: d.delta_dot_cmd,
            tau_dot_cmd: d.tau_dot_cmd,
            eps: d.eps,
            active: d.active,
            solve_time: d.solve_time,
            bypass: self.cfg.filter.bypass,
            h: ev.h,
            nu1: ev.nu1(self.cfg.filter.alpha0),
            envelope,
        };
        out.messages.push(Outbound::Frame(frame));
        out
    }

    fn fault(&mut self, mut out: TickOutput, tick: u64, reason: String) -> TickOutput {
        log::info!("tick {tick}: {reason}; resetting");
        let t = self.time();
        let initial = self.cfg.scenario.initial;
        self.reset_to(initial);
        out.messages.push(Outbound::Fault { tick, t, reason, reset_state: initial });
        out
    }

    /// Appends broadcast messages to the session log, if any.
    pub fn log_messages(&mut self, encoded: &[bytes::Bytes]) {
        if let Some(log) = &mut self.log {
            for m in encoded {
                log.message(m);
            }
        }
    }

    /// Flushes the log so a reader sees everything up to now.
    pub fn flush_log(&mut self) {
        if let Some(log) = &mut self.log {
            log.flush();
        }
    }

    /// Writes trailers and closes the log.
    pub fn finish_log(&mut self) -> Option<std::io::Result<()>> {
        self.log.take().map(SessionLog::finish)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use driftsafe_core::sim::DriverScript;

    fn session() -> LiveSession {
        let params = VehicleParams::default();
        let e = EllipseBarrier::new(0.8604, 0.9192, 1.4326, 1.0, 0.25, 1.0).unwrap();
        let filter = FilterConfig { record_timing: false, ..FilterConfig::default() };
        let sc = Scenario::new("coast", VehicleState::straight(7.0), DriverScript::constant(0.0, 0.0), 1.0).unwrap();
        LiveSession::new(SessionConfig::new(params, e, filter, sc))
    }

    fn command(s: &mut LiveSession, handwheel: f64, torque: f64) {
        assert!(s.apply(Inbound::Command { handwheel, torque, client_time_ms: 0.0 }).is_none());
    }

    #[test]
    fn idles_on_zero_command_without_clients() {
        let mut s = session();
        for _ in 0..50 {
            let out = s.tick();
            assert_eq!(out.records.len(), 10);
            assert!(out.records.iter().all(|r| r.command.delta_d == 0.0 && r.command.tau_d == 0.0));
        }
        assert_eq!(s.state(), VehicleState::straight(7.0));
        assert!((s.pose().x - 0.5 * 7.0).abs() < 1e-9);
    }

    #[test]
    fn handwheel_is_clamped_on_ingest() {
        let mut s = session();
        command(&mut s, 100.0, 10.0);
        assert_eq!(s.held().unwrap().handwheel, VehicleParams::default().handwheel_limit());
        let reply = s.apply(Inbound::Command { handwheel: f64::NAN, torque: 0.0, client_time_ms: 0.0 });
        assert!(matches!(reply, Some(Outbound::Error { .. })));
    }

    #[test]
    fn stale_torque_decays_linearly() {
        let mut s = session();
        command(&mut s, 0.0, 400.0);
        let mut torques = Vec::new();
        for _ in 0..120 {
            torques.push(s.effective_command().1);
            s.tick();
        }
        // One tick is 10 ms: fresh through 0.5 s, zero from 1.0 s.
        assert!(torques[..=50].iter().all(|&t| t == 400.0));
        assert!((torques[75] - 200.0).abs() < 1e-9);
        assert!(torques[100..].iter().all(|&t| t == 0.0));
        assert!(torques.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn frames_echo_the_applied_command_and_count_up() {
        let mut s = session();
        let mut last = None;
        for k in 0..20 {
            assert!(s.apply(Inbound::Command { handwheel: 0.1 * k as f64, torque: 10.0, client_time_ms: k as f64 }).is_none());
            let out = s.tick();
            let Outbound::Frame(f) = &out.messages[0] else { panic!("expected a frame") };
            assert_eq!(f.client_time_ms, Some(k as f64));
            assert_eq!(f.handwheel, 0.1 * k as f64);
            assert_eq!(f.envelope.is_some(), k == 0);
            assert!(last.map_or(true, |l| f.tick > l));
            last = Some(f.tick);
        }
    }

    #[test]
    fn spin_out_resets_with_a_fault() {
        let mut s = session();
        s.apply(Inbound::SetBypass { bypass: true });
        let mut fault = None;
        for _ in 0..1000 {
            command(&mut s, 1.5, 856.0);
            let out = s.tick();
            if let Some(m @ Outbound::Fault { .. }) = out.messages.first() {
                fault = Some(m.clone());
                break;
            }
        }
        let Some(Outbound::Fault { reason, reset_state, .. }) = fault else { panic!("no fault") };
        assert_eq!(reason, "spin_out");
        assert_eq!(reset_state, VehicleState::straight(7.0));
        assert_eq!(s.state(), reset_state);
        assert_eq!(s.time(), 0.0);
        assert!(s.held().is_none());
    }

    #[test]
    fn load_scenario_moves_the_start() {
        let mut s = session();
        assert!(s.apply(Inbound::LoadScenario { name: "transition".into() }).is_none());
        assert_eq!((s.state().beta, s.state().r), (-0.98, 0.15));
        assert!(matches!(s.apply(Inbound::LoadScenario { name: "donut".into() }), Some(Outbound::Error { .. })));
        s.tick();
        assert!(s.apply(Inbound::Reset { state: None }).is_none());
        assert_eq!((s.state().beta, s.state().r), (-0.98, 0.15));
        assert!(s.apply(Inbound::Reset { state: Some(VehicleState::straight(0.0)) }).is_some());
    }
}
