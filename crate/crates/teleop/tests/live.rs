//! The live service driven by headless clients over real sockets.

use std::time::Duration;

use driftsafe_core::envelope::EnvelopeConfig;
use driftsafe_core::sim::{run_scenario, Scenario, DEFAULT_H_TOL, DEFAULT_SEED};
use driftsafe_core::trace::read_trace;
use driftsafe_core::{EnvelopeArtifact, FilterConfig, VehicleModel, VehicleParams};
use driftsafe_teleop::log::{read_messages, segment_paths, MESSAGES_FILE};
use driftsafe_teleop::session::SessionConfig;
use driftsafe_teleop::{start, BotClient, Frame, Inbound, LiveSession, Outbound, ServerOptions, TickMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn session_config(scenario: &str) -> SessionConfig {
    let params = VehicleParams::default();
    let art = EnvelopeArtifact::build(&params, 7.0, &EnvelopeConfig::default(), 0.25, 1.0).unwrap();
    let filter = FilterConfig { record_timing: false, ..FilterConfig::default() };
    let model = VehicleModel::for_simulation(params);
    let sc = Scenario::builtin(scenario, 7.0, &model, DEFAULT_SEED).unwrap();
    SessionConfig::new(params, art.ellipse, filter, sc)
}

fn lockstep() -> ServerOptions {
    ServerOptions { mode: TickMode::Lockstep, ..ServerOptions::default() }
}

/// Sends one command and waits for the tick it triggers.
async fn drive(bot: &mut BotClient, handwheel: f64, torque: f64, tag: f64) -> Outbound {
    bot.command(handwheel, torque, tag).await.unwrap();
    loop {
        match bot.recv().await.unwrap() {
            m @ (Outbound::Frame(_) | Outbound::Fault { .. }) => return m,
            _ => continue,
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bot_session_reproduces_the_batch_run() {
    let cfg = session_config("initiation");
    let model = VehicleModel::for_simulation(cfg.params);
    let batch = run_scenario(&cfg.scenario, &cfg.ellipse, &model, &cfg.filter);
    assert!(batch.error.is_none() && !batch.metrics.spin_out);

    let dir = tempfile::tempdir().unwrap();
    let log = driftsafe_teleop::log::SessionLog::create(dir.path()).unwrap();
    let script = cfg.scenario.script.clone();
    let ticks = batch.ticks.len() / cfg.substeps;
    let server = start(LiveSession::new(cfg.clone()).with_log(log), lockstep()).await.unwrap();
    let mut bot = BotClient::connect(server.local_addr()).await.unwrap();
    let mut frames = Vec::new();
    for k in 0..ticks {
        let (hw, tq) = script.sample(k as f64 * cfg.tick_period());
        match drive(&mut bot, hw, tq, k as f64).await {
            Outbound::Frame(f) => frames.push(f),
            other => panic!("tick {k}: {other:?}"),
        }
    }
    drop(bot);
    let report = server.shutdown().await;
    report.log.unwrap().unwrap();
    assert_eq!(report.ticks as usize, ticks);

    // Frame k carries the state after substep 10 (k + 1).
    for (k, f) in frames.iter().enumerate() {
        let next = (k + 1) * cfg.substeps;
        let expected = batch.ticks.get(next).map_or(batch.final_state, |t| t.state);
        let (a, b) = (f.state().to_array(), expected.to_array());
        for i in 0..5 {
            assert!((a[i] - b[i]).abs() <= 1e-9, "tick {k} component {i}: {} vs {}", a[i], b[i]);
        }
    }
    // The logged substeps match the batch table row for row.
    let segments = segment_paths(dir.path());
    assert_eq!(segments.len(), 1);
    let rows = read_trace(&segments[0]).unwrap();
    assert_eq!(rows.len(), batch.ticks.len());
    for (row, t) in rows.iter().zip(&batch.ticks) {
        assert_eq!(row.t, t.t);
        let live = [row.r, row.beta, row.v, row.delta, row.tau];
        let b = t.state.to_array();
        for i in 0..5 {
            assert!((live[i] - b[i]).abs() <= 1e-9, "t={} component {i}", row.t);
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn adversarial_driving_stays_in_the_safe_set() {
    let cfg = session_config("initiation");
    let limit = cfg.params.handwheel_limit();
    let dir = tempfile::tempdir().unwrap();
    let log = driftsafe_teleop::log::SessionLog::create(dir.path()).unwrap();
    let server = start(LiveSession::new(cfg).with_log(log), lockstep()).await.unwrap();
    let mut bot = BotClient::connect(server.local_addr()).await.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut min_h = f64::INFINITY;
    let mut active = 0;
    let (mut hw, mut tq, mut hold) = (0.0, 0.0, 0);
    // 60 s of simulated driving at 100 Hz.
    for k in 0..6000 {
        if hold == 0 {
            hw = rng.gen_range(-limit..=limit);
            tq = rng.gen_range(0.0..900.0);
            hold = rng.gen_range(20..150);
        }
        hold -= 1;
        match drive(&mut bot, hw, tq, k as f64).await {
            Outbound::Frame(f) => {
                min_h = min_h.min(f.h);
                active += usize::from(f.active);
            }
            other => panic!("tick {k}: {other:?}"),
        }
    }
    drop(bot);
    server.shutdown().await.log.unwrap().unwrap();
    let rows = read_trace(&segment_paths(dir.path())[0]).unwrap();
    assert_eq!(rows.len(), 60_000);
    let logged = rows.iter().map(|r| r.h).fold(f64::INFINITY, f64::min);
    assert!(min_h >= -DEFAULT_H_TOL && logged >= -DEFAULT_H_TOL, "min h {min_h} / {logged}");
    assert!(active > 100, "filter intervened on only {active} frames");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bypassed_spin_faults_and_resets() {
    let cfg = session_config("initiation");
    let initial = cfg.scenario.initial;
    let server = start(LiveSession::new(cfg), lockstep()).await.unwrap();
    let mut bot = BotClient::connect(server.local_addr()).await.unwrap();
    bot.send(&Inbound::SetBypass { bypass: true }).await.unwrap();
    let mut fault_at = None;
    for k in 0..1000 {
        if let Outbound::Fault { reason, reset_state, tick, .. } = drive(&mut bot, 1.5, 856.0, k as f64).await {
            assert_eq!(reason, "spin_out");
            assert_eq!(reset_state, initial);
            fault_at = Some(tick);
            break;
        }
    }
    let fault_at = fault_at.expect("bypassed initiation never spun");
    // The next frame restarts from the scenario start and resends the envelope.
    let Outbound::Frame(f) = drive(&mut bot, 0.0, 0.0, -1.0).await else { panic!("expected a frame") };
    assert_eq!(f.tick, fault_at + 1);
    assert!(f.envelope.is_some() && f.bypass);
    assert!((f.t - 0.01).abs() < 1e-12 && f.beta.abs() < 1e-3);
    drop(bot);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn session_log_matches_the_broadcast_bitwise() {
    let cfg = session_config("transition");
    let dir = tempfile::tempdir().unwrap();
    let log = driftsafe_teleop::log::SessionLog::create(dir.path()).unwrap();
    let server = start(LiveSession::new(cfg).with_log(log), lockstep()).await.unwrap();
    let mut bot = BotClient::connect(server.local_addr()).await.unwrap();
    let mut received = Vec::new();
    for k in 0..300 {
        bot.command(1.5, 800.0, k as f64).await.unwrap();
        let (bytes, _) = bot.recv_raw().await.unwrap().unwrap();
        received.push(bytes.to_vec());
    }
    bot.send(&Inbound::Reset { state: None }).await.unwrap();
    for k in 0..50 {
        bot.command(0.0, 0.0, k as f64).await.unwrap();
        received.push(bot.recv_raw().await.unwrap().unwrap().0.to_vec());
    }
    drop(bot);
    server.shutdown().await.log.unwrap().unwrap();

    let logged = read_messages(&dir.path().join(MESSAGES_FILE)).unwrap();
    assert_eq!(logged.len(), received.len());
    for ((line, msg), live) in logged.iter().zip(&received) {
        assert_eq!(line, live);
        assert_eq!(&msg.encode().to_vec(), live, "re-encoding must be lossless");
    }
    // A reset starts a new trace segment.
    let segments = segment_paths(dir.path());
    assert_eq!(segments.len(), 2);
    assert_eq!(read_trace(&segments[0]).unwrap().len(), 3000);
    assert_eq!(read_trace(&segments[1]).unwrap().len(), 500);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn a_stalled_subscriber_never_stalls_the_loop() {
    let cfg = session_config("initiation");
    let server = start(LiveSession::new(cfg), lockstep()).await.unwrap();
    // Connects and then never reads.
    let _stalled = tokio::net::TcpStream::connect(server.local_addr()).await.unwrap();
    let mut bot = BotClient::connect(server.local_addr()).await.unwrap();
    let run = async {
        for k in 0..3000 {
            drive(&mut bot, 0.5, 100.0, k as f64).await;
        }
    };
    tokio::time::timeout(Duration::from_secs(60), run).await.expect("loop stalled");
    drop(bot);
    assert_eq!(server.shutdown().await.ticks, 3000);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn real_time_loop_meets_its_budget_and_echoes_promptly() {
    let cfg = session_config("initiation");
    let server = start(LiveSession::new(cfg), ServerOptions::default()).await.unwrap();
    let mut bot = BotClient::connect(server.local_addr()).await.unwrap();
    let Outbound::Hello { rate_hz, protocol, .. } = bot.hello().clone() else { unreachable!() };
    assert_eq!((rate_hz, protocol), (100.0, driftsafe_teleop::PROTOCOL_VERSION));

    let mut worst = 0;
    for k in 0..100 {
        let tag = 1000.0 + k as f64;
        bot.command(0.3, 200.0, tag).await.unwrap();
        let mut seen = 0;
        loop {
            let f: Frame = bot.next_frame().await.unwrap();
            seen += 1;
            if f.client_time_ms == Some(tag) {
                assert_eq!(f.handwheel, 0.3);
                break;
            }
            assert!(seen < 10, "command {tag} never echoed");
        }
        worst = worst.max(seen);
    }
    assert!(worst <= 3, "echo took {worst} frames");
    drop(bot);
    let report = server.shutdown().await;
    assert!(report.ticks >= 100);
    let p99 = report.percentile(99.0).unwrap();
    assert!(p99 < Duration::from_millis(2), "p99 tick {p99:?}");
}

proptest! {
    #[test]
    fn frames_round_trip_losslessly(
        vals in proptest::collection::vec(-1e6..1e6f64, 21),
        tick in any::<u64>(),
        active in any::<bool>(),
        tagged in any::<bool>(),
    ) {
        let f = Frame {
            tick,
            t: vals[0], r: vals[1], beta: vals[2], v: vals[3], delta: vals[4], tau: vals[5],
            x: vals[6], y: vals[7], heading: vals[8], handwheel: vals[9], torque: vals[10],
            client_time_ms: tagged.then_some(vals[11]),
            delta_d: vals[12], tau_d: vals[13], delta_cmd: vals[14], tau_cmd: vals[15],
            delta_dot_cmd: vals[16], tau_dot_cmd: vals[17], eps: vals[18], active,
            solve_time: vals[19].abs(), bypass: !active, h: vals[20], nu1: vals[0] * 3.0,
            envelope: None,
        };
        let msg = Outbound::Frame(f);
        let bytes = msg.encode();
        prop_assert_eq!(Outbound::decode(&bytes).unwrap(), msg);
    }
}
