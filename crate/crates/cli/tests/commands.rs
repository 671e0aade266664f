//! Batch commands through the library and the built binary.

use std::path::Path;
use std::process::Command;

use driftsafe_cli::{cmd_compare, cmd_fit_envelope, cmd_run, serve_session, RunManifest, RunPaths, ServeOptions, OUT_ENV};
use driftsafe_core::sim::{DEFAULT_H_TOL, SCENARIO_NAMES};
use driftsafe_core::trace::{read_trace, MetricsFile};
use driftsafe_core::{EnvelopeArtifact, VehicleParams};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_driftsafe"));
    c.env_remove(OUT_ENV);
    c
}

fn manifest(scenario: &str, out: &Path) -> RunManifest {
    RunManifest { out: Some(out.to_path_buf()), ..RunManifest::new(scenario) }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn fitted_artifact_validates_on_load_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = cmd_fit_envelope(None, None, 7.0, a.path()).unwrap();
    let fb = cmd_fit_envelope(None, None, 7.0, b.path()).unwrap();
    let loaded = EnvelopeArtifact::load(&fa.artifact_path).unwrap();
    assert_eq!(loaded, fa.artifact);
    for (x, y) in [(&fa.artifact_path, &fb.artifact_path), (&fa.traces_path, &fb.traces_path), (&fa.rays_path, &fb.rays_path)] {
        assert_eq!(read(x), read(y), "{}", x.display());
    }
    let rays = std::fs::read_to_string(&fa.rays_path).unwrap();
    assert_eq!(rays.lines().count(), 721);
    // Every ray keeps the ellipse inside the traced boundary.
    for line in rays.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[3] <= cols[2], "{line}");
    }
}

#[test]
fn gripless_surface_fails_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let params = VehicleParams { mu: 0.0, ..VehicleParams::default() };
    let path = dir.path().join("params.kv");
    std::fs::write(&path, params.to_kv_string()).unwrap();
    let err = cmd_fit_envelope(Some(&path), None, 7.0, dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let status = bin().args(["fit-envelope", "--params"]).arg(&path).arg("--out").arg(dir.path()).output().unwrap().status;
    assert_eq!(status.code(), Some(1));
    assert!(!dir.path().join("envelope.json").exists());
}

#[test]
fn initiation_run_writes_safe_metrics_and_bypass_spins() {
    let dir = tempfile::tempdir().unwrap();
    let on = cmd_run(&manifest("initiation", dir.path())).unwrap();
    let m = MetricsFile::load(&on.paths.metrics).unwrap();
    assert!(m.metrics.min_h >= -DEFAULT_H_TOL && !m.metrics.spin_out && !m.bypass);
    assert_eq!(read_trace(&on.paths.trace).unwrap().len(), 8000);

    let off = cmd_run(&RunManifest { bypass: true, ..manifest("initiation", dir.path()) }).unwrap();
    let m = MetricsFile::load(&off.paths.metrics).unwrap();
    assert!(m.metrics.spin_out && m.bypass);
    assert_ne!(on.paths, off.paths);
}

#[test]
fn phase_dataset_holds_the_command_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_run(&manifest("transition", dir.path())).unwrap();
    let mut rdr = csv::Reader::from_path(&out.paths.phase).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[..4], ["t", "beta", "r", "h"]);
    let mut rows = 0;
    for (rec, tick) in rdr.records().zip(&out.record.ticks) {
        let rec = rec.unwrap();
        let col = |name: &str| -> f64 { rec[header.iter().position(|h| h == name).unwrap()].parse().unwrap() };
        assert_eq!(col("d_tau"), tick.decision.tau_cmd - tick.command.tau_d);
        assert_eq!(col("d_delta"), tick.decision.delta_cmd - tick.command.delta_d);
        assert_eq!(col("beta"), tick.state.beta);
        rows += 1;
    }
    assert_eq!(rows, out.record.ticks.len());
}

#[test]
fn compare_reproduces_the_safety_claim_on_every_scenario() {
    let dir = tempfile::tempdir().unwrap();
    for name in SCENARIO_NAMES {
        let out = cmd_compare(&manifest(name, dir.path())).unwrap();
        assert!(out.filtered.metrics.metrics.min_h >= -DEFAULT_H_TOL, "{name}");
        assert!(!out.filtered.metrics.metrics.spin_out, "{name}");
        assert!(out.bypassed.metrics.metrics.spin_out, "{name}");
        let table = std::fs::read_to_string(&out.table).unwrap();
        assert_eq!(table.lines().count(), 8001);
    }
}

#[test]
fn compare_is_repeatable_and_composes_with_a_bypassed_run() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let solo = tempfile::tempdir().unwrap();
    let a = cmd_compare(&manifest("equilibrium", first.path())).unwrap();
    let b = cmd_compare(&manifest("equilibrium", second.path())).unwrap();
    for (x, y) in [(&a.table, &b.table), (&a.summary, &b.summary), (&a.filtered.paths.trace, &b.filtered.paths.trace)] {
        assert_eq!(read(x), read(y));
    }
    let off = cmd_run(&RunManifest { bypass: true, ..manifest("equilibrium", solo.path()) }).unwrap();
    let half = RunPaths::new(first.path(), "equilibrium", true);
    assert_eq!(read(&off.paths.trace), read(&half.trace));
    assert_eq!(read(&off.paths.metrics), read(&half.metrics));
    assert_eq!(read(&off.paths.phase), read(&half.phase));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    assert_eq!(code(&["run", "--scenario", "donut", "--out", out]), Some(2));
    assert_eq!(code(&["run", "--params", "/nonexistent/params.kv", "--out", out]), Some(2));
    assert_eq!(code(&["run", "--warp"]), Some(2));
    assert_eq!(code(&[]), Some(2));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "w_delta = -1\n").unwrap();
    assert_eq!(code(&["run", "--config", cfg.to_str().unwrap(), "--out", out]), Some(2));
}

#[test]
fn envelope_must_match_params_and_speed() {
    let dir = tempfile::tempdir().unwrap();
    let fit = cmd_fit_envelope(None, None, 7.0, dir.path()).unwrap();
    let other = dir.path().join("other.kv");
    std::fs::write(&other, VehicleParams { mu: 0.35, ..VehicleParams::default() }.to_kv_string()).unwrap();
    let base = RunManifest { envelope: Some(fit.artifact_path.clone()), ..manifest("initiation", dir.path()) };
    let mismatch = RunManifest { params: Some(other), ..base.clone() };
    assert_eq!(cmd_run(&mismatch).unwrap_err().exit_code(), 2);
    let fast = RunManifest { speed: Some(9.0), ..base.clone() };
    assert_eq!(cmd_run(&fast).unwrap_err().exit_code(), 2);
    // The artifact route gives the same run as fitting on the fly.
    let via_artifact = cmd_run(&base).unwrap();
    let fresh = tempfile::tempdir().unwrap();
    let direct = cmd_run(&manifest("initiation", fresh.path())).unwrap();
    assert_eq!(read(&via_artifact.paths.trace), read(&direct.paths.trace));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("from-env");
    let status = bin()
        .current_dir(dir.path())
        .env(OUT_ENV, &env_out)
        .args(["run", "--scenario", "transition"])
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(env_out.join("transition.metrics.json").exists());
    // An explicit flag wins over the environment.
    let flag_out = dir.path().join("from-flag");
    let status = bin()
        .env(OUT_ENV, &env_out)
        .args(["run", "--scenario", "transition", "--out"])
        .arg(&flag_out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(flag_out.join("transition.trace.csv").exists());
}

#[test]
fn serve_rate_must_divide_the_integration_rate() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest("initiation", dir.path());
    let opts = |rate_hz| ServeOptions { rate_hz, listen: "127.0.0.1:0".parse().unwrap(), lockstep: false };
    assert_eq!(serve_session(&m, &opts(300.0)).err().unwrap().exit_code(), 2);
    let (session, _) = serve_session(&m, &opts(50.0)).unwrap();
    assert_eq!(session.config().substeps, 20);
    assert!(dir.path().join("session").is_dir());
}
