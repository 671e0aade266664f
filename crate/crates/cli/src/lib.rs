//! Batch entry points behind the `driftsafe` binary: fit an envelope, run a
//! scenario, compare filtered against bypassed runs, and serve live sessions.
//!
//! Every batch command is deterministic for a given manifest. Outputs are
//! delimited text or JSON datasets ready for external plotting.

use std::path::{Path, PathBuf};

use driftsafe_core::envelope::EnvelopeConfig;
use driftsafe_core::kv::KvDocument;
use driftsafe_core::sim::{run_scenario, Scenario, TickRecord, DEFAULT_SEED, DEFAULT_SPEED};
use driftsafe_core::trace::{write_trace, MetricsFile, METRICS_SCHEMA};
use driftsafe_core::{
    EllipseBarrier, EnvelopeArtifact, FilterConfig, ModelError, TraceRecord, VehicleModel, VehicleParams,
};
use serde::Serialize;

/// Environment variable that sets the output directory when `--out` is absent.
pub const OUT_ENV: &str = "DRIFTSAFE_OUT";
pub const DEFAULT_OUT: &str = "out";

pub const ENVELOPE_FILE: &str = "envelope.json";
pub const ENVELOPE_TRACES_FILE: &str = "envelope.traces.csv";
pub const ENVELOPE_RAYS_FILE: &str = "envelope.rays.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid input files.
    #[error("{0}")]
    Usage(String),
    /// The model or a run failed.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Input files and settings for a command.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub params: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub envelope: Option<PathBuf>,
    pub scenario: String,
    /// Falls back to [`OUT_ENV`], then [`DEFAULT_OUT`].
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub speed: Option<f64>,
    pub bypass: bool,
}

impl RunManifest {
    pub fn new(scenario: &str) -> Self {
        Self { scenario: scenario.into(), seed: DEFAULT_SEED, ..Self::default() }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    /// Loads and cross-checks every referenced file.
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let config = load_config(self.config.as_deref())?;
        let config = FilterConfig { bypass: config.bypass || self.bypass, ..config };
        let (params, ellipse, speed) = match &self.envelope {
            Some(path) => {
                let art = EnvelopeArtifact::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                if let Some(p) = &self.params {
                    let params = load_params(p)?;
                    if params.fingerprint() != art.params_hash {
                        return Err(usage(format!(
                            "{} was fitted for different parameters than {}",
                            path.display(),
                            p.display()
                        )));
                    }
                }
                if let Some(v) = self.speed {
                    if v != art.speed {
                        return Err(usage(format!("--speed {v} differs from the envelope speed {}", art.speed)));
                    }
                }
                (art.params, art.ellipse, art.speed)
            }
            None => {
                let params = match &self.params {
                    Some(p) => load_params(p)?,
                    None => VehicleParams::default(),
                };
                let speed = self.speed.unwrap_or(DEFAULT_SPEED);
                let art = build_artifact(&params, speed, &config)?;
                (params, art.ellipse, speed)
            }
        };
        params.validate().map_err(usage)?;
        let model = VehicleModel::for_simulation(params);
        let scenario = match Scenario::builtin(&self.scenario, speed, &model, self.seed) {
            Ok(s) => s,
            Err(ModelError::Params(e)) => return Err(usage(e)),
            Err(e) => return Err(runtime(e)),
        };
        Ok(Resolved { params, config, ellipse, speed, scenario, out: self.out_dir() })
    }
}

/// A manifest with its files loaded.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub params: VehicleParams,
    pub config: FilterConfig,
    pub ellipse: EllipseBarrier,
    pub speed: f64,
    pub scenario: Scenario,
    pub out: PathBuf,
}

impl Resolved {
    pub fn model(&self) -> VehicleModel {
        VehicleModel::for_simulation(self.params)
    }
}

/// Parameters without range checks, so an envelope fit can report a
/// gripless surface as a degenerate region.
pub fn load_params(path: &Path) -> Result<VehicleParams, CliError> {
    VehicleParams::load_unchecked(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Filter settings. Wall-clock timing is off unless the file turns it on,
/// which keeps outputs reproducible.
pub fn load_config(path: Option<&Path>) -> Result<FilterConfig, CliError> {
    let Some(path) = path else {
        return Ok(FilterConfig { record_timing: false, ..FilterConfig::default() });
    };
    let doc = KvDocument::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut cfg = FilterConfig::from_kv(&doc).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if doc.bool("record_timing").map_err(usage)?.is_none() {
        cfg.record_timing = false;
    }
    Ok(cfg)
}

fn build_artifact(params: &VehicleParams, speed: f64, config: &FilterConfig) -> Result<EnvelopeArtifact, CliError> {
    if !(speed.is_finite() && speed > 0.0) {
        return Err(usage(format!("speed {speed} must be positive")));
    }
    match EnvelopeArtifact::build(params, speed, &EnvelopeConfig::default(), config.alpha0, config.alpha1) {
        Ok(a) => Ok(a),
        Err(ModelError::Params(e)) => Err(usage(e)),
        Err(e) => Err(runtime(e)),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub artifact: EnvelopeArtifact,
    pub artifact_path: PathBuf,
    pub traces_path: PathBuf,
    pub rays_path: PathBuf,
}

#[derive(Serialize)]
struct TracePoint {
    curve: &'static str,
    beta: f64,
    r: f64,
}

#[derive(Serialize)]
struct RayRow {
    ray: usize,
    theta: f64,
    boundary_radius: f64,
    ellipse_radius: f64,
}

/// Traces the envelope at `speed`, fits the ellipse and writes the artifact
/// plus plot datasets of the traced curves and per-ray radii.
pub fn cmd_fit_envelope(
    params: Option<&Path>,
    config: Option<&Path>,
    speed: f64,
    out: &Path,
) -> Result<FitOutput, CliError> {
    let params = match params {
        Some(p) => load_params(p)?,
        None => VehicleParams::default(),
    };
    let config = load_config(config)?;
    let artifact = build_artifact(&params, speed, &config)?;
    artifact.validate().map_err(runtime)?;
    create_dir(out)?;
    let artifact_path = out.join(ENVELOPE_FILE);
    artifact.save(&artifact_path).map_err(io_err(&artifact_path))?;

    let mut points = Vec::new();
    for (name, branch) in [
        ("upper_forward", &artifact.upper.forward_branch),
        ("upper_reverse", &artifact.upper.reverse_branch),
        ("lower_forward", &artifact.lower.forward_branch),
        ("lower_reverse", &artifact.lower.reverse_branch),
    ] {
        points.extend(branch.iter().map(|&(beta, r)| TracePoint { curve: name, beta, r }));
    }
    for (name, trace) in [("upper_anchor", &artifact.upper), ("lower_anchor", &artifact.lower)] {
        points.push(TracePoint { curve: name, beta: trace.anchor.0, r: trace.anchor.1 });
    }
    let traces_path = out.join(ENVELOPE_TRACES_FILE);
    write_csv(&traces_path, points)?;

    let radii = artifact.radii().map_err(runtime)?;
    let n = radii.len();
    let rays = radii.iter().enumerate().map(|(k, &rho)| {
        let theta = std::f64::consts::TAU * k as f64 / n as f64;
        RayRow { ray: k, theta, boundary_radius: rho, ellipse_radius: artifact.ellipse.radius_at(theta) }
    });
    let rays_path = out.join(ENVELOPE_RAYS_FILE);
    write_csv(&rays_path, rays)?;
    Ok(FitOutput { artifact, artifact_path, traces_path, rays_path })
}

/// Files written for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub trace: PathBuf,
    pub metrics: PathBuf,
    pub phase: PathBuf,
}

impl RunPaths {
    pub fn new(out: &Path, scenario: &str, bypass: bool) -> Self {
        let stem = if bypass { format!("{scenario}-bypass") } else { scenario.to_string() };
        Self {
            trace: out.join(format!("{stem}.trace.csv")),
            metrics: out.join(format!("{stem}.metrics.json")),
            phase: out.join(format!("{stem}.phase.csv")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: TraceRecord,
    pub metrics: MetricsFile,
    pub paths: RunPaths,
}

/// Phase-plane sample with the filter's change to the driver request.
#[derive(Serialize)]
struct PhaseRow {
    t: f64,
    beta: f64,
    r: f64,
    h: f64,
    delta_d: f64,
    delta_cmd: f64,
    d_delta: f64,
    tau_d: f64,
    tau_cmd: f64,
    d_tau: f64,
    active: u8,
}

impl From<&TickRecord> for PhaseRow {
    fn from(t: &TickRecord) -> Self {
        let d = &t.decision;
        Self {
            t: t.t,
            beta: t.state.beta,
            r: t.state.r,
            h: t.h,
            delta_d: t.command.delta_d,
            delta_cmd: d.delta_cmd,
            d_delta: d.delta_cmd - t.command.delta_d,
            tau_d: t.command.tau_d,
            tau_cmd: d.tau_cmd,
            d_tau: d.tau_cmd - t.command.tau_d,
            active: u8::from(d.active),
        }
    }
}

fn execute(resolved: &Resolved, bypass: bool) -> Result<RunOutput, CliError> {
    let config = FilterConfig { bypass, ..resolved.config };
    let record = run_scenario(&resolved.scenario, &resolved.ellipse, &resolved.model(), &config);
    let metrics = MetricsFile {
        schema: METRICS_SCHEMA,
        scenario: record.scenario.clone(),
        bypass,
        params_hash: resolved.params.fingerprint(),
        dt: record.dt,
        error: record.error.clone(),
        metrics: record.metrics,
    };
    create_dir(&resolved.out)?;
    let paths = RunPaths::new(&resolved.out, &resolved.scenario.name, bypass);
    write_trace(&paths.trace, &record.ticks).map_err(|e| runtime(format!("{}: {e}", paths.trace.display())))?;
    metrics.save(&paths.metrics).map_err(|e| runtime(format!("{}: {e}", paths.metrics.display())))?;
    write_csv(&paths.phase, record.ticks.iter().map(PhaseRow::from))?;
    Ok(RunOutput { record, metrics, paths })
}

fn check(output: &RunOutput) -> Result<(), CliError> {
    match &output.record.error {
        Some(e) => Err(runtime(format!("{} stopped early: {e}", output.record.scenario))),
        None => Ok(()),
    }
}

/// Runs the manifest's scenario, filtered unless bypassed, and writes the
/// trace table, metrics and phase-plane dataset. Outputs are written even
/// when the run stops on a model failure, which is then reported as an error.
pub fn cmd_run(manifest: &RunManifest) -> Result<RunOutput, CliError> {
    let resolved = manifest.resolve()?;
    let out = execute(&resolved, resolved.config.bypass)?;
    check(&out)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub filtered: RunOutput,
    pub bypassed: RunOutput,
    pub table: PathBuf,
    pub summary: PathBuf,
}

#[derive(Serialize)]
struct CompareRow {
    t: f64,
    delta_d: f64,
    tau_d: f64,
    beta_filtered: Option<f64>,
    r_filtered: Option<f64>,
    h_filtered: Option<f64>,
    delta_cmd_filtered: Option<f64>,
    tau_cmd_filtered: Option<f64>,
    beta_bypassed: Option<f64>,
    r_bypassed: Option<f64>,
    h_bypassed: Option<f64>,
}

#[derive(Serialize)]
struct CompareSummary<'a> {
    scenario: &'a str,
    filtered: &'a MetricsFile,
    bypassed: &'a MetricsFile,
}

/// Runs the scenario filtered and bypassed from the same start and writes
/// both runs plus a side-by-side table and summary.
pub fn cmd_compare(manifest: &RunManifest) -> Result<CompareOutput, CliError> {
    let resolved = manifest.resolve()?;
    let filtered = execute(&resolved, false)?;
    let bypassed = execute(&resolved, true)?;
    let (on, off) = (&filtered.record.ticks, &bypassed.record.ticks);
    let params = &resolved.params;
    let dt = resolved.config.dt;
    let rows = (0..on.len().max(off.len())).map(|k| {
        let cmd = resolved.scenario.command(k, dt, params);
        let a = on.get(k);
        let b = off.get(k);
        CompareRow {
            t: k as f64 * dt,
            delta_d: cmd.delta_d,
            tau_d: cmd.tau_d,
            beta_filtered: a.map(|t| t.state.beta),
            r_filtered: a.map(|t| t.state.r),
            h_filtered: a.map(|t| t.h),
            delta_cmd_filtered: a.map(|t| t.decision.delta_cmd),
            tau_cmd_filtered: a.map(|t| t.decision.tau_cmd),
            beta_bypassed: b.map(|t| t.state.beta),
            r_bypassed: b.map(|t| t.state.r),
            h_bypassed: b.map(|t| t.h),
        }
    });
    let name = &resolved.scenario.name;
    let table = resolved.out.join(format!("{name}.compare.csv"));
    write_csv(&table, rows)?;
    let summary = resolved.out.join(format!("{name}.compare.json"));
    let text = serde_json::to_string_pretty(&CompareSummary {
        scenario: name,
        filtered: &filtered.metrics,
        bypassed: &bypassed.metrics,
    })
    .map_err(runtime)?;
    std::fs::write(&summary, text).map_err(io_err(&summary))?;
    check(&filtered)?;
    check(&bypassed)?;
    Ok(CompareOutput { filtered, bypassed, table, summary })
}

/// Live service settings on top of a manifest.
#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub rate_hz: f64,
    pub listen: std::net::SocketAddr,
    pub lockstep: bool,
}

/// Builds the live session for `serve`. The session log goes to
/// `<out>/session`.
pub fn serve_session(
    manifest: &RunManifest,
    opts: &ServeOptions,
) -> Result<(driftsafe_teleop::LiveSession, driftsafe_teleop::ServerOptions), CliError> {
    let resolved = manifest.resolve()?;
    let steps = 1.0 / (opts.rate_hz * resolved.config.dt);
    let substeps = steps.round();
    if !(opts.rate_hz > 0.0) || substeps < 1.0 || (steps - substeps).abs() > 1e-9 * steps {
        return Err(usage(format!(
            "--rate {} Hz must divide the integration rate {} Hz",
            opts.rate_hz,
            1.0 / resolved.config.dt
        )));
    }
    let mut cfg = driftsafe_teleop::SessionConfig::new(
        resolved.params,
        resolved.ellipse,
        resolved.config,
        resolved.scenario.clone(),
    );
    cfg.speed = resolved.speed;
    cfg.seed = manifest.seed;
    cfg.substeps = substeps as usize;
    let log_dir = resolved.out.join("session");
    let log = driftsafe_teleop::log::SessionLog::create(&log_dir).map_err(io_err(&log_dir))?;
    let session = driftsafe_teleop::LiveSession::new(cfg).with_log(log);
    let server = driftsafe_teleop::ServerOptions {
        listen: opts.listen,
        mode: if opts.lockstep { driftsafe_teleop::TickMode::Lockstep } else { driftsafe_teleop::TickMode::RealTime },
        ..driftsafe_teleop::ServerOptions::default()
    };
    Ok((session, server))
}
