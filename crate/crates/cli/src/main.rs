use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use driftsafe_cli::{cmd_compare, cmd_fit_envelope, cmd_run, serve_session, CliError, RunManifest, ServeOptions};
use driftsafe_core::sim::{DEFAULT_SEED, DEFAULT_SPEED};

#[derive(Parser)]
#[command(name = "driftsafe", version, about = "Safety-filtered drifting: envelopes, scenarios and live sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trace the recoverable envelope and fit the safe-set ellipse.
    FitEnvelope {
        #[arg(long)]
        params: Option<PathBuf>,
        /// Filter config; its pole gains are stored with the ellipse.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SPEED)]
        speed: f64,
        /// Output directory [env: DRIFTSAFE_OUT, default: out].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one scenario and write its trace, metrics and phase-plane data.
    Run(ManifestArgs),
    /// Run a scenario filtered and bypassed and write both side by side.
    Compare(ManifestArgs),
    /// Serve a live session over TCP.
    Serve {
        #[command(flatten)]
        manifest: ManifestArgs,
        /// Control ticks per second.
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: SocketAddr,
        /// Advance one tick per received command instead of on a timer.
        #[arg(long)]
        lockstep: bool,
    },
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Envelope artifact from `fit-envelope`; fitted on the fly when absent.
    #[arg(long)]
    envelope: Option<PathBuf>,
    /// initiation, equilibrium or transition.
    #[arg(long, default_value = "initiation")]
    scenario: String,
    /// Output directory [env: DRIFTSAFE_OUT, default: out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pass driver commands through unfiltered.
    #[arg(long)]
    bypass: bool,
    /// Speed (m/s); defaults to the envelope's speed, else 7.
    #[arg(long)]
    speed: Option<f64>,
    /// Seed for equilibrium-solver restarts.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

impl From<ManifestArgs> for RunManifest {
    fn from(a: ManifestArgs) -> Self {
        Self {
            params: a.params,
            config: a.config,
            envelope: a.envelope,
            scenario: a.scenario,
            out: a.out,
            seed: a.seed,
            speed: a.speed,
            bypass: a.bypass,
        }
    }
}

fn summary(m: &driftsafe_core::trace::MetricsFile) -> String {
    let x = &m.metrics;
    format!(
        "{}{}: min_h={:.4} spin_out={} active_ticks={}/{}",
        m.scenario,
        if m.bypass { " (bypass)" } else { "" },
        x.min_h,
        x.spin_out,
        x.active_ticks,
        x.ticks
    )
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::FitEnvelope { params, config, speed, out } => {
            let out = RunManifest { out, ..RunManifest::default() }.out_dir();
            let fit = cmd_fit_envelope(params.as_deref(), config.as_deref(), speed, &out)?;
            let e = &fit.artifact.ellipse;
            println!("ellipse a={} b={} c={} d={} area={:.4}", e.a, e.b, e.c, e.d, e.area());
            println!("wrote {}", fit.artifact_path.display());
        }
        Command::Run(args) => {
            let out = cmd_run(&args.into())?;
            println!("{}", summary(&out.metrics));
            println!("wrote {}", out.paths.trace.display());
        }
        Command::Compare(args) => {
            let out = cmd_compare(&args.into())?;
            println!("{}", summary(&out.filtered.metrics));
            println!("{}", summary(&out.bypassed.metrics));
            println!("wrote {}", out.table.display());
        }
        Command::Serve { manifest, rate, listen, lockstep } => {
            let (session, opts) = serve_session(&manifest.into(), &ServeOptions { rate_hz: rate, listen, lockstep })?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
            rt.block_on(async move {
                let server = driftsafe_teleop::start(session, opts)
                    .await
                    .map_err(|e| CliError::Usage(format!("cannot listen on {listen}: {e}")))?;
                println!("listening on {}", server.local_addr());
                tokio::signal::ctrl_c().await.map_err(|e| CliError::Runtime(e.to_string()))?;
                let report = server.shutdown().await;
                if let Some(p99) = report.percentile(99.0) {
                    println!("{} ticks, p99 tick {:?}", report.ticks, p99);
                }
                match report.log {
                    Some(Err(e)) => Err(CliError::Runtime(format!("session log: {e}"))),
                    _ => Ok(()),
                }
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
