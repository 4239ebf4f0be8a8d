use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use geoshield::alloc_count::CountingAlloc;
use geoshield_cli::{cmd_bench, cmd_compare, cmd_run, cmd_sweep, CliError, EXIT_OK};
use geoshield_cockpit::server::{serve, ServerConfig};
use geoshield_cockpit::session::SessionConfig;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(
    name = "geoshield",
    version,
    about = "Geofence safety shield for a quadrotor"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Built-in scenario id or path to a scenario TOML file.
    #[arg(long)]
    scenario: String,
    /// Override a scenario value, e.g. `filter.beta=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fly a scenario and write telemetry.csv and metrics.json.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Time the filter on random states.
    Bench {
        #[arg(long, default_value = "horizontal_sprint")]
        scenario: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 5000)]
        calls: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of overrides and tabulate the metrics.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Axis as `key=v1,v2,...`. Repeat for a cartesian grid.
        #[arg(long, value_name = "KEY=V1,V2")]
        grid: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Pendulum comparison of the regulation filter and the QP filter.
    Compare {
        #[arg(long, default_value = "pendulum_compare")]
        scenario: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the cockpit: websocket sessions on /ws and the UI files.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Directory with the built cockpit UI.
        #[arg(long)]
        assets: Option<PathBuf>,
        #[arg(long, default_value_t = 60.0)]
        telemetry_hz: f64,
        /// Artificial delay on telemetry frames, milliseconds.
        #[arg(long, default_value_t = 0)]
        display_latency_ms: u64,
    },
}

fn serve_blocking(bind: &str, port: u16, cfg: ServerConfig) -> Result<u8, CliError> {
    let rt = tokio::runtime::Runtime::new()
        .map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((bind, port))
            .await
            .map_err(|e| CliError::Usage(format!("cannot listen on {bind}:{port}: {e}")))?;
        let addr = listener
            .local_addr()
            .expect("bound listener has an address");
        println!("listening on http://{addr}");
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(serve(listener, cfg, async {
            let _ = rx.await;
        }));
        let _ = tokio::signal::ctrl_c().await;
        println!("shutting down");
        let _ = tx.send(());
        // Open websocket sessions would hold a graceful shutdown forever.
        let _ = tokio::time::timeout(Duration::from_secs(2), server).await;
        Ok(EXIT_OK)
    })
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Run { scenario, out } => cmd_run(&scenario.scenario, &scenario.overrides, &out),
        Command::Bench {
            scenario,
            overrides,
            calls,
            seed,
            out,
        } => cmd_bench(&scenario, &overrides, calls, seed, out.as_deref()),
        Command::Sweep {
            scenario,
            grid,
            jobs,
            out,
        } => cmd_sweep(&scenario.scenario, &scenario.overrides, &grid, jobs, &out),
        Command::Compare {
            scenario,
            overrides,
            out,
        } => cmd_compare(&scenario, &overrides, out.as_deref()),
        Command::Serve {
            port,
            bind,
            assets,
            telemetry_hz,
            display_latency_ms,
        } => {
            if !(telemetry_hz > 0.0 && telemetry_hz <= 400.0) {
                return Err(CliError::Usage("--telemetry-hz must be in (0, 400]".into()));
            }
            let cfg = ServerConfig {
                assets,
                session: SessionConfig {
                    telemetry_hz,
                    display_latency: Duration::from_millis(display_latency_ms),
                    ..SessionConfig::default()
                },
            };
            serve_blocking(&bind, port, cfg)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
