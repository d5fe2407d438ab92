use std::io::BufRead;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cascadefer::calibration::CalibratorSet;
use cascadefer::config::CascadeConfig;
use cascadefer::engine::Cascade;
use cascadefer::gateway::{self, AppState, Gateway};
use cascadefer::harness::report::write_run;
use cascadefer::harness::{
    emit_report, pareto_sweep, parse_report, reference, run_stream, synthetic_workload, Mode,
    ReportFormat, WorkloadSpec,
};
use cascadefer::solvers::{EndpointConfig, RemoteBackend, ReplayBackend, Solver, TraceStore};
use cascadefer::types::Query;

#[derive(Parser)]
#[command(
    name = "cascadefer",
    version,
    about = "Cost-aware LLM cascade with human deferral"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StreamArgs {
    /// Cascade config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic workload spec (TOML). Defaults to the reference workload.
    #[arg(long, conflicts_with = "queries")]
    workload: Option<PathBuf>,
    /// Labeled queries (JSONL) answered from `--traces` instead of a synthetic workload.
    #[arg(long, requires = "traces")]
    queries: Option<PathBuf>,
    #[arg(long, requires = "queries")]
    traces: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stream and write its report and artifacts.
    Run {
        #[command(flatten)]
        stream: StreamArgs,
        #[arg(long, value_enum, default_value = "online")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online runs over several lambda values; prints cost/accuracy points.
    Sweep {
        #[command(flatten)]
        stream: StreamArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        /// Write the points as CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a JSON report into CSV tables or re-emit it.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: ReportFormat,
        /// File (json) or directory (csv). JSON goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP gateway.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, value_enum)]
        backend: BackendKind,
        /// Trace file for the replay backend.
        #[arg(long, required_if_eq("backend", "replay"))]
        traces: Option<PathBuf>,
        /// Endpoint settings (TOML) for the remote backend.
        #[arg(long)]
        endpoint: Option<PathBuf>,
        /// Fitted calibrators (JSON); defaults to `<data-dir>/calibrators.json` if present.
        #[arg(long)]
        calibrators: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, env = "CASCADEFER_TOKEN", hide_env_values = true)]
        token: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Replay,
    Remote,
}

fn load_config(path: Option<&Path>) -> Result<CascadeConfig> {
    let config = match path {
        Some(p) => CascadeConfig::load(p)?,
        None => CascadeConfig::default(),
    };
    Ok(config.apply_env_overrides()?.validate()?)
}

fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Query =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let errors = q.validate();
        if !errors.is_empty() {
            bail!(
                "{}:{}: {}",
                path.display(),
                i + 1,
                cascadefer::error::ValidationErrors(errors)
            );
        }
        out.push(q);
    }
    Ok(out)
}

fn load_stream(args: &StreamArgs) -> Result<(CascadeConfig, Vec<Query>, Arc<dyn Solver>)> {
    let config = load_config(args.config.as_deref())?;
    if let (Some(q), Some(t)) = (&args.queries, &args.traces) {
        let store =
            TraceStore::load(t).with_context(|| format!("loading traces {}", t.display()))?;
        return Ok((
            config,
            load_queries(q)?,
            Arc::new(ReplayBackend::new(store)),
        ));
    }
    let spec = match &args.workload {
        Some(p) => WorkloadSpec::load(p)?,
        None => reference::reference_workload(config.seed),
    };
    Ok((config, synthetic_workload(&spec), Arc::new(spec.backend())))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run { stream, mode, out } => {
            let (config, queries, backend) = load_stream(&stream)?;
            let run = run_stream(&queries, &config, mode, backend)?;
            write_run(&run, &out)?;
            let r = &run.report;
            println!(
                "mode={:?} queries={} accuracy={:.4} mean_cost={:.1} cost_multiple={:.2} expert_load={:.4}",
                r.mode, r.n_queries, r.final_accuracy, r.mean_cost, r.cost_multiple, r.expert_load
            );
        }
        Command::Sweep {
            stream,
            lambdas,
            out,
        } => {
            let (config, queries, backend) = load_stream(&stream)?;
            let points = pareto_sweep(&lambdas, &config, &queries, backend)?;
            let sink: Box<dyn std::io::Write> = match &out {
                Some(p) => Box::new(
                    std::fs::File::create(p)
                        .with_context(|| format!("creating {}", p.display()))?,
                ),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut w = csv::Writer::from_writer(sink);
            for p in &points {
                w.serialize(p)?;
            }
            w.flush()?;
        }
        Command::Report { input, format, out } => {
            let report = parse_report(&input)?;
            match (format, out) {
                (_, Some(path)) => emit_report(&report, format, &path)?,
                (ReportFormat::Json, None) => {
                    use std::io::Write;
                    std::io::stdout()
                        .write_all(&cascadefer::harness::report::report_json(&report))?;
                }
                (ReportFormat::Csv, None) => bail!("--format csv needs --out <dir>"),
            }
        }
        Command::Serve {
            config,
            data_dir,
            backend,
            traces,
            endpoint,
            calibrators,
            bind,
            token,
        } => {
            let config = load_config(config.as_deref())?;
            let backend: Arc<dyn Solver> = match backend {
                BackendKind::Replay => {
                    let path = traces.context("--traces is required for the replay backend")?;
                    Arc::new(ReplayBackend::new(
                        TraceStore::load(&path)
                            .with_context(|| format!("loading traces {}", path.display()))?,
                    ))
                }
                BackendKind::Remote => {
                    let ep = match endpoint {
                        Some(p) => {
                            let text = std::fs::read_to_string(&p)
                                .with_context(|| format!("reading {}", p.display()))?;
                            toml::from_str::<EndpointConfig>(&text)
                                .with_context(|| format!("parsing {}", p.display()))?
                        }
                        None => EndpointConfig::default(),
                    };
                    Arc::new(RemoteBackend::new(ep.with_env_key()))
                }
            };
            let cal_path = calibrators.unwrap_or_else(|| data_dir.join("calibrators.json"));
            let calibrators = if cal_path.exists() {
                CalibratorSet::load(&cal_path)
                    .with_context(|| format!("loading {}", cal_path.display()))?
            } else {
                tracing::warn!(path = %cal_path.display(), "no calibrators found; raw confidences pass through");
                CalibratorSet::default()
            };
            let gw = Gateway::open(&data_dir, Cascade::new(config, backend, calibrators))?;
            let state = AppState {
                gateway: Arc::new(gw),
                token: token.map(Into::into),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(bind)
                    .await
                    .with_context(|| format!("binding {bind}"))?;
                println!("listening on {}", listener.local_addr()?);
                gateway::serve(listener, state, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
