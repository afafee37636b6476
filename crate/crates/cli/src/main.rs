use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use urgent_cli::api::{parse_command, Query};
use urgent_cli::backend::{Backend, Local, Remote};
use urgent_cli::server::{self, AppState};
use urgent_core::gateway::{IncidentDescriptor, SensorEnvelope, SourceRegistration};
use urgent_core::store::StateStore;
use urgent_core::system::{Command, EventFilter, Orchestrator, Scenario, SystemConfig, SystemHandle};
use urgent_core::SimTime;

#[derive(Parser)]
#[command(name = "urgentctl", version, about = "Drive the urgent-computing orchestrator")]
struct Cli {
    /// Event log to operate on directly.
    #[arg(long, global = true, default_value = "urgent.log")]
    log: PathBuf,
    /// Send requests to a running server instead of opening the log.
    #[arg(long, global = true)]
    server: Option<String>,
    /// Bearer token for the HTTP API.
    #[arg(long, global = true, env = "URGENT_TOKEN")]
    token: Option<String>,
    /// System configuration (YAML), used when a new log is created.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create and list incidents.
    #[command(subcommand)]
    Incident(IncidentCmd),
    /// Register sensor sources.
    #[command(subcommand)]
    Source(SourceCmd),
    /// Push sensor envelopes.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Inspect federated jobs.
    #[command(subcommand)]
    Job(JobCmd),
    /// Post an operator or raw command given as JSON (or @file).
    Command { json: String },
    /// Advance simulated time.
    Advance { time: SimTime },
    /// Machine health and queue summary.
    Machines,
    /// Ensembles, members and latest telemetry.
    Ensembles,
    /// Page through workflow events.
    Events(EventArgs),
    /// Print the action trace.
    Trace,
    /// Counters for the whole system.
    Status,
    /// Run scenario scripts.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Rebuild state from a log and summarize it.
    Replay {
        log: PathBuf,
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        events: bool,
    },
    /// Rewrite a log as a single checkpoint.
    Compact { log: PathBuf },
    /// Serve the HTTP API and live stream.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Simulated seconds per wall-clock second; 0 leaves the clock to
        /// `advance_to` commands.
        #[arg(long, default_value_t = 0.0)]
        speed: f64,
        /// Clock pacing interval when `--speed` is set.
        #[arg(long, default_value_t = 1000)]
        tick_ms: u64,
    },
}

#[derive(Subcommand)]
enum IncidentCmd {
    Create {
        #[arg(long)]
        id: String,
        #[arg(long)]
        label: String,
        #[arg(long)]
        tokens: f64,
        #[arg(long, default_value = "wildfire")]
        rule_set: String,
    },
    List,
}

#[derive(Subcommand)]
enum SourceCmd {
    Register {
        #[arg(long)]
        id: String,
        #[arg(long)]
        incident: String,
    },
}

#[derive(Subcommand)]
enum IngestCmd {
    /// Send envelopes from a file: one JSON document, or one per line.
    Send { file: PathBuf },
}

#[derive(Subcommand)]
enum JobCmd {
    /// One request by id, or every request of an incident.
    Status {
        request_id: Option<String>,
        #[arg(long)]
        incident: Option<String>,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Run a scenario file end to end on a fresh in-memory log, or on
    /// `--log` when it is given explicitly and empty.
    Run {
        file: PathBuf,
        /// Print the action trace instead of a summary.
        #[arg(long)]
        trace: bool,
        /// Print every workflow event as NDJSON.
        #[arg(long)]
        events: bool,
        /// Keep the resulting log at this path.
        #[arg(long)]
        save: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EventArgs {
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    incident: Option<String>,
    #[arg(long)]
    since: Option<u64>,
    #[arg(long)]
    limit: Option<usize>,
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<SystemConfig, String> {
    match path {
        Some(p) => serde_yaml::from_str(&read(p)?).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(SystemConfig::default()),
    }
}

fn print(v: &Value) {
    match v {
        Value::String(s) => print!("{s}"),
        other => println!("{}", serde_json::to_string_pretty(other).expect("json prints")),
    }
}

fn open_backend(cli: &Cli) -> Result<Box<dyn Backend>, String> {
    match &cli.server {
        Some(url) => Ok(Box::new(Remote::new(url, cli.token.clone()))),
        None => Ok(Box::new(Local::open(&cli.log, load_config(cli.config.as_deref())?)?.0)),
    }
}

fn envelopes(text: &str) -> Result<Vec<SensorEnvelope>, String> {
    if let Ok(one) = serde_json::from_str::<SensorEnvelope>(text) {
        return Ok(vec![one]);
    }
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(|e| e.to_string())).collect()
}

fn summary(orch: &Orchestrator) -> Value {
    urgent_cli::api::run_query(orch.system(), &Query::Status).unwrap_or(Value::Null)
}

fn run(cli: Cli) -> Result<bool, String> {
    let commands: Vec<Command> = match &cli.command {
        Cmd::Incident(IncidentCmd::Create { id, label, tokens, rule_set }) => vec![Command::CreateIncident {
            incident: IncidentDescriptor { incident_id: id.clone(), label: label.clone(), tokens: *tokens, active: true, rule_set: rule_set.clone() },
        }],
        Cmd::Source(SourceCmd::Register { id, incident }) => {
            vec![Command::RegisterSource { source: SourceRegistration { source_id: id.clone(), incident_id: incident.clone() } }]
        }
        Cmd::Ingest(IngestCmd::Send { file }) => envelopes(&read(file)?)?.into_iter().map(|envelope| Command::Ingest { envelope }).collect(),
        Cmd::Command { json } => {
            let text = match json.strip_prefix('@') {
                Some(path) => read(Path::new(path))?,
                None => json.clone(),
            };
            vec![parse_command(serde_json::from_str(&text).map_err(|e| e.to_string())?)?]
        }
        Cmd::Advance { time } => vec![Command::AdvanceTo { time: *time }],
        _ => Vec::new(),
    };
    if !commands.is_empty() {
        let mut backend = open_backend(&cli)?;
        let mut ok = true;
        for c in commands {
            let reply = backend.execute(c)?;
            ok &= reply.ok;
            print(&serde_json::to_value(&reply).expect("reply serializes"));
        }
        return Ok(ok);
    }
    let query = match &cli.command {
        Cmd::Incident(IncidentCmd::List) => Some(Query::Incidents),
        Cmd::Job(JobCmd::Status { request_id, incident }) => Some(Query::Jobs { incident_id: incident.clone(), request_id: request_id.clone() }),
        Cmd::Machines => Some(Query::Machines),
        Cmd::Ensembles => Some(Query::Ensembles),
        Cmd::Events(a) => Some(Query::Events(EventFilter { kind: a.kind.clone(), incident_id: a.incident.clone(), since: a.since, limit: a.limit })),
        Cmd::Trace => Some(Query::Trace),
        Cmd::Status => Some(Query::Status),
        _ => None,
    };
    if let Some(q) = query {
        print(&open_backend(&cli)?.query(&q)?);
        return Ok(true);
    }
    match cli.command {
        Cmd::Scenario(ScenarioCmd::Run { file, trace, events, save }) => {
            let scenario = Scenario::parse(&read(&file)?).map_err(|e| e.to_string())?;
            let config = load_config(cli.config.as_deref())?;
            let store = match &save {
                Some(p) => StateStore::open(p).map_err(|e| e.to_string())?,
                None => StateStore::in_memory(),
            };
            let mut orch = Orchestrator::create(config, store).map_err(|e| e.to_string())?;
            let replies = scenario.run(&mut orch).map_err(|e| e.to_string())?;
            let rejected: Vec<Value> = replies.iter().filter(|r| !r.ok).map(|r| serde_json::to_value(r).expect("reply serializes")).collect();
            if trace {
                print!("{}", orch.system().trace_text());
            } else if events {
                orch.system().events().for_each(|e| println!("{}", e.to_line()));
            } else {
                print(&json!({"commands": replies.len(), "rejected": rejected, "status": summary(&orch)}));
            }
            Ok(true)
        }
        Cmd::Replay { log, trace, events } => {
            let store = StateStore::open(&log).map_err(|e| e.to_string())?;
            let (orch, report) = Orchestrator::recover(store).map_err(|e| e.to_string())?;
            if trace {
                print!("{}", orch.system().trace_text());
            } else if events {
                orch.system().events().for_each(|e| println!("{}", e.to_line()));
            } else {
                print(&json!({"recovery": report, "status": summary(&orch)}));
            }
            Ok(true)
        }
        Cmd::Compact { log } => {
            let store = StateStore::open(&log).map_err(|e| e.to_string())?;
            let (mut orch, _) = Orchestrator::recover(store).map_err(|e| e.to_string())?;
            let seq = orch.compact().map_err(|e| e.to_string())?;
            print(&json!({"checkpoint_seq": seq}));
            Ok(true)
        }
        Cmd::Serve { addr, speed, tick_ms } => {
            let (local, report) = Local::open(&cli.log, load_config(cli.config.as_deref())?)?;
            if let Some(r) = report {
                eprintln!("recovered {} from checkpoint {} (+{} commands)", cli.log.display(), r.checkpoint_seq, r.replayed);
            }
            let (handle, _worker) = SystemHandle::spawn(local.orch);
            let state = AppState::new(handle, cli.token.clone());
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| e.to_string())?;
                eprintln!("listening on {}", listener.local_addr().map_err(|e| e.to_string())?);
                if speed > 0.0 {
                    tokio::spawn(server::pace_clock(state.clone(), speed, Duration::from_millis(tick_ms.max(1))));
                }
                server::serve(listener, state).await.map_err(|e| e.to_string())
            })?;
            Ok(true)
        }
        _ => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("urgentctl: {e}");
            ExitCode::from(2)
        }
    }
}
