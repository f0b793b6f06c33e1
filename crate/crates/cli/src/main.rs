use std::fmt;
use std::io::{self, ErrorKind, IsTerminal, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use obdh_core::config::{RunConfig, DEFAULT_CONFIG_TOML, DEFAULT_LISTEN};
use obdh_core::ground_link::{protocol, serve, Client, GroundLinkOptions};
use obdh_core::reentrancy::{run_demo, DemoConfig, DemoMode, Scheduling, DEFAULT_MESSAGE_LEN};
use obdh_core::scenario::{Scenario, ScenarioError};
use obdh_core::store::{read_store, ScanStop};
use obdh_core::supervisor::{Supervisor, SupervisorError};
use serde_json::{json, Value};
use tracing::info;
use tracing_subscriber::EnvFilter;

mod exit {
    pub const OK: u8 = 0;
    pub const INTERNAL: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const CONNECTION: u8 = 3;
    pub const TIMEOUT: u8 = 4;
    pub const REJECTED: u8 = 5;
    pub const IO: u8 = 6;
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

type CliResult = Result<u8, Failure>;

#[derive(Debug, Parser)]
#[command(name = "obdh", version, about = "Multitasking OBDH core with simulated subsystems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the OBDH and its ground link until interrupted.
    Run {
        /// Run config (TOML). The bundled seven-device roster when omitted.
        config: Option<PathBuf>,
        /// Override the ground-link listen address.
        #[arg(long)]
        listen: Option<String>,
        /// Override the telemetry store path.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Disable baud-rate pacing on every port.
        #[arg(long)]
        no_pacing: bool,
    },
    /// Send one command through a running OBDH and print the result.
    Send {
        /// Target device id.
        dev: u8,
        /// Command name (GET_TLM, SET_SPEED) or number (decimal or 0x..).
        code: String,
        /// Command parameters as hex.
        params_hex: Option<String>,
        /// Ground-link address of the running OBDH.
        #[arg(long, default_value = DEFAULT_LISTEN)]
        addr: String,
        /// Command timeout; the OBDH's configured default when omitted.
        #[arg(long)]
        timeout_ms: Option<u64>,
    },
    /// Print stored telemetry records as JSON lines.
    DumpStore {
        /// Store file (sealed `<path>.N` segments are read too).
        path: PathBuf,
        /// Only records from this device.
        #[arg(long)]
        dev: Option<u8>,
        /// Earliest timestamp, ms since the Unix epoch (inclusive).
        #[arg(long, default_value_t = 0)]
        t0: u64,
        /// Latest timestamp, ms since the Unix epoch (inclusive).
        #[arg(long, default_value_t = u64::MAX)]
        t1: u64,
    },
    /// Run the interleaved-writer corruption demo.
    DemoReentrancy {
        #[arg(long, value_enum, default_value_t = ModeArg::Unsafe)]
        mode: ModeArg,
        #[arg(long, default_value_t = 2)]
        writers: usize,
        /// Messages per writer.
        #[arg(long, default_value_t = 1000)]
        messages: usize,
        /// Bytes per write step.
        #[arg(long, default_value_t = 1)]
        chunk: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MESSAGE_LEN)]
        message_len: usize,
        /// Use real threads instead of the seeded scheduler (not reproducible).
        #[arg(long)]
        host_threads: bool,
    },
    /// Run a scripted scenario file.
    Scenario {
        /// Scenario file (TOML).
        file: PathBuf,
    },
    /// Print the bundled default run config.
    DefaultConfig,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Unsafe,
    Safe,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Run { .. }) {
        "info"
    } else {
        "warn"
    };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_ansi(io::stderr().is_terminal())
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .init();

    let result = match cli.command {
        Command::Run {
            config,
            listen,
            store,
            no_pacing,
        } => run(config, listen, store, no_pacing),
        Command::Send {
            dev,
            code,
            params_hex,
            addr,
            timeout_ms,
        } => send(dev, &code, params_hex, &addr, timeout_ms),
        Command::DumpStore { path, dev, t0, t1 } => dump_store(path, dev, t0, t1),
        Command::DemoReentrancy {
            mode,
            writers,
            messages,
            chunk,
            seed,
            message_len,
            host_threads,
        } => {
            let mut c = DemoConfig::new(
                match mode {
                    ModeArg::Unsafe => DemoMode::Unsafe,
                    ModeArg::Safe => DemoMode::Safe,
                },
                writers,
                messages,
            )
            .chunk(chunk)
            .seed(seed);
            c.message_len = message_len;
            if host_threads {
                c.scheduling = Scheduling::Host;
            }
            demo(&c)
        }
        Command::Scenario { file } => scenario(file),
        Command::DefaultConfig => {
            print!("{DEFAULT_CONFIG_TOML}");
            Ok(exit::OK)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn print_json(v: &Value) {
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{v}");
    let _ = out.flush();
}

fn supervisor_failure(e: SupervisorError) -> Failure {
    let code = match e {
        SupervisorError::Config(_) => exit::CONFIG,
        SupervisorError::Store(_) => exit::IO,
        _ => exit::INTERNAL,
    };
    Failure::new(code, e)
}

fn run(config: Option<PathBuf>, listen: Option<String>, store: Option<PathBuf>, no_pacing: bool) -> CliResult {
    let mut cfg = match &config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::new(exit::CONFIG, e))?,
        None => RunConfig::default_roster(),
    };
    if let Some(l) = listen {
        cfg.ground_listen = l;
    }
    if let Some(s) = store {
        cfg.store_path = s;
    }
    if no_pacing {
        cfg.pacing_enabled = false;
    }
    cfg.validate().map_err(|e| Failure::new(exit::CONFIG, e))?;
    let listen = cfg.ground_listen.clone();
    let queue_bound = cfg.session_queue;

    let sup = Supervisor::start(cfg).map_err(supervisor_failure)?;
    let mut link = serve(
        listen.as_str(),
        sup.clone(),
        GroundLinkOptions {
            queue_bound,
            ..Default::default()
        },
    )
    .map_err(|e| Failure::new(exit::CONNECTION, e))?;

    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(|e| Failure::new(exit::INTERNAL, format!("cannot install signal handler: {e}")))?;

    print_json(&json!({
        "event": "ready",
        "listen": link.local_addr().to_string(),
        "tasks": sup.task_ids(),
        "store": sup.store().path(),
        "recovery": sup.recovery_report(),
    }));
    let _ = rx.recv();
    info!("interrupt received; shutting down");
    link.shutdown();
    sup.shutdown();
    print_json(&json!({"event": "stopped", "store_records": sup.store().len()}));
    Ok(exit::OK)
}

fn parse_code(code: &str) -> Value {
    let n = match code.strip_prefix("0x").or_else(|| code.strip_prefix("0X")) {
        Some(h) => u8::from_str_radix(h, 16).ok(),
        None => code.parse::<u8>().ok(),
    };
    n.map(Value::from).unwrap_or_else(|| Value::from(code))
}

fn send(dev: u8, code: &str, params_hex: Option<String>, addr: &str, timeout_ms: Option<u64>) -> CliResult {
    let mut client = Client::connect(addr, Duration::from_secs(3))
        .map_err(|e| Failure::new(exit::CONNECTION, format!("cannot connect to {addr}: {e}")))?;
    let wait = Duration::from_millis(timeout_ms.unwrap_or(1000)) + Duration::from_secs(10);
    client
        .set_read_timeout(Some(wait))
        .map_err(|e| Failure::new(exit::CONNECTION, e))?;
    let mut req = json!({"op": "send_cmd", "dev": dev, "code": parse_code(code)});
    if let Some(p) = params_hex {
        req["params_hex"] = p.into();
    }
    if let Some(t) = timeout_ms {
        req["timeout_ms"] = t.into();
    }
    let reply = client.request(&req).map_err(|e| {
        let what = if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) {
            "no reply from OBDH".to_string()
        } else {
            format!("connection lost: {e}")
        };
        Failure::new(exit::CONNECTION, what)
    })?;
    print_json(&reply);
    match (reply["op"].as_str(), reply["status"].as_str()) {
        (Some("cmd_result"), Some("ack")) => Ok(exit::OK),
        (Some("cmd_result"), Some("timeout")) => Err(Failure::new(exit::TIMEOUT, "command timed out")),
        (Some("cmd_result"), Some(status)) => Err(Failure::new(exit::REJECTED, format!("command {status}"))),
        (Some("error"), _) => Err(Failure::new(
            exit::REJECTED,
            reply["message"].as_str().unwrap_or("request rejected"),
        )),
        _ => Err(Failure::new(exit::INTERNAL, "unexpected reply")),
    }
}

fn describe_stop(label: &str, stop: &ScanStop) {
    match stop {
        ScanStop::Clean => {}
        ScanStop::TruncatedTail { bytes } => {
            eprintln!("warning: {label}: truncated tail of {bytes} bytes ignored");
        }
        ScanStop::Corrupt { offset, bytes } => {
            eprintln!("warning: {label}: corrupt record at offset {offset}; {bytes} bytes not readable");
        }
    }
}

fn dump_store(path: PathBuf, dev: Option<u8>, t0: u64, t1: u64) -> CliResult {
    if t0 > t1 {
        return Err(Failure::new(exit::CONFIG, format!("--t0 {t0} exceeds --t1 {t1}")));
    }
    let dump = read_store(&path).map_err(|e| Failure::new(exit::IO, format!("{}: {e}", path.display())))?;
    for (i, stop) in dump.segment_stops.iter().enumerate() {
        describe_stop(&format!("segment {}", i + 1), stop);
    }
    describe_stop("active file", &dump.active_stop);
    let records = dump.query(dev, t0, t1).map_err(|e| Failure::new(exit::CONFIG, e))?;
    let mut out = io::stdout().lock();
    for r in records {
        writeln!(out, "{}", protocol::record_json(r, None)).map_err(|e| Failure::new(exit::IO, e))?;
    }
    Ok(exit::OK)
}

fn demo(c: &DemoConfig) -> CliResult {
    let report = run_demo(c).map_err(|e| Failure::new(exit::CONFIG, e))?;
    let mut v = serde_json::to_value(&report).map_err(|e| Failure::new(exit::INTERNAL, e))?;
    v["mode"] = serde_json::to_value(c.mode).map_err(|e| Failure::new(exit::INTERNAL, e))?;
    v["writers"] = c.writer_count.into();
    v["chunk"] = c.chunk_size.into();
    v["seed"] = c.seed.into();
    print_json(&v);
    Ok(exit::OK)
}

fn scenario(file: PathBuf) -> CliResult {
    let s = Scenario::load(&file).map_err(|e| {
        let code = match e {
            ScenarioError::Io { .. } => exit::IO,
            _ => exit::CONFIG,
        };
        Failure::new(code, e)
    })?;
    let scratch = std::env::temp_dir().join(format!("obdh-scenario-{}", std::process::id()));
    std::fs::create_dir_all(&scratch).map_err(|e| Failure::new(exit::IO, e))?;
    let result = s.run(&scratch, |step| {
        if let Ok(v) = serde_json::to_value(step) {
            print_json(&v);
        }
    });
    let _ = std::fs::remove_dir_all(&scratch);
    let report = result.map_err(|e| {
        let code = match e {
            ScenarioError::Config(_) | ScenarioError::Step { .. } | ScenarioError::Parse(_) => exit::CONFIG,
            _ => exit::INTERNAL,
        };
        Failure::new(code, e)
    })?;
    print_json(
        &json!({"event": "scenario_done", "steps": report.steps, "failed": report.failed, "elapsed_ms": report.elapsed_ms}),
    );
    if report.failed == 0 {
        Ok(exit::OK)
    } else {
        Err(Failure::new(
            exit::REJECTED,
            format!("{} step(s) failed", report.failed),
        ))
    }
}
