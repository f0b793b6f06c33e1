use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use obdh_core::config::RunConfig;
use obdh_core::store::{TelemetryRecord, TelemetryStore};
use serde_json::Value;
use tempfile::TempDir;

mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const CONNECTION: i32 = 3;
    pub const TIMEOUT: i32 = 4;
    pub const REJECTED: i32 = 5;
    pub const IO: i32 = 6;
}

fn obdh() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_obdh"));
    c.env_remove("RUST_LOG");
    c
}

fn run_cmd(args: &[&str]) -> Output {
    obdh().args(args).output().unwrap()
}

fn stdout_lines(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

struct Running {
    child: Child,
    stdout: BufReader<ChildStdout>,
    addr: String,
    log: PathBuf,
}

impl Running {
    fn start(dir: &Path, extra: &[&str]) -> Running {
        let log = dir.join("run.err");
        let store = dir.join("tlm.log");
        let mut child = obdh()
            .arg("run")
            .args(extra)
            .args(["--listen", "127.0.0.1:0", "--store"])
            .arg(&store)
            .stdout(Stdio::piped())
            .stderr(Stdio::from(File::create(&log).unwrap()))
            .spawn()
            .unwrap();
        let mut stdout = BufReader::new(child.stdout.take().unwrap());
        let mut line = String::new();
        stdout.read_line(&mut line).unwrap();
        let ready: Value = serde_json::from_str(&line).unwrap_or_else(|e| panic!("{e}: {line:?}"));
        assert_eq!(ready["event"], "ready");
        Running {
            child,
            stdout,
            addr: ready["listen"].as_str().unwrap().to_string(),
            log,
        }
    }

    fn interrupt(mut self) -> (i32, Vec<Value>, String) {
        let status = Command::new("kill")
            .args(["-INT", &self.child.id().to_string()])
            .status()
            .unwrap();
        assert!(status.success());
        let code = self.child.wait().unwrap().code().unwrap();
        let mut rest = String::new();
        self.stdout.read_to_string(&mut rest).unwrap();
        let lines = rest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        (code, lines, fs::read_to_string(&self.log).unwrap())
    }
}

fn send(addr: &str, args: &[&str]) -> (i32, Value, String) {
    let o = obdh().arg("send").args(args).args(["--addr", addr]).output().unwrap();
    let v = stdout_lines(&o).pop().unwrap_or(Value::Null);
    (
        o.status.code().unwrap(),
        v,
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

#[test]
fn run_default_logs_each_task_and_serves_commands() {
    let dir = TempDir::new().unwrap();
    let r = Running::start(dir.path(), &[]);
    let (code, v, _) = send(&r.addr, &["1", "GET_TLM"]);
    assert_eq!(code, exit::OK);
    assert_eq!(v["status"], "ack");
    assert_eq!(v["raw_hex"].as_str().unwrap().len(), 64);

    let (code, _, err) = send(&r.addr, &["9", "GET_TLM"]);
    assert_eq!(code, exit::REJECTED);
    assert!(err.contains("unknown device"), "{err}");

    let (code, v, _) = send(&r.addr, &["4", "SET_SPEED", "000003e8"]);
    assert_eq!((code, v["status"].as_str()), (exit::REJECTED, Some("nak")));

    let (code, lines, log) = r.interrupt();
    assert_eq!(code, exit::OK);
    assert_eq!(lines.last().unwrap()["event"], "stopped");
    let started = log.lines().filter(|l| l.contains("task started")).count();
    assert_eq!(started, 7, "{log}");
    // ISO-8601 timestamps lead each log line
    let first = log.lines().next().unwrap();
    assert!(
        first.len() > 20 && first.as_bytes()[4] == b'-' && first.as_bytes()[10] == b'T',
        "{first}"
    );
}

#[test]
fn set_speed_then_get_tlm_converges_to_commanded_speed() {
    let dir = TempDir::new().unwrap();
    let r = Running::start(dir.path(), &[]);
    let (code, v, _) = send(&r.addr, &["2", "SET_SPEED", "000003e8"]);
    assert_eq!((code, v["status"].as_str()), (exit::OK, Some("ack")));
    let deadline = Instant::now() + Duration::from_secs(20);
    let mut last = -1;
    let mut history = Vec::new();
    while Instant::now() < deadline {
        let (code, v, _) = send(&r.addr, &["2", "GET_TLM"]);
        assert_eq!(code, exit::OK);
        let speed = v["decoded"]["wheel_speed"].as_i64().unwrap();
        assert!(speed >= last, "speed must not decrease: {history:?}");
        history.push(speed);
        last = speed;
        if speed == 1000 {
            break;
        }
        thread::sleep(Duration::from_millis(500));
    }
    assert_eq!(last, 1000, "{history:?}");
    r.interrupt();
}

#[test]
fn restart_continues_store_sequence_and_interrupt_leaves_clean_store() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("stream.toml");
    let mut cfg = RunConfig::default_roster();
    cfg.roster[3].stream_hz = Some(100.0);
    cfg.roster[4].stream_hz = Some(100.0);
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let cfg_arg = cfg_path.to_str().unwrap();

    let r = Running::start(dir.path(), &[cfg_arg, "--no-pacing"]);
    thread::sleep(Duration::from_millis(500));
    let (code, _, _) = r.interrupt();
    assert_eq!(code, exit::OK);
    let first_len = {
        let (store, report) = TelemetryStore::recover(dir.path().join("tlm.log")).unwrap();
        assert_eq!(report.unrecovered_bytes, 0);
        assert_eq!(report.truncated_tail_bytes, 0);
        assert!(store.len() > 10);
        store.len()
    };

    let r = Running::start(dir.path(), &[]);
    assert_eq!(send(&r.addr, &["1", "GET_TLM"]).0, exit::OK);
    r.interrupt();
    let o = run_cmd(&["dump-store", dir.path().join("tlm.log").to_str().unwrap()]);
    let seqs: Vec<u64> = stdout_lines(&o).iter().map(|v| v["seq"].as_u64().unwrap()).collect();
    assert_eq!(seqs, (0..=first_len).collect::<Vec<_>>());
}

#[test]
fn run_rejects_invalid_config() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("bad.toml");
    let mut cfg = RunConfig::default_roster();
    cfg.roster[4].dev_id = 3;
    fs::write(&p, cfg.to_toml()).unwrap();
    let o = run_cmd(&["run", p.to_str().unwrap(), "--listen", "127.0.0.1:0"]);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
    assert!(String::from_utf8_lossy(&o.stderr).contains("duplicate dev_id 3"));

    fs::write(&p, "ports = 3").unwrap();
    assert_eq!(run_cmd(&["run", p.to_str().unwrap()]).status.code(), Some(exit::CONFIG));
    let missing = dir.path().join("missing.toml");
    assert_eq!(
        run_cmd(&["run", missing.to_str().unwrap()]).status.code(),
        Some(exit::CONFIG)
    );
}

#[test]
fn run_reports_listen_failure_as_connection_error() {
    let dir = TempDir::new().unwrap();
    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = busy.local_addr().unwrap().to_string();
    let store = dir.path().join("s.log");
    let o = run_cmd(&["run", "--listen", &addr, "--store", store.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::CONNECTION));
}

#[test]
fn send_exit_codes_for_connection_and_timeout() {
    let free = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .to_string();
    let (code, _, _) = send(&free, &["1", "GET_TLM"]);
    assert_eq!(code, exit::CONNECTION);

    // a stand-in ground link that always reports a timeout
    let fake = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = fake.local_addr().unwrap().to_string();
    let server = thread::spawn(move || {
        let (s, _) = fake.accept().unwrap();
        let mut line = String::new();
        BufReader::new(s.try_clone().unwrap()).read_line(&mut line).unwrap();
        let req: Value = serde_json::from_str(&line).unwrap();
        let mut w = s;
        writeln!(
            w,
            r#"{{"op":"cmd_result","dev":{},"status":"timeout","round_trip_ms":1000.0,"raw_hex":""}}"#,
            req["dev"]
        )
        .unwrap();
        req
    });
    let (code, v, _) = send(&addr, &["3", "0x10", "--timeout-ms", "1000"]);
    assert_eq!(code, exit::TIMEOUT);
    assert_eq!(v["status"], "timeout");
    let req = server.join().unwrap();
    assert_eq!(
        (req["code"].as_u64(), req["timeout_ms"].as_u64()),
        (Some(16), Some(1000))
    );
}

fn make_store(path: &Path) -> TelemetryStore {
    let (s, _) = TelemetryStore::recover(path).unwrap();
    for i in 0..12u64 {
        let dev = if i % 2 == 0 { 4 } else { (i % 7 + 1) as u8 };
        s.append(&TelemetryRecord::new(dev, 1000 + i * 10, vec![i as u8; 8]))
            .unwrap();
    }
    s
}

#[test]
fn dump_store_matches_in_process_query() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("d.log");
    let store = make_store(&path);
    for (dev, t0, t1) in [(Some(4u8), 0u64, u64::MAX), (None, 1020, 1080), (Some(2), 0, u64::MAX)] {
        let mut args = vec!["dump-store".to_string(), path.to_str().unwrap().to_string()];
        if let Some(d) = dev {
            args.extend(["--dev".into(), d.to_string()]);
        }
        args.extend(["--t0".into(), t0.to_string(), "--t1".into(), t1.to_string()]);
        let o = obdh().args(&args).output().unwrap();
        assert_eq!(o.status.code(), Some(exit::OK));
        let got: Vec<(u64, u64, u64, String)> = stdout_lines(&o)
            .iter()
            .map(|v| {
                (
                    v["seq"].as_u64().unwrap(),
                    v["dev"].as_u64().unwrap(),
                    v["timestamp_ms"].as_u64().unwrap(),
                    v["raw_hex"].as_str().unwrap().to_string(),
                )
            })
            .collect();
        let want: Vec<_> = store
            .query(dev, t0, t1)
            .unwrap()
            .into_iter()
            .map(|r| {
                (
                    r.seq,
                    r.record.dev_id as u64,
                    r.record.timestamp_ms,
                    hex_of(&r.record.payload),
                )
            })
            .collect();
        assert_eq!(got, want);
    }
    let o = run_cmd(&["dump-store", path.to_str().unwrap(), "--dev", "4"]);
    // ids 0,2,4,6,8,10 plus 3 (3 % 7 + 1 == 4)
    assert_eq!(stdout_lines(&o).len(), 7);
}

fn hex_of(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

#[test]
fn dump_store_edge_cases() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.log");
    File::create(&empty).unwrap();
    let o = run_cmd(&["dump-store", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::OK));
    assert!(o.stdout.is_empty());

    let o = run_cmd(&["dump-store", dir.path().join("nope.log").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::IO));

    let torn = dir.path().join("torn.log");
    drop(make_store(&torn));
    let mut f = fs::OpenOptions::new().append(true).open(&torn).unwrap();
    f.write_all(&[0xA5, 4, 2, 0, 0]).unwrap();
    let o = run_cmd(&["dump-store", torn.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(exit::OK));
    assert_eq!(stdout_lines(&o).len(), 12);
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated tail of 5 bytes"));
    // reading never repairs the file
    let len_before = fs::metadata(&torn).unwrap().len();
    run_cmd(&["dump-store", torn.to_str().unwrap()]);
    assert_eq!(fs::metadata(&torn).unwrap().len(), len_before);

    let o = run_cmd(&["dump-store", torn.to_str().unwrap(), "--t0", "5", "--t1", "1"]);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
}

#[test]
fn demo_reentrancy_reports() {
    let o = run_cmd(&["demo-reentrancy", "--mode", "safe", "--writers", "4"]);
    assert_eq!(o.status.code(), Some(exit::OK));
    let v = &stdout_lines(&o)[0];
    assert_eq!(
        (v["corruption_rate"].as_f64(), v["messages_total"].as_u64()),
        (Some(0.0), Some(4000))
    );

    let o = run_cmd(&["demo-reentrancy", "--mode", "unsafe", "--writers", "1"]);
    assert_eq!(stdout_lines(&o)[0]["corruption_rate"], 0.0);

    let o = run_cmd(&["demo-reentrancy", "--writers", "0"]);
    assert_eq!(o.status.code(), Some(exit::CONFIG));
}

// Produced by the lab for seed 42, then frozen.
const GOLDEN_SEED_42: &str = r#"{"chunk":1,"corruption_rate":1.0,"first_corruption_example":"ABabCDEcFdefGghHIJijkKlLmM","messages_corrupted":2000,"messages_total":2000,"mode":"unsafe","seed":42,"trailing_bytes":0,"writers":2}"#;

#[test]
fn demo_reentrancy_unsafe_seed_42_is_frozen() {
    let args = [
        "demo-reentrancy",
        "--mode",
        "unsafe",
        "--writers",
        "2",
        "--chunk",
        "1",
        "--seed",
        "42",
    ];
    let o = run_cmd(&args);
    assert_eq!(o.status.code(), Some(exit::OK));
    let got: Value = serde_json::from_slice(&o.stdout).unwrap();
    let want: Value = serde_json::from_str(GOLDEN_SEED_42).unwrap();
    assert_eq!(got, want);
    assert_eq!(run_cmd(&args).stdout, o.stdout);
}

#[test]
fn scenario_runs_and_reports_failures() {
    let dir = TempDir::new().unwrap();
    let ok = dir.path().join("ok.toml");
    fs::write(
        &ok,
        r#"
pacing_enabled = false
[[steps]]
action = "burst"
code = "GET_TLM"
repeat = 2
expect = "ack"
[[steps]]
action = "suspend"
task_id = "rx-ttyOS2"
[[steps]]
action = "send"
dev = 3
code = "GET_TLM"
expect = "port_suspended"
[[steps]]
action = "resume"
task_id = "rx-ttyOS2"
[[steps]]
action = "check"
state = "RUNNING"
max_crc_errors = 0
"#,
    )
    .unwrap();
    let o = run_cmd(&["scenario", ok.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(exit::OK),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let lines = stdout_lines(&o);
    assert_eq!(lines.len(), 6);
    assert!(lines[..5].iter().all(|l| l["ok"] == true));
    assert_eq!(lines[5]["failed"], 0);

    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        "pacing_enabled = false\n[[steps]]\naction = \"send\"\ndev = 1\ncode = \"GET_TLM\"\nexpect = \"nak\"\n",
    )
    .unwrap();
    assert_eq!(
        run_cmd(&["scenario", bad.to_str().unwrap()]).status.code(),
        Some(exit::REJECTED)
    );

    fs::write(&bad, "[[steps]]\naction = \"teleport\"\n").unwrap();
    assert_eq!(
        run_cmd(&["scenario", bad.to_str().unwrap()]).status.code(),
        Some(exit::CONFIG)
    );
}

#[test]
fn default_config_round_trips() {
    let o = run_cmd(&["default-config"]);
    assert_eq!(o.status.code(), Some(exit::OK));
    let c = RunConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(c, RunConfig::default_roster());
}

#[test]
fn bundled_smoke_scenario_passes() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/smoke.toml");
    let o = run_cmd(&["scenario", path]);
    assert_eq!(
        o.status.code(),
        Some(exit::OK),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    let done = stdout_lines(&o).pop().unwrap();
    assert_eq!((done["steps"].as_u64(), done["failed"].as_u64()), (Some(9), Some(0)));
}
