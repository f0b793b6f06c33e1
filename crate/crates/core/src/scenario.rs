//! Scripted scenarios: bring up an OBDH in-process and run a list of steps
//! (commands, bursts, task control, fault injection, checks) against it.
//!
//! Scenarios are TOML files:
//!
//! ```toml
//! pacing_enabled = false
//!
//! [[steps]]
//! action = "send"
//! dev = 1
//! code = "GET_TLM"
//! expect = "ack"
//! repeat = 10
//!
//! [[steps]]
//! action = "suspend"
//! task_id = "rx-ttyOS2"
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bus::{FaultSpec, Side};
use crate::config::{ConfigError, RunConfig};
use crate::devices::cmd;
use crate::supervisor::{CommandStatus, Supervisor, SupervisorError, TaskState};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scenario step {index}: {message}")]
    Step { index: usize, message: String },
    #[error(transparent)]
    Supervisor(#[from] SupervisorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CodeSpec {
    Number(u8),
    Name(String),
}

impl CodeSpec {
    pub fn resolve(&self) -> Option<u8> {
        match self {
            CodeSpec::Number(n) => Some(*n),
            CodeSpec::Name(s) => cmd::from_name(s),
        }
    }
}

fn one() -> u32 {
    1
}

fn obdh_side() -> Side {
    Side::ObdhSide
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// Dispatch one command `repeat` times in sequence.
    Send {
        dev: u8,
        code: CodeSpec,
        #[serde(default)]
        params_hex: String,
        #[serde(default = "one")]
        repeat: u32,
        #[serde(default)]
        expect: Option<CommandStatus>,
        #[serde(default)]
        timeout_ms: Option<u64>,
    },
    /// Dispatch to several devices at once, `repeat` rounds. Empty `devs`
    /// means every roster device.
    Burst {
        #[serde(default)]
        devs: Vec<u8>,
        code: CodeSpec,
        #[serde(default)]
        params_hex: String,
        #[serde(default = "one")]
        repeat: u32,
        #[serde(default)]
        expect: Option<CommandStatus>,
    },
    Suspend {
        task_id: String,
    },
    Resume {
        task_id: String,
    },
    Sleep {
        ms: u64,
    },
    InjectFault {
        port_id: String,
        #[serde(default = "obdh_side")]
        side: Side,
        fault: FaultSpec,
    },
    ClearFault {
        port_id: String,
        #[serde(default = "obdh_side")]
        side: Side,
    },
    /// Asserts on the current snapshot.
    Check {
        #[serde(default)]
        task_id: Option<String>,
        #[serde(default)]
        state: Option<TaskState>,
        #[serde(default)]
        max_crc_errors: Option<u64>,
        #[serde(default)]
        min_store_records: Option<u64>,
    },
}

impl Step {
    fn name(&self) -> &'static str {
        match self {
            Step::Send { .. } => "send",
            Step::Burst { .. } => "burst",
            Step::Suspend { .. } => "suspend",
            Step::Resume { .. } => "resume",
            Step::Sleep { .. } => "sleep",
            Step::InjectFault { .. } => "inject_fault",
            Step::ClearFault { .. } => "clear_fault",
            Step::Check { .. } => "check",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Run config to start from; the bundled roster when absent. Relative
    /// paths resolve against the scenario file's directory.
    #[serde(default)]
    pub config: Option<PathBuf>,
    #[serde(default)]
    pub pacing_enabled: Option<bool>,
    /// Where telemetry goes; a throwaway temp file when absent.
    #[serde(default)]
    pub store_path: Option<PathBuf>,
    #[serde(default)]
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub index: usize,
    pub action: &'static str,
    pub ok: bool,
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub steps: usize,
    pub failed: usize,
    pub elapsed_ms: u64,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut s = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut s.config, &mut s.store_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }

    /// Builds the run config this scenario executes against.
    pub fn run_config(&self, scratch: &Path) -> Result<RunConfig, ScenarioError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default_roster(),
        };
        if let Some(p) = self.pacing_enabled {
            c.pacing_enabled = p;
        }
        c.store_path = self
            .store_path
            .clone()
            .unwrap_or_else(|| scratch.join("scenario-telemetry.log"));
        c.validate()?;
        for (i, step) in self.steps.iter().enumerate() {
            let bad = |message: String| ScenarioError::Step { index: i, message };
            match step {
                Step::Send { code, params_hex, .. } | Step::Burst { code, params_hex, .. } => {
                    code.resolve().ok_or_else(|| bad(format!("unknown command {code:?}")))?;
                    hex::decode(params_hex).map_err(|e| bad(format!("params_hex: {e}")))?;
                }
                Step::InjectFault { port_id, .. } | Step::ClearFault { port_id, .. } if c.port(port_id).is_none() => {
                    return Err(bad(format!("unknown port '{port_id}'")));
                }
                _ => {}
            }
        }
        Ok(c)
    }

    /// Runs every step, reporting each through `on_step`. Failed
    /// expectations are reported, not fatal; bad references are errors.
    pub fn run(&self, scratch: &Path, mut on_step: impl FnMut(&StepReport)) -> Result<ScenarioReport, ScenarioError> {
        let config = self.run_config(scratch)?;
        let timeout = config.command_timeout();
        let sup = Supervisor::start(config)?;
        let started = Instant::now();
        let mut failed = 0;
        for (index, step) in self.steps.iter().enumerate() {
            let (ok, detail) = run_step(&sup, step, timeout).map_err(|e| ScenarioError::Step {
                index,
                message: e.to_string(),
            })?;
            if !ok {
                failed += 1;
            }
            on_step(&StepReport {
                index,
                action: step.name(),
                ok,
                detail,
            });
        }
        sup.shutdown();
        Ok(ScenarioReport {
            steps: self.steps.len(),
            failed,
            elapsed_ms: started.elapsed().as_millis() as u64,
        })
    }
}

#[derive(Debug, Default, Serialize)]
struct Tally {
    ack: u64,
    nak: u64,
    timeout: u64,
    port_suspended: u64,
    max_round_trip_ms: f64,
}

impl Tally {
    fn add(&mut self, status: CommandStatus, rt: Duration) {
        match status {
            CommandStatus::Ack => self.ack += 1,
            CommandStatus::Nak => self.nak += 1,
            CommandStatus::Timeout => self.timeout += 1,
            CommandStatus::PortSuspended => self.port_suspended += 1,
        }
        self.max_round_trip_ms = self.max_round_trip_ms.max(rt.as_secs_f64() * 1000.0);
    }

    fn count(&self, status: CommandStatus) -> u64 {
        match status {
            CommandStatus::Ack => self.ack,
            CommandStatus::Nak => self.nak,
            CommandStatus::Timeout => self.timeout,
            CommandStatus::PortSuspended => self.port_suspended,
        }
    }

    fn total(&self) -> u64 {
        self.ack + self.nak + self.timeout + self.port_suspended
    }
}

fn run_step(sup: &Supervisor, step: &Step, timeout: Duration) -> Result<(bool, Value), SupervisorError> {
    let code_params = |code: &CodeSpec, params_hex: &str| {
        (
            code.resolve().expect("validated"),
            hex::decode(params_hex).expect("validated"),
        )
    };
    Ok(match step {
        Step::Send {
            dev,
            code,
            params_hex,
            repeat,
            expect,
            timeout_ms,
        } => {
            let (code, params) = code_params(code, params_hex);
            let t = timeout_ms.map(Duration::from_millis).unwrap_or(timeout);
            let mut tally = Tally::default();
            for _ in 0..*repeat {
                let o = sup.dispatch_command(*dev, code, &params, t)?;
                tally.add(o.status, o.round_trip);
            }
            let ok = expect.is_none_or(|e| tally.count(e) == tally.total());
            (ok, json!({"dev": dev, "expect": expect, "outcomes": tally}))
        }
        Step::Burst {
            devs,
            code,
            params_hex,
            repeat,
            expect,
        } => {
            let (code, params) = code_params(code, params_hex);
            let devs = if devs.is_empty() {
                sup.device_ids()
            } else {
                devs.clone()
            };
            let mut tally = Tally::default();
            for _ in 0..*repeat {
                let results: Vec<_> = thread::scope(|s| {
                    let handles: Vec<_> = devs
                        .iter()
                        .map(|&d| {
                            let params = &params;
                            s.spawn(move || sup.dispatch_command(d, code, params, timeout))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("burst thread")).collect()
                });
                for r in results {
                    let o = r?;
                    tally.add(o.status, o.round_trip);
                }
            }
            let ok = expect.is_none_or(|e| tally.count(e) == tally.total());
            (ok, json!({"devs": devs, "expect": expect, "outcomes": tally}))
        }
        Step::Suspend { task_id } => {
            sup.suspend_task(task_id)?;
            (true, json!({"task_id": task_id, "state": sup.task_state(task_id)?}))
        }
        Step::Resume { task_id } => {
            sup.resume_task(task_id)?;
            (true, json!({"task_id": task_id, "state": sup.task_state(task_id)?}))
        }
        Step::Sleep { ms } => {
            thread::sleep(Duration::from_millis(*ms));
            (true, json!({"ms": ms}))
        }
        Step::InjectFault { port_id, side, fault } => {
            let ep = endpoint(sup, port_id, *side)?;
            ep.inject_fault(*fault)?;
            (true, json!({"port_id": port_id, "side": side, "fault": fault}))
        }
        Step::ClearFault { port_id, side } => {
            endpoint(sup, port_id, *side)?.clear_fault();
            (true, json!({"port_id": port_id, "side": side}))
        }
        Step::Check {
            task_id,
            state,
            max_crc_errors,
            min_store_records,
        } => {
            let snap = sup.snapshot();
            let tasks: Vec<_> = snap
                .tasks
                .iter()
                .filter(|t| task_id.as_ref().is_none_or(|id| &t.task_id == id))
                .collect();
            if let Some(id) = task_id {
                if tasks.is_empty() {
                    return Err(SupervisorError::UnknownTask(id.clone()));
                }
            }
            let mut failures = Vec::new();
            if let Some(want) = state {
                for t in tasks.iter().filter(|t| t.state != *want) {
                    failures.push(format!("{} is {:?}", t.task_id, t.state));
                }
            }
            if let Some(max) = max_crc_errors {
                let crc: u64 = tasks.iter().map(|t| t.crc_errors).sum();
                if crc > *max {
                    failures.push(format!("crc_errors {crc} > {max}"));
                }
            }
            if let Some(min) = min_store_records {
                if snap.store.records < *min {
                    failures.push(format!("store records {} < {min}", snap.store.records));
                }
            }
            (
                failures.is_empty(),
                json!({"failures": failures, "tasks": tasks, "store": snap.store}),
            )
        }
    })
}

fn endpoint(sup: &Supervisor, port_id: &str, side: Side) -> Result<crate::bus::Endpoint, SupervisorError> {
    let ep = match side {
        Side::ObdhSide => sup.obdh_endpoint(port_id),
        Side::DeviceSide => sup.device_endpoint(port_id),
    };
    ep.ok_or_else(|| SupervisorError::UnknownTask(format!("port {port_id}")))
}
