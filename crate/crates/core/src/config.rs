//! Run configuration: port set, device roster, store and ground-link settings.
//!
//! The on-disk format is TOML. [`RunConfig::default_roster`] returns the bundled
//! default roster (seven devices on seven ports).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{LineMode, Parity, PortConfig, DEFAULT_BAUD, DEFAULT_FIFO_CAPACITY, MAX_PORTS};
use crate::devices::DeviceKind;
use crate::frame::OBDH_DEV_ID;
use crate::store::SyncPolicy;

pub const DEFAULT_CONFIG_TOML: &str = include_str!("../config/default.toml");
pub const DEFAULT_LISTEN: &str = "127.0.0.1:7070";
pub const DEFAULT_SESSION_QUEUE: usize = 10_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("duplicate port '{0}'")]
    DuplicatePort(String),
    #[error("duplicate dev_id {0}")]
    DuplicateDevId(u8),
    #[error("dev_id {0} is reserved for the OBDH")]
    ReservedDevId(u8),
    #[error("too many ports: {0} (a board has {MAX_PORTS})")]
    TooManyPorts(usize),
    #[error("device {dev_id} references unknown port '{port_id}'")]
    UnknownPort { dev_id: u8, port_id: String },
    #[error("device {dev_id} ({kind}) requires {required} but port '{port_id}' is {actual}")]
    LineModeRequired {
        dev_id: u8,
        kind: DeviceKind,
        port_id: String,
        required: LineMode,
        actual: LineMode,
    },
    #[error("device {dev_id} declares line_mode {declared} but port '{port_id}' is {actual}")]
    LineModeMismatch {
        dev_id: u8,
        port_id: String,
        declared: LineMode,
        actual: LineMode,
    },
    #[error("invalid value for {field}: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortSpec {
    pub port_id: String,
    pub mode: LineMode,
    #[serde(default = "default_baud")]
    pub baud: u32,
    #[serde(default = "default_data_bits")]
    pub data_bits: u8,
    #[serde(default)]
    pub parity: Parity,
    #[serde(default = "default_stop_bits")]
    pub stop_bits: u8,
    #[serde(default = "default_fifo")]
    pub fifo_capacity: usize,
}

impl PortSpec {
    pub fn new(port_id: impl Into<String>, mode: LineMode) -> Self {
        Self {
            port_id: port_id.into(),
            mode,
            baud: DEFAULT_BAUD,
            data_bits: 8,
            parity: Parity::None,
            stop_bits: 1,
            fifo_capacity: DEFAULT_FIFO_CAPACITY,
        }
    }

    pub fn to_port_config(&self, pacing_enabled: bool) -> PortConfig {
        PortConfig {
            port_id: self.port_id.clone(),
            mode: self.mode,
            baud: self.baud,
            data_bits: self.data_bits,
            parity: self.parity,
            stop_bits: self.stop_bits,
            pacing_enabled,
            fifo_capacity: self.fifo_capacity,
        }
    }
}

/// Roster entry binding a device ID to a port and simulator kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceDescriptor {
    pub dev_id: u8,
    pub name: String,
    pub kind: DeviceKind,
    pub port_id: String,
    /// Optional; must agree with the port's mode when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_mode: Option<LineMode>,
    /// Housekeeping poll period. Off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poll_ms: Option<u64>,
    /// Unsolicited telemetry rate. Off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_hz: Option<f64>,
}

impl DeviceDescriptor {
    pub fn new(dev_id: u8, name: impl Into<String>, kind: DeviceKind, port_id: impl Into<String>) -> Self {
        Self {
            dev_id,
            name: name.into(),
            kind,
            port_id: port_id.into(),
            line_mode: None,
            poll_ms: None,
            stream_hz: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_store_path")]
    pub store_path: PathBuf,
    #[serde(default)]
    pub store_sync: SyncPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_rotate_bytes: Option<u64>,
    #[serde(default = "default_listen")]
    pub ground_listen: String,
    #[serde(default = "default_true")]
    pub pacing_enabled: bool,
    #[serde(default = "default_timeout_ms")]
    pub command_timeout_ms: u64,
    /// Simulator clock tick.
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    /// Receive tasks idle longer than this report SLEEPING. Off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_sleep_ms: Option<u64>,
    #[serde(default = "default_session_queue")]
    pub session_queue: usize,
    /// Default seed for fault injection in scenarios.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ports: Vec<PortSpec>,
    #[serde(default, rename = "devices")]
    pub roster: Vec<DeviceDescriptor>,
}

fn default_baud() -> u32 {
    DEFAULT_BAUD
}
fn default_data_bits() -> u8 {
    8
}
fn default_stop_bits() -> u8 {
    1
}
fn default_fifo() -> usize {
    DEFAULT_FIFO_CAPACITY
}
fn default_store_path() -> PathBuf {
    PathBuf::from("obdh-telemetry.log")
}
fn default_listen() -> String {
    DEFAULT_LISTEN.to_string()
}
fn default_true() -> bool {
    true
}
fn default_timeout_ms() -> u64 {
    1000
}
fn default_tick_ms() -> u64 {
    100
}
fn default_session_queue() -> usize {
    DEFAULT_SESSION_QUEUE
}

impl Default for RunConfig {
    /// Empty roster, default settings.
    fn default() -> Self {
        toml::from_str("").expect("empty config parses")
    }
}

impl RunConfig {
    /// The bundled default roster.
    pub fn default_roster() -> Self {
        Self::from_toml(DEFAULT_CONFIG_TOML).expect("bundled config is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads and parses a config file. Validation is separate.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn command_timeout(&self) -> Duration {
        Duration::from_millis(self.command_timeout_ms)
    }

    pub fn port(&self, port_id: &str) -> Option<&PortSpec> {
        self.ports.iter().find(|p| p.port_id == port_id)
    }

    pub fn device(&self, dev_id: u8) -> Option<&DeviceDescriptor> {
        self.roster.iter().find(|d| d.dev_id == dev_id)
    }

    /// Checks every constraint and reports the first one violated.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.ports.len() > MAX_PORTS {
            return Err(ConfigError::TooManyPorts(self.ports.len()));
        }
        let invalid = |field: String, reason: &str| ConfigError::Invalid {
            field,
            reason: reason.to_string(),
        };
        if self.command_timeout_ms == 0 {
            return Err(invalid("command_timeout_ms".into(), "must be > 0"));
        }
        if self.tick_ms == 0 {
            return Err(invalid("tick_ms".into(), "must be > 0"));
        }
        if self.session_queue == 0 {
            return Err(invalid("session_queue".into(), "must be > 0"));
        }
        if self.store_rotate_bytes == Some(0) {
            return Err(invalid("store_rotate_bytes".into(), "must be > 0"));
        }
        let mut ports: HashMap<&str, LineMode> = HashMap::new();
        for p in &self.ports {
            if ports.insert(&p.port_id, p.mode).is_some() {
                return Err(ConfigError::DuplicatePort(p.port_id.clone()));
            }
            if p.port_id.is_empty() {
                return Err(invalid("ports.port_id".into(), "must not be empty"));
            }
            if p.baud == 0 {
                return Err(invalid(format!("ports[{}].baud", p.port_id), "must be > 0"));
            }
            if !(5..=8).contains(&p.data_bits) {
                return Err(invalid(format!("ports[{}].data_bits", p.port_id), "must be 5..=8"));
            }
            if !(1..=2).contains(&p.stop_bits) {
                return Err(invalid(format!("ports[{}].stop_bits", p.port_id), "must be 1 or 2"));
            }
            if p.fifo_capacity == 0 {
                return Err(invalid(format!("ports[{}].fifo_capacity", p.port_id), "must be > 0"));
            }
        }
        let mut dev_ids = HashSet::new();
        let mut used_ports = HashSet::new();
        for d in &self.roster {
            if d.dev_id == OBDH_DEV_ID {
                return Err(ConfigError::ReservedDevId(d.dev_id));
            }
            if !dev_ids.insert(d.dev_id) {
                return Err(ConfigError::DuplicateDevId(d.dev_id));
            }
            if !used_ports.insert(d.port_id.as_str()) {
                return Err(ConfigError::DuplicatePort(d.port_id.clone()));
            }
            let Some(&actual) = ports.get(d.port_id.as_str()) else {
                return Err(ConfigError::UnknownPort {
                    dev_id: d.dev_id,
                    port_id: d.port_id.clone(),
                });
            };
            if let Some(required) = d.kind.required_line_mode() {
                if required != actual {
                    return Err(ConfigError::LineModeRequired {
                        dev_id: d.dev_id,
                        kind: d.kind,
                        port_id: d.port_id.clone(),
                        required,
                        actual,
                    });
                }
            }
            if let Some(declared) = d.line_mode {
                if declared != actual {
                    return Err(ConfigError::LineModeMismatch {
                        dev_id: d.dev_id,
                        port_id: d.port_id.clone(),
                        declared,
                        actual,
                    });
                }
            }
            if d.poll_ms == Some(0) {
                return Err(invalid(format!("devices[{}].poll_ms", d.dev_id), "must be > 0"));
            }
            if let Some(hz) = d.stream_hz {
                if !(hz.is_finite() && hz > 0.0) {
                    return Err(invalid(format!("devices[{}].stream_hz", d.dev_id), "must be > 0"));
                }
            }
        }
        Ok(())
    }
}
