//! In-process stand-in for an 8-port serial expansion board.
//!
//! Each port is a pair of endpoints joined by two byte pipes. Pipes can pace
//! delivery at the configured baud rate (10 symbols per byte at 8N1), carry
//! line-mode metadata, and perturb delivery through seeded fault injection.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ports per board.
pub const MAX_PORTS: usize = 8;
pub const DEFAULT_BAUD: u32 = 9600;
pub const DEFAULT_FIFO_CAPACITY: usize = 64 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("port {0} already exists")]
    DuplicatePort(String),
    #[error("bus already has {MAX_PORTS} ports")]
    Capacity,
    #[error("invalid port configuration: {0}")]
    InvalidConfig(String),
    #[error("endpoint closed")]
    Closed,
    #[error("end of stream")]
    EndOfStream,
    #[error("invalid fault specification: {0}")]
    InvalidFault(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineMode {
    Rs232,
    Rs422,
    Ttl,
}

impl fmt::Display for LineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LineMode::Rs232 => "rs232",
            LineMode::Rs422 => "rs422",
            LineMode::Ttl => "ttl",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    #[default]
    None,
    Even,
    Odd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortConfig {
    pub port_id: String,
    pub mode: LineMode,
    pub baud: u32,
    pub data_bits: u8,
    pub parity: Parity,
    pub stop_bits: u8,
    pub pacing_enabled: bool,
    pub fifo_capacity: usize,
}

impl PortConfig {
    /// 9600 8N1 with pacing on.
    pub fn new(port_id: impl Into<String>, mode: LineMode) -> Self {
        Self {
            port_id: port_id.into(),
            mode,
            baud: DEFAULT_BAUD,
            data_bits: 8,
            parity: Parity::None,
            stop_bits: 1,
            pacing_enabled: true,
            fifo_capacity: DEFAULT_FIFO_CAPACITY,
        }
    }

    pub fn with_pacing(mut self, on: bool) -> Self {
        self.pacing_enabled = on;
        self
    }

    pub fn with_baud(mut self, baud: u32) -> Self {
        self.baud = baud;
        self
    }

    /// Start bit + data bits + parity bit + stop bits.
    pub fn symbols_per_byte(&self) -> u32 {
        1 + u32::from(self.data_bits) + u32::from(self.parity != Parity::None) + u32::from(self.stop_bits)
    }

    /// Wire time of one byte.
    pub fn byte_time(&self) -> Duration {
        Duration::from_secs_f64(f64::from(self.symbols_per_byte()) / f64::from(self.baud))
    }

    fn validate(&self) -> Result<(), BusError> {
        if self.port_id.is_empty() {
            return Err(BusError::InvalidConfig("empty port id".into()));
        }
        if self.baud == 0 {
            return Err(BusError::InvalidConfig(format!("{}: baud must be > 0", self.port_id)));
        }
        if !(5..=8).contains(&self.data_bits) || !(1..=2).contains(&self.stop_bits) {
            return Err(BusError::InvalidConfig(format!(
                "{}: unsupported framing {}-{}",
                self.port_id, self.data_bits, self.stop_bits
            )));
        }
        if self.fifo_capacity == 0 {
            return Err(BusError::InvalidConfig(format!("{}: zero fifo capacity", self.port_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    ObdhSide,
    DeviceSide,
}

impl Side {
    fn index(self) -> usize {
        match self {
            Side::ObdhSide => 0,
            Side::DeviceSide => 1,
        }
    }

    fn peer(self) -> Side {
        match self {
            Side::ObdhSide => Side::DeviceSide,
            Side::DeviceSide => Side::ObdhSide,
        }
    }
}

/// Perturbation applied to bytes delivered to one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultSpec {
    /// Flip one random bit of each byte with the given probability.
    BitFlip { probability: f64, seed: u64 },
    /// Drop each byte with the given probability.
    Drop { probability: f64, seed: u64 },
    /// Insert `length` garbage bytes (never 0xEB) once `offset` bytes have
    /// been delivered since injection.
    BurstGarbage { length: usize, offset: usize, seed: u64 },
}

impl FaultSpec {
    fn validate(&self) -> Result<(), BusError> {
        match *self {
            FaultSpec::BitFlip { probability, .. } | FaultSpec::Drop { probability, .. } => {
                if !(0.0..=1.0).contains(&probability) {
                    return Err(BusError::InvalidFault(format!(
                        "probability {probability} outside [0, 1]"
                    )));
                }
            }
            FaultSpec::BurstGarbage { .. } => {}
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        match *self {
            FaultSpec::BitFlip { seed, .. } | FaultSpec::Drop { seed, .. } | FaultSpec::BurstGarbage { seed, .. } => {
                seed
            }
        }
    }
}

#[derive(Debug)]
struct FaultState {
    spec: FaultSpec,
    rng: ChaCha8Rng,
    seen: usize,
    burst_done: bool,
}

impl FaultState {
    fn new(spec: FaultSpec) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(spec.seed()),
            spec,
            seen: 0,
            burst_done: false,
        }
    }

    fn perturb(&mut self, input: &[u8], out: &mut Vec<u8>) {
        match self.spec {
            FaultSpec::BitFlip { probability, .. } => {
                for &b in input {
                    if self.rng.gen_bool(probability) {
                        out.push(b ^ (1 << self.rng.gen_range(0..8)));
                    } else {
                        out.push(b);
                    }
                }
            }
            FaultSpec::Drop { probability, .. } => {
                for &b in input {
                    if !self.rng.gen_bool(probability) {
                        out.push(b);
                    }
                }
            }
            FaultSpec::BurstGarbage { length, offset, .. } => {
                for &b in input {
                    if !self.burst_done && self.seen == offset {
                        self.emit_garbage(length, out);
                    }
                    out.push(b);
                    self.seen += 1;
                }
                if !self.burst_done && self.seen == offset {
                    self.emit_garbage(length, out);
                }
            }
        }
    }

    fn emit_garbage(&mut self, length: usize, out: &mut Vec<u8>) {
        for _ in 0..length {
            let mut g: u8 = self.rng.gen();
            while g == crate::frame::SYNC[0] {
                g = self.rng.gen();
            }
            out.push(g);
        }
        self.burst_done = true;
    }
}

/// Delivery counters for bytes flowing into one endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PipeStats {
    pub bytes_written: u64,
    pub bytes_delivered: u64,
    pub overrun_dropped: u64,
    pub mode_mismatch_dropped: u64,
}

#[derive(Debug)]
struct PipeState {
    queue: VecDeque<(Instant, u8)>,
    line_free_at: Instant,
    writer_closed: bool,
    reader_closed: bool,
    fault: Option<FaultState>,
    stats: PipeStats,
}

/// One direction of a port.
#[derive(Debug)]
struct Pipe {
    state: Mutex<PipeState>,
    ready: Condvar,
}

impl Pipe {
    fn new() -> Self {
        Self {
            state: Mutex::new(PipeState {
                queue: VecDeque::new(),
                line_free_at: Instant::now(),
                writer_closed: false,
                reader_closed: false,
                fault: None,
                stats: PipeStats::default(),
            }),
            ready: Condvar::new(),
        }
    }
}

#[derive(Debug)]
struct PortShared {
    config: PortConfig,
    byte_time: Duration,
    // Indexed by Side::index: pipes[i] delivers *into* side i.
    pipes: [Pipe; 2],
    modes: Mutex<[LineMode; 2]>,
}

/// One side of a virtual serial port.
///
/// Cloning yields another handle to the same side. The contract is one
/// concurrent reader and one concurrent writer per side.
#[derive(Debug, Clone)]
pub struct Endpoint {
    port: Arc<PortShared>,
    side: Side,
}

impl Endpoint {
    pub fn port_id(&self) -> &str {
        &self.port.config.port_id
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn config(&self) -> &PortConfig {
        &self.port.config
    }

    pub fn line_mode(&self) -> LineMode {
        self.port.modes.lock()[self.side.index()]
    }

    /// Electrical mode of the equipment attached on this side. When the two
    /// sides disagree, every byte written is lost on the line.
    pub fn set_line_mode(&self, mode: LineMode) {
        self.port.modes.lock()[self.side.index()] = mode;
    }

    fn rx_pipe(&self) -> &Pipe {
        &self.port.pipes[self.side.index()]
    }

    fn tx_pipe(&self) -> &Pipe {
        &self.port.pipes[self.side.peer().index()]
    }

    /// Queues `bytes` for the peer. Returns how many were accepted; bytes
    /// beyond the FIFO capacity are dropped as an overrun.
    pub fn write(&self, bytes: &[u8]) -> Result<usize, BusError> {
        let mismatch = {
            let modes = self.port.modes.lock();
            modes[0] != modes[1]
        };
        let pipe = self.tx_pipe();
        let mut st = pipe.state.lock();
        if st.writer_closed {
            return Err(BusError::Closed);
        }
        if bytes.is_empty() {
            return Ok(0);
        }
        st.stats.bytes_written += bytes.len() as u64;
        if st.reader_closed {
            return Ok(bytes.len());
        }
        if mismatch {
            st.stats.mode_mismatch_dropped += bytes.len() as u64;
            return Ok(bytes.len());
        }

        let perturbed;
        let delivered: &[u8] = match st.fault.as_mut() {
            Some(f) => {
                let mut out = Vec::with_capacity(bytes.len());
                f.perturb(bytes, &mut out);
                perturbed = out;
                &perturbed
            }
            None => bytes,
        };

        let room = self.port.config.fifo_capacity.saturating_sub(st.queue.len());
        let accepted = delivered.len().min(room);
        st.stats.overrun_dropped += (delivered.len() - accepted) as u64;

        let now = Instant::now();
        if self.port.config.pacing_enabled {
            let mut t = st.line_free_at.max(now);
            for &b in &delivered[..accepted] {
                t += self.port.byte_time;
                st.queue.push_back((t, b));
            }
            st.line_free_at = t;
        } else {
            st.queue.extend(delivered[..accepted].iter().map(|&b| (now, b)));
        }
        let all_in = accepted == delivered.len();
        drop(st);
        pipe.ready.notify_all();
        Ok(if all_in { bytes.len() } else { accepted.min(bytes.len()) })
    }

    /// Returns between 1 and `max` bytes that have arrived, waiting up to
    /// `wait` for the first. An empty vector means the wait elapsed.
    pub fn read(&self, max: usize, wait: Duration) -> Result<Vec<u8>, BusError> {
        let deadline = Instant::now() + wait;
        let pipe = self.rx_pipe();
        let mut st = pipe.state.lock();
        loop {
            if st.reader_closed {
                return Err(BusError::Closed);
            }
            let now = Instant::now();
            let ready = st.queue.iter().take(max).take_while(|(t, _)| *t <= now).count();
            if ready > 0 {
                let out: Vec<u8> = st.queue.drain(..ready).map(|(_, b)| b).collect();
                st.stats.bytes_delivered += out.len() as u64;
                return Ok(out);
            }
            if st.queue.is_empty() && st.writer_closed {
                return Err(BusError::EndOfStream);
            }
            if now >= deadline || max == 0 {
                return Ok(Vec::new());
            }
            let until = match st.queue.front() {
                Some(&(t, _)) => t.min(deadline),
                None => deadline,
            };
            pipe.ready.wait_until(&mut st, until);
        }
    }

    /// Bytes queued for this side, including ones still on the line.
    pub fn pending(&self) -> usize {
        self.rx_pipe().state.lock().queue.len()
    }

    /// Perturbs every later delivery to this endpoint.
    pub fn inject_fault(&self, spec: FaultSpec) -> Result<(), BusError> {
        spec.validate()?;
        self.rx_pipe().state.lock().fault = Some(FaultState::new(spec));
        Ok(())
    }

    pub fn clear_fault(&self) {
        self.rx_pipe().state.lock().fault = None;
    }

    /// Counters for bytes delivered into this endpoint.
    pub fn stats(&self) -> PipeStats {
        self.rx_pipe().state.lock().stats
    }

    /// Closes this side. The peer drains what is queued, then sees
    /// end-of-stream; further calls on this side fail with `Closed`.
    pub fn close(&self) {
        {
            let mut st = self.tx_pipe().state.lock();
            st.writer_closed = true;
        }
        self.tx_pipe().ready.notify_all();
        {
            let mut st = self.rx_pipe().state.lock();
            st.reader_closed = true;
            st.queue.clear();
        }
        self.rx_pipe().ready.notify_all();
    }
}

/// Registry of ports on one board.
#[derive(Debug, Default)]
pub struct Bus {
    ports: Mutex<BTreeMap<String, Arc<PortShared>>>,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a port and returns its `(obdh, device)` endpoints.
    pub fn create_port(&self, config: PortConfig) -> Result<(Endpoint, Endpoint), BusError> {
        config.validate()?;
        let mut ports = self.ports.lock();
        if ports.contains_key(&config.port_id) {
            return Err(BusError::DuplicatePort(config.port_id));
        }
        if ports.len() >= MAX_PORTS {
            return Err(BusError::Capacity);
        }
        let shared = Arc::new(PortShared {
            byte_time: config.byte_time(),
            modes: Mutex::new([config.mode; 2]),
            pipes: [Pipe::new(), Pipe::new()],
            config,
        });
        ports.insert(shared.config.port_id.clone(), Arc::clone(&shared));
        Ok((
            Endpoint {
                port: Arc::clone(&shared),
                side: Side::ObdhSide,
            },
            Endpoint {
                port: shared,
                side: Side::DeviceSide,
            },
        ))
    }

    /// A fresh handle to one side of an existing port.
    pub fn endpoint(&self, port_id: &str, side: Side) -> Option<Endpoint> {
        self.ports.lock().get(port_id).map(|p| Endpoint {
            port: Arc::clone(p),
            side,
        })
    }

    pub fn port_ids(&self) -> Vec<String> {
        self.ports.lock().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.ports.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
