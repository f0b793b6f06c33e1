//! The multitasking OBDH supervisor.
//!
//! One receive task per port deframes incoming bytes, attributes frames to
//! devices, completes pending commands and routes telemetry to the store and
//! to event subscribers. Commands are dispatched from any thread; each
//! device has at most one command in flight (later callers queue FIFO) and
//! every port write happens under that port's exclusive writer lease.

mod hub;

pub use hub::{EventHub, Filter, Subscription, SupervisorEvent, TaskEvent, TelemetryEvent};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{bounded, RecvTimeoutError, Sender};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::bus::{Bus, BusError, Endpoint, LineMode, Side};
use crate::config::{ConfigError, RunConfig};
use crate::devices::{
    decode_telemetry, spawn_device, Clocking, DecodedTelemetry, DeviceHandle, DeviceKind, DeviceSim, DeviceState,
    RunnerOptions, UNSOLICITED_SEQ,
};
use crate::frame::{Deframer, Event, Frame, FrameType, MAX_PAYLOAD};
use crate::store::{RecoveryReport, StoreError, StoreOptions, TelemetryRecord, TelemetryStore, DEFAULT_ROTATE_BYTES};

const READ_SLICE: Duration = Duration::from_millis(20);
const READ_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bus: {0}")]
    Bus(#[from] BusError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("unknown device {0}")]
    UnknownDevice(u8),
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("params too long: {0} bytes (max {max})", max = MAX_PAYLOAD - 1)]
    ParamsTooLong(usize),
    #[error("supervisor is shut down")]
    ShutDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Running,
    Sleeping,
    Suspended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandStatus {
    Ack,
    Nak,
    Timeout,
    PortSuspended,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutcome {
    pub status: CommandStatus,
    /// Present exactly when status is ACK or NAK.
    pub response_frame: Option<Frame>,
    pub round_trip: Duration,
    pub seq: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskStatus {
    pub task_id: String,
    pub port_id: String,
    pub line_mode: LineMode,
    pub state: TaskState,
    pub frames_ok: u64,
    pub crc_errors: u64,
    pub resyncs: u64,
    /// Responses that matched no pending command.
    pub stale: u64,
    /// Frames from a device not attached to this port, or of an unexpected type.
    pub unattributed: u64,
    pub last_activity_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LastTelemetry {
    pub timestamp_ms: u64,
    pub raw_hex: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoded: Option<DecodedTelemetry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceStatus {
    pub dev_id: u8,
    pub name: String,
    pub kind: DeviceKind,
    pub port_id: String,
    pub task_id: String,
    pub commands: u64,
    pub acks: u64,
    pub naks: u64,
    pub timeouts: u64,
    pub last_telemetry: Option<LastTelemetry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoreStatus {
    pub path: PathBuf,
    pub records: u64,
    pub bytes: u64,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusReport {
    pub uptime_ms: u64,
    pub tasks: Vec<TaskStatus>,
    pub devices: Vec<DeviceStatus>,
    pub store: StoreStatus,
}

pub fn task_id_for(port_id: &str) -> String {
    format!("rx-{port_id}")
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Default)]
struct TaskCounters {
    frames_ok: AtomicU64,
    crc_errors: AtomicU64,
    resyncs: AtomicU64,
    stale: AtomicU64,
    unattributed: AtomicU64,
    /// Milliseconds since the epoch; 0 means never.
    last_activity_ms: AtomicU64,
}

#[derive(Debug)]
struct TaskCtl {
    suspend_requested: bool,
    state: TaskState,
}

#[derive(Debug)]
struct PortCtl {
    task_id: String,
    port_id: String,
    line_mode: LineMode,
    endpoint: Endpoint,
    writer: Mutex<()>,
    ctl: Mutex<TaskCtl>,
    ctl_cv: Condvar,
    counters: TaskCounters,
}

impl PortCtl {
    fn suspended(&self) -> bool {
        self.ctl.lock().suspend_requested
    }
}

/// Admits callers strictly in arrival order.
#[derive(Debug, Default)]
struct FifoGate {
    tickets: Mutex<(u64, u64)>,
    cv: Condvar,
}

struct GateTurn<'a>(&'a FifoGate);

impl FifoGate {
    fn enter(&self) -> GateTurn<'_> {
        let mut t = self.tickets.lock();
        let mine = t.0;
        t.0 += 1;
        while t.1 != mine {
            self.cv.wait(&mut t);
        }
        GateTurn(self)
    }
}

impl Drop for GateTurn<'_> {
    fn drop(&mut self) {
        self.0.tickets.lock().1 += 1;
        self.0.cv.notify_all();
    }
}

#[derive(Debug, Default)]
struct DeviceCounters {
    commands: AtomicU64,
    acks: AtomicU64,
    naks: AtomicU64,
    timeouts: AtomicU64,
}

#[derive(Debug)]
struct DeviceCtl {
    dev_id: u8,
    name: String,
    kind: DeviceKind,
    port: usize,
    gate: FifoGate,
    next_seq: Mutex<u8>,
    pending: Mutex<Option<(u8, Sender<Frame>)>>,
    last_tlm: Mutex<Option<(u64, Vec<u8>)>>,
    counters: DeviceCounters,
}

#[derive(Debug)]
struct Shared {
    ports: Vec<PortCtl>,
    devices: BTreeMap<u8, DeviceCtl>,
    store: TelemetryStore,
    hub: Arc<EventHub>,
    started: Instant,
    idle_sleep: Option<Duration>,
    shutdown: AtomicBool,
}

#[derive(Debug)]
struct Inner {
    shared: Arc<Shared>,
    bus: Bus,
    config: RunConfig,
    recovery: RecoveryReport,
    threads: Mutex<Vec<JoinHandle<()>>>,
    sims: Mutex<Vec<DeviceHandle>>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.stop_all();
    }
}

impl Inner {
    fn stop_all(&self) {
        let shared = &self.shared;
        if shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        for p in &shared.ports {
            let _g = p.ctl.lock();
            p.ctl_cv.notify_all();
        }
        for h in self.threads.lock().drain(..) {
            let _ = h.join();
        }
        for s in self.sims.lock().drain(..) {
            s.stop();
        }
        for p in &shared.ports {
            p.endpoint.close();
        }
        if let Err(e) = shared.store.close() {
            warn!(error = %e, "store close failed");
        }
        info!("supervisor stopped");
    }
}

/// Cloneable handle to a running OBDH. The last handle dropped shuts it down.
#[derive(Debug, Clone)]
pub struct Supervisor {
    inner: Arc<Inner>,
}

impl Supervisor {
    /// Validates `config`, creates ports, attaches simulators, opens the
    /// store and starts one receive task per port.
    pub fn start(config: RunConfig) -> Result<Self, SupervisorError> {
        config.validate()?;
        let bus = Bus::new();
        let mut ports = Vec::new();
        let mut device_sides = Vec::new();
        for spec in &config.ports {
            let (obdh, dev) = bus.create_port(spec.to_port_config(config.pacing_enabled))?;
            device_sides.push(dev);
            ports.push(PortCtl {
                task_id: task_id_for(&spec.port_id),
                port_id: spec.port_id.clone(),
                line_mode: spec.mode,
                endpoint: obdh,
                writer: Mutex::new(()),
                ctl: Mutex::new(TaskCtl {
                    suspend_requested: false,
                    state: TaskState::Running,
                }),
                ctl_cv: Condvar::new(),
                counters: TaskCounters::default(),
            });
        }
        let port_ids: Vec<String> = config.ports.iter().map(|p| p.port_id.clone()).collect();
        let port_index = |id: &str| port_ids.iter().position(|p| p == id).expect("validated");
        let devices: BTreeMap<u8, DeviceCtl> = config
            .roster
            .iter()
            .map(|d| {
                (
                    d.dev_id,
                    DeviceCtl {
                        dev_id: d.dev_id,
                        name: d.name.clone(),
                        kind: d.kind,
                        port: port_index(&d.port_id),
                        gate: FifoGate::default(),
                        next_seq: Mutex::new(0),
                        pending: Mutex::new(None),
                        last_tlm: Mutex::new(None),
                        counters: DeviceCounters::default(),
                    },
                )
            })
            .collect();

        let (store, recovery) = TelemetryStore::open(
            &config.store_path,
            StoreOptions {
                rotate_bytes: config.store_rotate_bytes.unwrap_or(DEFAULT_ROTATE_BYTES),
                sync: config.store_sync,
            },
        )?;

        let shared = Arc::new(Shared {
            ports,
            devices,
            store,
            hub: EventHub::new(),
            started: Instant::now(),
            idle_sleep: config.idle_sleep_ms.map(Duration::from_millis),
            shutdown: AtomicBool::new(false),
        });

        let tick = Duration::from_millis(config.tick_ms);
        let mut sims = Vec::new();
        for d in &config.roster {
            let idx = port_index(&d.port_id);
            let sim = DeviceSim::new(d.dev_id, DeviceState::initial(d.kind));
            let opts = RunnerOptions {
                clocking: Clocking::Realtime { tick },
                stream_hz: d.stream_hz,
            };
            sims.push(spawn_device(sim, device_sides[idx].clone(), opts));
        }

        let mut threads = Vec::new();
        for idx in 0..shared.ports.len() {
            let s = Arc::clone(&shared);
            let p = &shared.ports[idx];
            info!(task = %p.task_id, port = %p.port_id, mode = %p.line_mode, "task started");
            threads.push(
                thread::Builder::new()
                    .name(p.task_id.clone())
                    .spawn(move || rx_task(&s, idx))
                    .expect("spawn receive task"),
            );
        }
        let timeout = config.command_timeout();
        for d in &config.roster {
            if let Some(ms) = d.poll_ms {
                let s = Arc::clone(&shared);
                let dev_id = d.dev_id;
                threads.push(
                    thread::Builder::new()
                        .name(format!("poll-{dev_id}"))
                        .spawn(move || poll_task(&s, dev_id, Duration::from_millis(ms), timeout))
                        .expect("spawn poll task"),
                );
            }
        }

        info!(
            ports = shared.ports.len(),
            devices = shared.devices.len(),
            store = %config.store_path.display(),
            recovered = recovery.records_recovered,
            "supervisor started"
        );
        Ok(Supervisor {
            inner: Arc::new(Inner {
                shared,
                bus,
                config,
                recovery,
                threads: Mutex::new(threads),
                sims: Mutex::new(sims),
            }),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.inner.config
    }

    /// What the store reported when it was opened at startup.
    pub fn recovery_report(&self) -> RecoveryReport {
        self.inner.recovery
    }

    pub fn default_timeout(&self) -> Duration {
        self.inner.config.command_timeout()
    }

    pub fn store(&self) -> &TelemetryStore {
        &self.inner.shared.store
    }

    pub fn hub(&self) -> &Arc<EventHub> {
        &self.inner.shared.hub
    }

    pub fn subscribe(&self, capacity: usize, filter: Filter) -> Subscription {
        self.inner.shared.hub.subscribe(capacity, filter, None)
    }

    pub fn device_kind(&self, dev_id: u8) -> Option<DeviceKind> {
        self.inner.shared.devices.get(&dev_id).map(|d| d.kind)
    }

    pub fn device_ids(&self) -> Vec<u8> {
        self.inner.shared.devices.keys().copied().collect()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.inner.shared.ports.iter().map(|p| p.task_id.clone()).collect()
    }

    /// Task id of the port `dev_id` is attached to.
    pub fn task_for_device(&self, dev_id: u8) -> Option<String> {
        let s = &self.inner.shared;
        s.devices.get(&dev_id).map(|d| s.ports[d.port].task_id.clone())
    }

    /// Device-side endpoint of a port, for fault injection and for writing
    /// bytes as if a device had sent them.
    pub fn device_endpoint(&self, port_id: &str) -> Option<Endpoint> {
        self.inner.bus.endpoint(port_id, Side::DeviceSide)
    }

    /// OBDH-side endpoint of a port.
    pub fn obdh_endpoint(&self, port_id: &str) -> Option<Endpoint> {
        self.inner.bus.endpoint(port_id, Side::ObdhSide)
    }

    pub fn dispatch_command(
        &self,
        dev_id: u8,
        code: u8,
        params: &[u8],
        timeout: Duration,
    ) -> Result<CommandOutcome, SupervisorError> {
        dispatch(&self.inner.shared, dev_id, code, params, timeout)
    }

    /// Stops the task reading its port. Returns once the task is parked.
    pub fn suspend_task(&self, task_id: &str) -> Result<(), SupervisorError> {
        let s = &self.inner.shared;
        let p = self.port_by_task(task_id)?;
        let mut ctl = p.ctl.lock();
        ctl.suspend_requested = true;
        p.ctl_cv.notify_all();
        while ctl.state != TaskState::Suspended && !s.shutdown.load(Ordering::SeqCst) {
            p.ctl_cv.wait_for(&mut ctl, READ_SLICE);
        }
        Ok(())
    }

    /// Lets a suspended task read again; bytes that arrived meanwhile are
    /// processed first.
    pub fn resume_task(&self, task_id: &str) -> Result<(), SupervisorError> {
        let s = &self.inner.shared;
        let p = self.port_by_task(task_id)?;
        let mut ctl = p.ctl.lock();
        ctl.suspend_requested = false;
        p.ctl_cv.notify_all();
        while ctl.state == TaskState::Suspended && !s.shutdown.load(Ordering::SeqCst) {
            p.ctl_cv.wait_for(&mut ctl, READ_SLICE);
        }
        Ok(())
    }

    pub fn task_state(&self, task_id: &str) -> Result<TaskState, SupervisorError> {
        Ok(self.port_by_task(task_id)?.ctl.lock().state)
    }

    fn port_by_task(&self, task_id: &str) -> Result<&PortCtl, SupervisorError> {
        self.inner
            .shared
            .ports
            .iter()
            .find(|p| p.task_id == task_id)
            .ok_or_else(|| SupervisorError::UnknownTask(task_id.to_string()))
    }

    pub fn snapshot(&self) -> StatusReport {
        let s = &self.inner.shared;
        let tasks = s
            .ports
            .iter()
            .map(|p| {
                let c = &p.counters;
                let last = c.last_activity_ms.load(Ordering::SeqCst);
                TaskStatus {
                    task_id: p.task_id.clone(),
                    port_id: p.port_id.clone(),
                    line_mode: p.line_mode,
                    state: p.ctl.lock().state,
                    frames_ok: c.frames_ok.load(Ordering::SeqCst),
                    crc_errors: c.crc_errors.load(Ordering::SeqCst),
                    resyncs: c.resyncs.load(Ordering::SeqCst),
                    stale: c.stale.load(Ordering::SeqCst),
                    unattributed: c.unattributed.load(Ordering::SeqCst),
                    last_activity_ms: (last != 0).then_some(last),
                }
            })
            .collect();
        let devices = s
            .devices
            .values()
            .map(|d| {
                let c = &d.counters;
                let port = &s.ports[d.port];
                DeviceStatus {
                    dev_id: d.dev_id,
                    name: d.name.clone(),
                    kind: d.kind,
                    port_id: port.port_id.clone(),
                    task_id: port.task_id.clone(),
                    commands: c.commands.load(Ordering::SeqCst),
                    acks: c.acks.load(Ordering::SeqCst),
                    naks: c.naks.load(Ordering::SeqCst),
                    timeouts: c.timeouts.load(Ordering::SeqCst),
                    last_telemetry: d.last_tlm.lock().as_ref().map(|(ts, payload)| LastTelemetry {
                        timestamp_ms: *ts,
                        raw_hex: hex::encode(payload),
                        decoded: decode_telemetry(d.kind, payload),
                    }),
                }
            })
            .collect();
        StatusReport {
            uptime_ms: s.started.elapsed().as_millis() as u64,
            tasks,
            devices,
            store: StoreStatus {
                path: s.store.path().to_path_buf(),
                records: s.store.len(),
                bytes: s.store.size_bytes(),
                segments: s.store.segment_count(),
            },
        }
    }

    /// Stops all tasks and simulators and closes the store. Idempotent.
    pub fn shutdown(&self) {
        self.inner.stop_all();
    }

    pub fn is_shut_down(&self) -> bool {
        self.inner.shared.shutdown.load(Ordering::SeqCst)
    }
}

fn dispatch(
    s: &Shared,
    dev_id: u8,
    code: u8,
    params: &[u8],
    timeout: Duration,
) -> Result<CommandOutcome, SupervisorError> {
    let dev = s.devices.get(&dev_id).ok_or(SupervisorError::UnknownDevice(dev_id))?;
    if params.len() > MAX_PAYLOAD - 1 {
        return Err(SupervisorError::ParamsTooLong(params.len()));
    }
    if s.shutdown.load(Ordering::SeqCst) {
        return Err(SupervisorError::ShutDown);
    }
    let _turn = dev.gate.enter();
    let port = &s.ports[dev.port];
    if port.suspended() {
        return Ok(CommandOutcome {
            status: CommandStatus::PortSuspended,
            response_frame: None,
            round_trip: Duration::ZERO,
            seq: None,
        });
    }
    let seq = {
        let mut next = dev.next_seq.lock();
        let seq = *next;
        *next = (seq + 1) % UNSOLICITED_SEQ;
        seq
    };
    let bytes = Frame::command(dev_id, seq, code, params)
        .encode()
        .map_err(|_| SupervisorError::ParamsTooLong(params.len()))?;
    let (tx, rx) = bounded(1);
    *dev.pending.lock() = Some((seq, tx));
    dev.counters.commands.fetch_add(1, Ordering::Relaxed);

    let started = Instant::now();
    let written = {
        let _lease = port.writer.lock();
        port.endpoint.write(&bytes)
    };
    if let Err(e) = written {
        dev.pending.lock().take();
        return Err(e.into());
    }
    let result = rx.recv_timeout(timeout);
    let round_trip = started.elapsed();
    match result {
        Ok(frame) => {
            let status = if frame.ftype == FrameType::Nak {
                dev.counters.naks.fetch_add(1, Ordering::Relaxed);
                CommandStatus::Nak
            } else {
                dev.counters.acks.fetch_add(1, Ordering::Relaxed);
                CommandStatus::Ack
            };
            Ok(CommandOutcome {
                status,
                response_frame: Some(frame),
                round_trip,
                seq: Some(seq),
            })
        }
        Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
            dev.pending.lock().take();
            dev.counters.timeouts.fetch_add(1, Ordering::Relaxed);
            debug!(dev = dev_id, seq, "command timed out");
            Ok(CommandOutcome {
                status: CommandStatus::Timeout,
                response_frame: None,
                round_trip,
                seq: Some(seq),
            })
        }
    }
}

fn set_state(s: &Shared, port: &PortCtl, ctl: &mut TaskCtl, state: TaskState) {
    if ctl.state != state {
        ctl.state = state;
        port.ctl_cv.notify_all();
        debug!(task = %port.task_id, ?state, "task state");
        s.hub.publish(SupervisorEvent::Task(TaskEvent {
            task_id: port.task_id.clone(),
            state,
        }));
    }
}

fn rx_task(s: &Shared, idx: usize) {
    let port = &s.ports[idx];
    let mut deframer = Deframer::new();
    let mut events = Vec::new();
    let mut idle_since = Instant::now();
    while !s.shutdown.load(Ordering::SeqCst) {
        {
            let mut ctl = port.ctl.lock();
            if ctl.suspend_requested {
                set_state(s, port, &mut ctl, TaskState::Suspended);
                while ctl.suspend_requested && !s.shutdown.load(Ordering::SeqCst) {
                    port.ctl_cv.wait(&mut ctl);
                }
                set_state(s, port, &mut ctl, TaskState::Running);
                idle_since = Instant::now();
                continue;
            }
        }
        let bytes = match port.endpoint.read(READ_CHUNK, READ_SLICE) {
            Ok(b) => b,
            Err(BusError::EndOfStream) | Err(BusError::Closed) => break,
            Err(e) => {
                warn!(task = %port.task_id, error = %e, "read failed");
                break;
            }
        };
        if bytes.is_empty() {
            if let Some(limit) = s.idle_sleep {
                if idle_since.elapsed() >= limit {
                    let mut ctl = port.ctl.lock();
                    if ctl.state == TaskState::Running && !ctl.suspend_requested {
                        set_state(s, port, &mut ctl, TaskState::Sleeping);
                    }
                }
            }
            continue;
        }
        idle_since = Instant::now();
        if s.idle_sleep.is_some() {
            let mut ctl = port.ctl.lock();
            if ctl.state == TaskState::Sleeping {
                set_state(s, port, &mut ctl, TaskState::Running);
            }
        }
        port.counters.last_activity_ms.store(now_ms(), Ordering::SeqCst);
        deframer.push_into(&bytes, &mut events);
        for ev in events.drain(..) {
            match ev {
                Event::FrameOk(frame) => {
                    port.counters.frames_ok.fetch_add(1, Ordering::SeqCst);
                    route(s, idx, frame);
                }
                Event::CrcError(info) => {
                    port.counters.crc_errors.fetch_add(1, Ordering::SeqCst);
                    warn!(task = %port.task_id, ?info, "frame rejected");
                }
                Event::Resync(n) => {
                    port.counters.resyncs.fetch_add(1, Ordering::SeqCst);
                    debug!(task = %port.task_id, skipped = n, "resync");
                }
            }
        }
    }
}

fn route(s: &Shared, port_idx: usize, frame: Frame) {
    let port = &s.ports[port_idx];
    let dev = match s.devices.get(&frame.dev_id) {
        Some(d) if d.port == port_idx && frame.ftype != FrameType::Cmd => d,
        _ => {
            port.counters.unattributed.fetch_add(1, Ordering::SeqCst);
            debug!(task = %port.task_id, dev = frame.dev_id, ftype = %frame.ftype, "unattributed frame");
            return;
        }
    };
    if frame.ftype == FrameType::Tlm {
        let ts = now_ms();
        let record = TelemetryRecord::new(frame.dev_id, ts, frame.payload.clone());
        if let Err(e) = s.store.append(&record) {
            warn!(dev = frame.dev_id, error = %e, "telemetry append failed");
        }
        *dev.last_tlm.lock() = Some((ts, frame.payload.clone()));
        s.hub.publish(SupervisorEvent::Telemetry(TelemetryEvent {
            dev_id: frame.dev_id,
            kind: dev.kind,
            port_id: port.port_id.clone(),
            ftype: frame.ftype,
            seq: frame.seq,
            timestamp_ms: ts,
            unsolicited: frame.seq & UNSOLICITED_SEQ != 0,
            payload: frame.payload.clone(),
        }));
        if frame.seq & UNSOLICITED_SEQ != 0 {
            return;
        }
    }
    let mut pending = dev.pending.lock();
    match pending.as_ref() {
        Some((seq, _)) if *seq == frame.seq => {
            let (_, tx) = pending.take().expect("checked");
            let _ = tx.send(frame);
        }
        _ => {
            port.counters.stale.fetch_add(1, Ordering::SeqCst);
            debug!(dev = frame.dev_id, seq = frame.seq, "stale response dropped");
        }
    }
}

fn poll_task(s: &Shared, dev_id: u8, period: Duration, timeout: Duration) {
    let mut next = Instant::now() + period;
    while !s.shutdown.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now < next {
            thread::sleep((next - now).min(READ_SLICE));
            continue;
        }
        next += period;
        if next <= now {
            next = now + period;
        }
        match dispatch(s, dev_id, crate::devices::cmd::GET_TLM, &[], timeout) {
            Ok(o) if o.status == CommandStatus::Timeout => warn!(dev = dev_id, "poll timed out"),
            Ok(_) => {}
            Err(SupervisorError::ShutDown) | Err(SupervisorError::Bus(_)) => break,
            Err(e) => warn!(dev = dev_id, error = %e, "poll failed"),
        }
    }
}
