//! Runs a [`DeviceSim`] on its own thread, attached to a bus endpoint.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tracing::{debug, warn};

use super::{DeviceSim, DeviceState, STS_STREAMING};
use crate::bus::{BusError, Endpoint};
use crate::frame::{Deframer, Event};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Clocking {
    /// Step by `tick` each time a wall-clock tick elapses.
    Realtime { tick: Duration },
    /// Step by `dt` before handling each command; no wall-clock stepping.
    PerCommand { dt: Duration },
}

impl Default for Clocking {
    fn default() -> Self {
        Clocking::Realtime {
            tick: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunnerOptions {
    pub clocking: Clocking,
    /// Unsolicited telemetry rate; `None` keeps the device poll-driven.
    pub stream_hz: Option<f64>,
}

/// Handle to a running simulator thread.
#[derive(Debug)]
pub struct DeviceHandle {
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<DeviceSim>>,
}

impl DeviceHandle {
    /// Stops the thread and returns the final simulator state.
    pub fn stop(mut self) -> Option<DeviceSim> {
        self.stop.store(true, Ordering::SeqCst);
        self.join.take().and_then(|j| j.join().ok())
    }
}

impl Drop for DeviceHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

const READ_SLICE: Duration = Duration::from_millis(20);

pub fn spawn_device(mut sim: DeviceSim, endpoint: Endpoint, opts: RunnerOptions) -> DeviceHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let name = format!("dev-{}", sim.dev_id());
    let join = thread::Builder::new()
        .name(name)
        .spawn(move || {
            run(&mut sim, &endpoint, opts, &flag);
            sim
        })
        .expect("spawn device thread");
    DeviceHandle { stop, join: Some(join) }
}

fn run(sim: &mut DeviceSim, ep: &Endpoint, opts: RunnerOptions, stop: &AtomicBool) {
    let mut deframer = Deframer::new();
    let start = Instant::now();
    let tick = match opts.clocking {
        Clocking::Realtime { tick } if !tick.is_zero() => Some(tick),
        _ => None,
    };
    let stream_period = opts
        .stream_hz
        .filter(|hz| *hz > 0.0)
        .map(|hz| Duration::from_secs_f64(1.0 / hz));
    if stream_period.is_some() {
        if let DeviceState::Sts(s) = sim.state_mut() {
            s.status |= STS_STREAMING;
        }
    }
    let mut next_tick = tick.map(|t| start + t);
    let mut next_stream = stream_period.map(|p| start + p);
    let mut events = Vec::new();
    let mut out = Vec::new();

    while !stop.load(Ordering::Relaxed) {
        let now = Instant::now();
        let mut wait = READ_SLICE;
        for t in [next_tick, next_stream].into_iter().flatten() {
            wait = wait.min(t.saturating_duration_since(now));
        }
        match ep.read(512, wait) {
            Ok(bytes) => {
                events.clear();
                deframer.push_into(&bytes, &mut events);
                for ev in events.drain(..) {
                    match ev {
                        Event::FrameOk(frame) => {
                            if let Clocking::PerCommand { dt } = opts.clocking {
                                sim.step(dt);
                            }
                            out.clear();
                            for reply in sim.handle_command(&frame) {
                                let _ = reply.encode_into(&mut out);
                            }
                            if !out.is_empty() && ep.write(&out).is_err() {
                                return;
                            }
                        }
                        Event::CrcError(info) => debug!(dev = sim.dev_id(), ?info, "device saw corrupt frame"),
                        Event::Resync(n) => debug!(dev = sim.dev_id(), skipped = n, "device resync"),
                    }
                }
            }
            Err(BusError::EndOfStream) | Err(BusError::Closed) => return,
            Err(e) => {
                warn!(dev = sim.dev_id(), error = %e, "device read failed");
                return;
            }
        }

        let now = Instant::now();
        if let (Some(t), Some(next)) = (tick, next_tick.as_mut()) {
            while *next <= now {
                sim.step(t);
                *next += t;
            }
        }
        if let (Some(p), Some(next)) = (stream_period, next_stream.as_mut()) {
            if *next <= now {
                let frame = sim.unsolicited_telemetry();
                if let Ok(bytes) = frame.encode() {
                    if ep.write(&bytes).is_err() {
                        return;
                    }
                }
                *next += p;
                if *next <= now {
                    // fell behind; skip missed slots rather than bursting
                    *next = now + p;
                }
            }
        }
    }
}
