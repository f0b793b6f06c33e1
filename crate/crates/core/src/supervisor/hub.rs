//! Fan-out of supervisor events to bounded per-subscriber queues.
//!
//! Publishing never blocks: a subscriber whose queue is full is removed
//! and its overflow callback runs, so a stalled consumer cannot hold up
//! the receive tasks.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use parking_lot::Mutex;
use serde::Serialize;

use super::TaskState;
use crate::devices::DeviceKind;
use crate::frame::FrameType;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TelemetryEvent {
    pub dev_id: u8,
    pub kind: DeviceKind,
    pub port_id: String,
    pub ftype: FrameType,
    pub seq: u8,
    pub timestamp_ms: u64,
    /// Sent by the device without a request.
    pub unsolicited: bool,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskEvent {
    pub task_id: String,
    pub state: TaskState,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SupervisorEvent {
    Telemetry(TelemetryEvent),
    Task(TaskEvent),
}

/// Which telemetry a subscriber wants. Task events always pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Filter {
    pub all: bool,
    pub devices: BTreeSet<u8>,
}

impl Filter {
    pub fn everything() -> Self {
        Filter {
            all: true,
            devices: BTreeSet::new(),
        }
    }

    fn admits(&self, ev: &SupervisorEvent) -> bool {
        match ev {
            SupervisorEvent::Telemetry(t) => self.all || self.devices.contains(&t.dev_id),
            SupervisorEvent::Task(_) => true,
        }
    }
}

type OverflowHook = Box<dyn Fn() + Send + Sync>;

struct Slot {
    id: u64,
    tx: Sender<SupervisorEvent>,
    filter: Arc<Mutex<Filter>>,
    overflowed: Arc<AtomicBool>,
    on_overflow: Option<OverflowHook>,
}

#[derive(Default)]
pub struct EventHub {
    slots: Mutex<Vec<Slot>>,
    next_id: AtomicU64,
    dropped_subscribers: AtomicU64,
}

impl std::fmt::Debug for EventHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventHub")
            .field("subscribers", &self.slots.lock().len())
            .finish()
    }
}

/// Receiving half of a hub subscription. Dropping it unsubscribes.
pub struct Subscription {
    id: u64,
    rx: Receiver<SupervisorEvent>,
    filter: Arc<Mutex<Filter>>,
    overflowed: Arc<AtomicBool>,
    hub: std::sync::Weak<EventHub>,
}

impl Subscription {
    pub fn receiver(&self) -> &Receiver<SupervisorEvent> {
        &self.rx
    }

    pub fn set_filter(&self, filter: Filter) {
        *self.filter.lock() = filter;
    }

    pub fn update_filter(&self, f: impl FnOnce(&mut Filter)) {
        f(&mut self.filter.lock());
    }

    pub fn filter(&self) -> Filter {
        self.filter.lock().clone()
    }

    /// True once the hub has dropped this subscriber for falling behind.
    pub fn overflowed(&self) -> bool {
        self.overflowed.load(Ordering::SeqCst)
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(hub) = self.hub.upgrade() {
            hub.slots.lock().retain(|s| s.id != self.id);
        }
    }
}

impl EventHub {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Adds a subscriber with a queue bound of `capacity` events.
    /// `on_overflow` runs (once, from the publishing thread) if the queue fills.
    pub fn subscribe(
        self: &Arc<Self>,
        capacity: usize,
        filter: Filter,
        on_overflow: Option<OverflowHook>,
    ) -> Subscription {
        let (tx, rx) = bounded(capacity.max(1));
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let filter = Arc::new(Mutex::new(filter));
        let overflowed = Arc::new(AtomicBool::new(false));
        self.slots.lock().push(Slot {
            id,
            tx,
            filter: Arc::clone(&filter),
            overflowed: Arc::clone(&overflowed),
            on_overflow,
        });
        Subscription {
            id,
            rx,
            filter,
            overflowed,
            hub: Arc::downgrade(self),
        }
    }

    pub fn publish(&self, ev: SupervisorEvent) {
        let mut evicted = Vec::new();
        {
            let mut slots = self.slots.lock();
            let mut i = 0;
            while i < slots.len() {
                let slot = &slots[i];
                let keep = !slot.filter.lock().admits(&ev)
                    || match slot.tx.try_send(ev.clone()) {
                        Ok(()) => true,
                        Err(TrySendError::Disconnected(_)) => false,
                        Err(TrySendError::Full(_)) => {
                            slot.overflowed.store(true, Ordering::SeqCst);
                            self.dropped_subscribers.fetch_add(1, Ordering::Relaxed);
                            false
                        }
                    };
                if keep {
                    i += 1;
                } else {
                    evicted.push(slots.swap_remove(i));
                }
            }
        }
        // hooks run outside the lock; they may touch sockets
        for slot in evicted {
            if let Some(hook) = slot.on_overflow {
                if slot.overflowed.load(Ordering::SeqCst) {
                    hook();
                }
            }
        }
    }

    pub fn subscriber_count(&self) -> usize {
        self.slots.lock().len()
    }

    pub fn dropped_subscribers(&self) -> u64 {
        self.dropped_subscribers.load(Ordering::Relaxed)
    }
}
