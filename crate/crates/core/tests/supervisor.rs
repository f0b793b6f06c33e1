use std::thread;
use std::time::{Duration, Instant};

use obdh_core::bus::LineMode;
use obdh_core::config::{DeviceDescriptor, PortSpec, RunConfig};
use obdh_core::devices::{cmd, nak, DeviceKind};
use obdh_core::frame::{Frame, FrameType};
use obdh_core::supervisor::{CommandStatus, Filter, Supervisor, SupervisorError, SupervisorEvent, TaskState};
use tempfile::TempDir;

const T: Duration = Duration::from_secs(1);

fn default_roster(dir: &TempDir, pacing: bool) -> RunConfig {
    let mut c = RunConfig::default_roster();
    c.store_path = dir.path().join("tlm.log");
    c.pacing_enabled = pacing;
    c
}

fn start(pacing: bool) -> (TempDir, Supervisor) {
    let dir = TempDir::new().unwrap();
    let sup = Supervisor::start(default_roster(&dir, pacing)).unwrap();
    (dir, sup)
}

fn wait_until(mut f: impl FnMut() -> bool, within: Duration) -> bool {
    let end = Instant::now() + within;
    while Instant::now() < end {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(5));
    }
    f()
}

#[test]
fn default_roster_start_shows_seven_running_tasks_with_zero_counters() {
    let (_d, sup) = start(false);
    let snap = sup.snapshot();
    assert_eq!(snap.tasks.len(), 7);
    assert!(snap.tasks.iter().all(|t| t.state == TaskState::Running));
    assert!(snap
        .tasks
        .iter()
        .all(|t| t.frames_ok == 0 && t.crc_errors == 0 && t.resyncs == 0));
    assert_eq!(snap.devices.len(), 7);
    assert_eq!(snap.store.records, 0);
    assert_eq!(sup.task_ids()[0], "rx-ttyOS0");
    sup.shutdown();
}

#[test]
fn empty_roster_starts_with_zero_tasks() {
    let dir = TempDir::new().unwrap();
    let c = RunConfig {
        store_path: dir.path().join("s.log"),
        ..RunConfig::default()
    };
    let sup = Supervisor::start(c).unwrap();
    assert!(sup.snapshot().tasks.is_empty());
}

#[test]
fn duplicate_port_is_refused() {
    let dir = TempDir::new().unwrap();
    let mut c = default_roster(&dir, false);
    c.roster[2].port_id = "ttyOS0".into();
    let e = Supervisor::start(c).unwrap_err();
    assert!(e.to_string().contains("duplicate port"), "{e}");
}

#[test]
fn get_tlm_wde_returns_32_byte_telemetry() {
    let (_d, sup) = start(false);
    let o = sup.dispatch_command(1, cmd::GET_TLM, &[], T).unwrap();
    assert_eq!(o.status, CommandStatus::Ack);
    let f = o.response_frame.unwrap();
    assert_eq!((f.dev_id, f.ftype, f.payload.len()), (1, FrameType::Tlm, 32));
    assert_eq!(sup.store().len(), 1);
}

#[test]
fn unknown_device_is_distinct_error() {
    let (_d, sup) = start(false);
    assert!(matches!(
        sup.dispatch_command(9, cmd::GET_TLM, &[], T),
        Err(SupervisorError::UnknownDevice(9))
    ));
}

#[test]
fn nak_and_ack_outcomes() {
    let (_d, sup) = start(false);
    let o = sup
        .dispatch_command(4, cmd::SET_SPEED, &1000i32.to_be_bytes(), T)
        .unwrap();
    assert_eq!(o.status, CommandStatus::Nak);
    assert_eq!(
        o.response_frame.unwrap().payload,
        vec![cmd::SET_SPEED, nak::UNSUPPORTED]
    );
    let o = sup
        .dispatch_command(2, cmd::SET_SPEED, &1000i32.to_be_bytes(), T)
        .unwrap();
    assert_eq!(o.status, CommandStatus::Ack);
    assert_eq!(o.response_frame.unwrap().ftype, FrameType::Ack);
}

#[test]
fn suspended_port_reports_port_suspended_and_others_keep_working() {
    let (_d, sup) = start(false);
    sup.suspend_task("rx-ttyOS2").unwrap();
    assert_eq!(sup.task_state("rx-ttyOS2").unwrap(), TaskState::Suspended);
    let written_before = sup.obdh_endpoint("ttyOS2").unwrap().stats().bytes_written;
    let o = sup.dispatch_command(3, cmd::GET_TLM, &[], T).unwrap();
    assert_eq!(o.status, CommandStatus::PortSuspended);
    assert!(o.response_frame.is_none());
    assert_eq!(
        sup.obdh_endpoint("ttyOS2").unwrap().stats().bytes_written,
        written_before
    );
    for dev in [1, 2, 4, 5, 6, 7] {
        assert_eq!(
            sup.dispatch_command(dev, cmd::GET_TLM, &[], T).unwrap().status,
            CommandStatus::Ack
        );
    }
    sup.resume_task("rx-ttyOS2").unwrap();
    assert_eq!(
        sup.dispatch_command(3, cmd::GET_TLM, &[], T).unwrap().status,
        CommandStatus::Ack
    );
}

#[test]
fn suspend_resume_idempotent_and_unknown_task() {
    let (_d, sup) = start(false);
    sup.resume_task("rx-ttyOS0").unwrap();
    sup.suspend_task("rx-ttyOS0").unwrap();
    sup.suspend_task("rx-ttyOS0").unwrap();
    assert_eq!(sup.task_state("rx-ttyOS0").unwrap(), TaskState::Suspended);
    sup.resume_task("rx-ttyOS0").unwrap();
    sup.resume_task("rx-ttyOS0").unwrap();
    assert_eq!(sup.task_state("rx-ttyOS0").unwrap(), TaskState::Running);
    assert!(matches!(
        sup.suspend_task("rx-nope"),
        Err(SupervisorError::UnknownTask(_))
    ));
    assert!(matches!(
        sup.resume_task("rx-nope"),
        Err(SupervisorError::UnknownTask(_))
    ));
}

#[test]
fn telemetry_buffered_during_suspend_is_processed_after_resume() {
    let (_d, sup) = start(false);
    sup.suspend_task("rx-ttyOS3").unwrap();
    let dev = sup.device_endpoint("ttyOS3").unwrap();
    let frame = Frame::new(4, FrameType::Tlm, 0x85, vec![0u8; 24]);
    dev.write(&frame.encode().unwrap()).unwrap();
    thread::sleep(Duration::from_millis(100));
    assert_eq!(sup.store().len(), 0);
    assert_eq!(sup.obdh_endpoint("ttyOS3").unwrap().pending(), 32);
    sup.resume_task("rx-ttyOS3").unwrap();
    assert!(wait_until(|| sup.store().len() == 1, Duration::from_secs(2)));
    let t = &sup.snapshot().tasks[3];
    assert_eq!((t.frames_ok, t.crc_errors, t.stale), (1, 0, 0));
}

#[test]
fn concurrent_get_tlm_to_all_seven() {
    let (_d, sup) = start(true);
    let handles: Vec<_> = (1..=7u8)
        .map(|dev| {
            let s = sup.clone();
            thread::spawn(move || s.dispatch_command(dev, cmd::GET_TLM, &[], T).unwrap())
        })
        .collect();
    for h in handles {
        let o = h.join().unwrap();
        assert_eq!(o.status, CommandStatus::Ack);
        assert!(o.round_trip < T);
    }
    assert!(sup.snapshot().tasks.iter().all(|t| t.crc_errors == 0));
}

#[test]
fn writer_lease_keeps_frames_contiguous_under_contention() {
    let (_d, sup) = start(false);
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let s = sup.clone();
            thread::spawn(move || {
                (0..50)
                    .map(|_| s.dispatch_command(1, cmd::GET_TLM, &[], T).unwrap().status)
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    for h in handles {
        assert!(h.join().unwrap().iter().all(|s| *s == CommandStatus::Ack));
    }
    let snap = sup.snapshot();
    assert_eq!(snap.tasks[0].crc_errors, 0);
    assert_eq!(snap.tasks[0].stale, 0);
    assert_eq!(snap.devices[0].acks, 400);
}

#[test]
fn counters_are_monotonic_and_track_commands() {
    let (_d, sup) = start(false);
    let mut prev = sup.snapshot();
    for n in 1..=20u64 {
        sup.dispatch_command(1, cmd::GET_TLM, &[], T).unwrap();
        let snap = sup.snapshot();
        assert!(snap.tasks[0].frames_ok >= n);
        for (a, b) in prev.tasks.iter().zip(&snap.tasks) {
            assert!(b.frames_ok >= a.frames_ok && b.crc_errors >= a.crc_errors && b.resyncs >= a.resyncs);
        }
        prev = snap;
    }
    let d = &prev.devices[0];
    let last = d.last_telemetry.as_ref().unwrap();
    assert_eq!(last.raw_hex.len(), 64);
    assert!(last.decoded.is_some());
}

#[test]
fn stale_and_unattributed_frames_are_counted_not_delivered() {
    let (_d, sup) = start(false);
    let dev = sup.device_endpoint("ttyOS0").unwrap();
    dev.write(&Frame::new(1, FrameType::Ack, 5, vec![cmd::SET_SPEED]).encode().unwrap())
        .unwrap();
    dev.write(&Frame::new(4, FrameType::Tlm, 0x81, vec![0; 24]).encode().unwrap())
        .unwrap();
    assert!(wait_until(
        || {
            let t = &sup.snapshot().tasks[0];
            t.stale == 1 && t.unattributed == 1
        },
        Duration::from_secs(2)
    ));
    assert_eq!(sup.store().len(), 0);
    assert_eq!(
        sup.dispatch_command(1, cmd::GET_TLM, &[], T).unwrap().status,
        CommandStatus::Ack
    );
}

#[test]
fn every_tlm_frame_is_stored_exactly_once() {
    let dir = TempDir::new().unwrap();
    let mut c = default_roster(&dir, false);
    c.roster[3].stream_hz = Some(50.0);
    let sup = Supervisor::start(c).unwrap();
    for _ in 0..20 {
        sup.dispatch_command(4, cmd::GET_TLM, &[], T).unwrap();
        sup.dispatch_command(6, cmd::GET_TLM, &[], T).unwrap();
    }
    sup.suspend_task("rx-ttyOS3").unwrap();
    sup.suspend_task("rx-ttyOS5").unwrap();
    let snap = sup.snapshot();
    let frames: u64 = snap.tasks.iter().map(|t| t.frames_ok).sum();
    assert!(frames > 40);
    assert_eq!(sup.store().len(), frames);
    let recs = sup.store().query(Some(4), 0, u64::MAX).unwrap();
    assert_eq!(recs.len() as u64, snap.tasks[3].frames_ok);
}

#[test]
fn subscribers_only_see_their_devices() {
    let (_d, sup) = start(false);
    let a = sup.subscribe(
        100,
        Filter {
            all: false,
            devices: [4].into(),
        },
    );
    let b = sup.subscribe(
        100,
        Filter {
            all: false,
            devices: [1].into(),
        },
    );
    sup.dispatch_command(1, cmd::GET_TLM, &[], T).unwrap();
    sup.dispatch_command(4, cmd::GET_TLM, &[], T).unwrap();
    let got = |s: &obdh_core::supervisor::Subscription| {
        s.receiver()
            .try_iter()
            .filter_map(|e| match e {
                SupervisorEvent::Telemetry(t) => Some(t.dev_id),
                _ => None,
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(got(&a), vec![4]);
    assert_eq!(got(&b), vec![1]);
}

#[test]
fn overflowing_subscriber_is_dropped_without_blocking() {
    let (_d, sup) = start(false);
    let slow = sup.subscribe(3, Filter::everything());
    for _ in 0..10 {
        assert_eq!(
            sup.dispatch_command(2, cmd::GET_TLM, &[], T).unwrap().status,
            CommandStatus::Ack
        );
    }
    assert!(slow.overflowed());
    assert_eq!(sup.hub().subscriber_count(), 0);
    assert_eq!(sup.hub().dropped_subscribers(), 1);
}

#[test]
fn task_events_are_broadcast() {
    let (_d, sup) = start(false);
    let sub = sup.subscribe(100, Filter::default());
    sup.suspend_task("rx-ttyOS1").unwrap();
    sup.resume_task("rx-ttyOS1").unwrap();
    let states: Vec<_> = sub
        .receiver()
        .try_iter()
        .filter_map(|e| match e {
            SupervisorEvent::Task(t) if t.task_id == "rx-ttyOS1" => Some(t.state),
            _ => None,
        })
        .collect();
    assert_eq!(states, vec![TaskState::Suspended, TaskState::Running]);
}

#[test]
fn idle_task_sleeps_and_wakes() {
    let dir = TempDir::new().unwrap();
    let mut c = default_roster(&dir, false);
    c.idle_sleep_ms = Some(50);
    let sup = Supervisor::start(c).unwrap();
    assert!(wait_until(
        || sup.task_state("rx-ttyOS0").unwrap() == TaskState::Sleeping,
        Duration::from_secs(2)
    ));
    assert_eq!(
        sup.dispatch_command(1, cmd::GET_TLM, &[], T).unwrap().status,
        CommandStatus::Ack
    );
    sup.suspend_task("rx-ttyOS0").unwrap();
    assert_eq!(sup.task_state("rx-ttyOS0").unwrap(), TaskState::Suspended);
}

#[test]
fn housekeeping_poll_fills_the_store() {
    let dir = TempDir::new().unwrap();
    let mut c = RunConfig {
        store_path: dir.path().join("p.log"),
        pacing_enabled: false,
        ..RunConfig::default()
    };
    c.ports.push(PortSpec::new("p0", LineMode::Rs232));
    let mut d = DeviceDescriptor::new(6, "bat", DeviceKind::Battery, "p0");
    d.poll_ms = Some(20);
    c.roster.push(d);
    let sup = Supervisor::start(c).unwrap();
    assert!(wait_until(|| sup.store().len() >= 5, Duration::from_secs(3)));
}

#[test]
fn restart_continues_store_sequence() {
    let dir = TempDir::new().unwrap();
    {
        let sup = Supervisor::start(default_roster(&dir, false)).unwrap();
        for _ in 0..3 {
            sup.dispatch_command(1, cmd::GET_TLM, &[], T).unwrap();
        }
    }
    let sup = Supervisor::start(default_roster(&dir, false)).unwrap();
    assert_eq!(sup.recovery_report().records_recovered, 3);
    sup.dispatch_command(1, cmd::GET_TLM, &[], T).unwrap();
    let seqs: Vec<u64> = sup
        .store()
        .query(None, 0, u64::MAX)
        .unwrap()
        .iter()
        .map(|r| r.seq)
        .collect();
    assert_eq!(seqs, vec![0, 1, 2, 3]);
}

#[test]
fn dispatch_after_shutdown_fails() {
    let (_d, sup) = start(false);
    sup.shutdown();
    sup.shutdown();
    assert!(sup.store().is_closed());
    assert!(sup.dispatch_command(1, cmd::GET_TLM, &[], T).is_err());
}
