//! Deterministic simulators for the attached subsystems.
//!
//! Each simulator is a plain state machine ([`DeviceSim`]): `step` advances
//! its model, `handle_command` answers a command frame. [`runner`] attaches a
//! simulator to the device side of a bus port on its own thread.

mod battery;
mod gps;
pub mod runner;
mod sts;
mod wde;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use battery::{battery_telemetry, decode_battery, BatteryState, BatteryTelemetry, BATTERY_TLM_LEN};
pub use gps::{decode_gps, gps_telemetry, GpsState, GpsTelemetry, GPS_TLM_LEN};
pub use runner::{spawn_device, Clocking, DeviceHandle, RunnerOptions};
pub use sts::{
    decode_sts, sts_telemetry, StsState, StsTelemetry, QUAT_SCALE, STS_STREAMING, STS_TLM_LEN, STS_TRACKING,
};
pub use wde::{decode_wde, wde_telemetry, WdeMode, WdeParams, WdeState, WdeTelemetry, WDE_TLM_LEN};

use crate::bus::LineMode;
use crate::frame::{Frame, FrameType};

/// Command codes (first payload byte of a CMD frame).
pub mod cmd {
    pub const GET_TLM: u8 = 0x10;
    pub const SET_SPEED: u8 = 0x20;

    pub fn name(code: u8) -> Option<&'static str> {
        match code {
            GET_TLM => Some("GET_TLM"),
            SET_SPEED => Some("SET_SPEED"),
            _ => None,
        }
    }

    pub fn from_name(name: &str) -> Option<u8> {
        match name.to_ascii_uppercase().as_str() {
            "GET_TLM" => Some(GET_TLM),
            "SET_SPEED" => Some(SET_SPEED),
            _ => None,
        }
    }
}

/// Second payload byte of a NAK frame.
pub mod nak {
    pub const UNKNOWN_COMMAND: u8 = 0x01;
    pub const BAD_LENGTH: u8 = 0x02;
    pub const OUT_OF_RANGE: u8 = 0x03;
    pub const UNSUPPORTED: u8 = 0x04;

    pub fn name(reason: u8) -> &'static str {
        match reason {
            UNKNOWN_COMMAND => "unknown_command",
            BAD_LENGTH => "bad_length",
            OUT_OF_RANGE => "out_of_range",
            UNSUPPORTED => "unsupported",
            _ => "unspecified",
        }
    }
}

/// Devices set this bit in the sequence number of telemetry they send on
/// their own; OBDH command sequence numbers stay below it.
pub const UNSOLICITED_SEQ: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    Wde,
    Sts,
    Battery,
    Gps,
}

impl DeviceKind {
    /// Electrical interface the device is wired with.
    pub fn required_line_mode(self) -> Option<LineMode> {
        match self {
            DeviceKind::Wde => Some(LineMode::Ttl),
            DeviceKind::Sts => Some(LineMode::Rs422),
            DeviceKind::Battery | DeviceKind::Gps => None,
        }
    }

    pub fn telemetry_len(self) -> usize {
        match self {
            DeviceKind::Wde => WDE_TLM_LEN,
            DeviceKind::Sts => STS_TLM_LEN,
            DeviceKind::Battery => BATTERY_TLM_LEN,
            DeviceKind::Gps => GPS_TLM_LEN,
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeviceKind::Wde => "wde",
            DeviceKind::Sts => "sts",
            DeviceKind::Battery => "battery",
            DeviceKind::Gps => "gps",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeviceState {
    Wde(WdeState),
    Sts(StsState),
    Battery(BatteryState),
    Gps(GpsState),
}

impl DeviceState {
    pub fn initial(kind: DeviceKind) -> Self {
        match kind {
            DeviceKind::Wde => DeviceState::Wde(WdeState::new(WdeParams::default())),
            DeviceKind::Sts => DeviceState::Sts(StsState::with_spin(0.01, [0.0, 0.0, 1.0])),
            DeviceKind::Battery => DeviceState::Battery(BatteryState::default()),
            DeviceKind::Gps => DeviceState::Gps(GpsState::default()),
        }
    }

    pub fn kind(&self) -> DeviceKind {
        match self {
            DeviceState::Wde(_) => DeviceKind::Wde,
            DeviceState::Sts(_) => DeviceKind::Sts,
            DeviceState::Battery(_) => DeviceKind::Battery,
            DeviceState::Gps(_) => DeviceKind::Gps,
        }
    }

    pub fn step(&mut self, dt: Duration) {
        match self {
            DeviceState::Wde(s) => s.step(dt),
            DeviceState::Sts(s) => s.step(dt),
            DeviceState::Battery(s) => s.step(dt),
            DeviceState::Gps(s) => s.step(dt),
        }
    }

    pub fn telemetry(&self) -> Vec<u8> {
        match self {
            DeviceState::Wde(s) => wde_telemetry(s).to_vec(),
            DeviceState::Sts(s) => sts_telemetry(s).to_vec(),
            DeviceState::Battery(s) => battery_telemetry(s).to_vec(),
            DeviceState::Gps(s) => gps_telemetry(s).to_vec(),
        }
    }
}

/// One simulated subsystem bound to a device id.
#[derive(Debug, Clone)]
pub struct DeviceSim {
    dev_id: u8,
    state: DeviceState,
    stream_seq: u8,
}

impl DeviceSim {
    pub fn new(dev_id: u8, state: DeviceState) -> Self {
        Self {
            dev_id,
            state,
            stream_seq: 0,
        }
    }

    pub fn dev_id(&self) -> u8 {
        self.dev_id
    }

    pub fn kind(&self) -> DeviceKind {
        self.state.kind()
    }

    pub fn state(&self) -> &DeviceState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut DeviceState {
        &mut self.state
    }

    pub fn step(&mut self, dt: Duration) {
        self.state.step(dt);
    }

    /// Responses to one command frame. Frames that are not commands for
    /// this device produce nothing.
    pub fn handle_command(&mut self, frame: &Frame) -> Vec<Frame> {
        if frame.ftype != FrameType::Cmd || frame.dev_id != self.dev_id {
            return Vec::new();
        }
        let Some(code) = frame.code() else {
            return vec![self.nak(frame.seq, 0x00, nak::BAD_LENGTH)];
        };
        let params = &frame.payload[1..];
        let reply = match code {
            cmd::GET_TLM if params.is_empty() => {
                Frame::new(self.dev_id, FrameType::Tlm, frame.seq, self.state.telemetry())
            }
            cmd::GET_TLM => self.nak(frame.seq, code, nak::BAD_LENGTH),
            cmd::SET_SPEED => match (&mut self.state, params) {
                (DeviceState::Wde(w), p) if p.len() == 4 => {
                    let rpm = i32::from_be_bytes([p[0], p[1], p[2], p[3]]);
                    if w.set_speed(rpm) {
                        Frame::new(self.dev_id, FrameType::Ack, frame.seq, vec![code])
                    } else {
                        self.nak(frame.seq, code, nak::OUT_OF_RANGE)
                    }
                }
                (DeviceState::Wde(_), _) => self.nak(frame.seq, code, nak::BAD_LENGTH),
                _ => self.nak(frame.seq, code, nak::UNSUPPORTED),
            },
            _ => self.nak(frame.seq, code, nak::UNKNOWN_COMMAND),
        };
        vec![reply]
    }

    /// Telemetry frame sent without a request (streaming mode).
    pub fn unsolicited_telemetry(&mut self) -> Frame {
        let seq = UNSOLICITED_SEQ | (self.stream_seq & 0x7F);
        self.stream_seq = self.stream_seq.wrapping_add(1) & 0x7F;
        Frame::new(self.dev_id, FrameType::Tlm, seq, self.state.telemetry())
    }

    fn nak(&self, seq: u8, code: u8, reason: u8) -> Frame {
        Frame::new(self.dev_id, FrameType::Nak, seq, vec![code, reason])
    }
}

/// Decoded view of a telemetry payload, for display.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum DecodedTelemetry {
    Wde(WdeTelemetry),
    Sts(StsTelemetry),
    Battery(BatteryTelemetry),
    Gps(GpsTelemetry),
}

pub fn decode_telemetry(kind: DeviceKind, payload: &[u8]) -> Option<DecodedTelemetry> {
    match kind {
        DeviceKind::Wde => decode_wde(payload).map(DecodedTelemetry::Wde),
        DeviceKind::Sts => decode_sts(payload).map(DecodedTelemetry::Sts),
        DeviceKind::Battery => decode_battery(payload).map(DecodedTelemetry::Battery),
        DeviceKind::Gps => decode_gps(payload).map(DecodedTelemetry::Gps),
    }
}
