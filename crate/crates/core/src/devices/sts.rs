use std::time::Duration;

use serde::Serialize;

pub const STS_TLM_LEN: usize = 24;
/// Quaternion components are signed Q2.14.
pub const QUAT_SCALE: f64 = 16384.0;

pub const STS_TRACKING: u16 = 0x0001;
pub const STS_STREAMING: u16 = 0x0002;

/// Star sensor attitude output.
#[derive(Debug, Clone, PartialEq)]
pub struct StsState {
    /// (w, x, y, z), fixed point with scale 2^-14.
    pub quaternion: [i16; 4],
    /// rad/s about `axis`.
    pub spin_rate: f64,
    pub axis: [f64; 3],
    pub status: u16,
    pub clock_ms: u64,
}

impl Default for StsState {
    fn default() -> Self {
        Self {
            quaternion: [QUAT_SCALE as i16, 0, 0, 0],
            spin_rate: 0.0,
            axis: [0.0, 0.0, 1.0],
            status: STS_TRACKING,
            clock_ms: 0,
        }
    }
}

impl StsState {
    pub fn with_spin(spin_rate: f64, axis: [f64; 3]) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let axis = if n > 0.0 {
            [axis[0] / n, axis[1] / n, axis[2] / n]
        } else {
            [0.0, 0.0, 1.0]
        };
        Self {
            spin_rate,
            axis,
            ..Self::default()
        }
    }

    pub fn quaternion_f64(&self) -> [f64; 4] {
        self.quaternion.map(|c| f64::from(c) / QUAT_SCALE)
    }

    /// Rotates by `spin_rate * dt`, renormalises and requantises.
    pub fn step(&mut self, dt: Duration) {
        if dt.is_zero() {
            return;
        }
        self.clock_ms += dt.as_millis() as u64;
        let angle = self.spin_rate * dt.as_secs_f64();
        if angle == 0.0 {
            return;
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let d = [c, self.axis[0] * s, self.axis[1] * s, self.axis[2] * s];
        let q = hamilton(self.quaternion_f64(), d);
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.quaternion = q.map(|v| (v / n * QUAT_SCALE).round().clamp(-32768.0, 32767.0) as i16);
    }
}

fn hamilton(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// 24-byte block: 4 × i16 quaternion ‖ u64 clock ms ‖ u16 status ‖ 2 zero.
pub fn sts_telemetry(state: &StsState) -> [u8; STS_TLM_LEN] {
    let mut out = [0u8; STS_TLM_LEN];
    for (i, c) in state.quaternion.iter().enumerate() {
        out[2 * i..2 * i + 2].copy_from_slice(&c.to_be_bytes());
    }
    out[8..16].copy_from_slice(&state.clock_ms.to_be_bytes());
    out[16..18].copy_from_slice(&state.status.to_be_bytes());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StsTelemetry {
    pub quaternion: [f64; 4],
    pub clock_ms: u64,
    pub status: u16,
}

pub fn decode_sts(payload: &[u8]) -> Option<StsTelemetry> {
    if payload.len() != STS_TLM_LEN {
        return None;
    }
    let mut q = [0.0; 4];
    for (i, v) in q.iter_mut().enumerate() {
        *v = f64::from(i16::from_be_bytes([payload[2 * i], payload[2 * i + 1]])) / QUAT_SCALE;
    }
    Some(StsTelemetry {
        quaternion: q,
        clock_ms: u64::from_be_bytes(payload[8..16].try_into().unwrap()),
        status: u16::from_be_bytes([payload[16], payload[17]]),
    })
}
