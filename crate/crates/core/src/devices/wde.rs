use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const WDE_TLM_LEN: usize = 32;
pub const DEFAULT_MAX_SPEED: i32 = 6000;
pub const DEFAULT_SLEW: f64 = 100.0;

const IDLE_CURRENT_MA: u32 = 120;
const SLEW_CURRENT_MA: u32 = 400;
const AMBIENT_DECI_C: i32 = 200;

/// Status bits.
pub const WDE_AT_TARGET: u8 = 0x01;
pub const WDE_SLEWING: u8 = 0x02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WdeMode {
    #[default]
    Idle = 0,
    Run = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WdeParams {
    /// rpm
    pub max_speed: i32,
    /// rpm/s
    pub slew: f64,
}

impl Default for WdeParams {
    fn default() -> Self {
        Self {
            max_speed: DEFAULT_MAX_SPEED,
            slew: DEFAULT_SLEW,
        }
    }
}

/// Reaction-wheel drive electronics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WdeState {
    /// rpm
    pub wheel_speed: i32,
    /// rpm
    pub commanded_speed: i32,
    /// mA
    pub motor_current: u16,
    /// 0.1 °C
    pub temperature: i16,
    pub status_flags: u8,
    pub mode: WdeMode,
    pub params: WdeParams,
    // fractional rpm of slew not yet applied
    residual: f64,
}

impl WdeState {
    pub fn new(params: WdeParams) -> Self {
        let mut s = Self {
            params,
            ..Self::default()
        };
        s.refresh_housekeeping(false);
        s
    }

    /// Moves speed toward the command by at most `slew * dt`.
    pub fn step(&mut self, dt: Duration) {
        if dt.is_zero() {
            return;
        }
        let diff = i64::from(self.commanded_speed) - i64::from(self.wheel_speed);
        let slewing = diff != 0;
        if slewing {
            let budget = self.params.slew * dt.as_secs_f64() + self.residual;
            let whole = budget.floor();
            self.residual = budget - whole;
            let delta = (whole as i64).min(diff.abs());
            self.wheel_speed += (delta * diff.signum()) as i32;
            self.wheel_speed = self.wheel_speed.clamp(-self.params.max_speed, self.params.max_speed);
            if self.wheel_speed == self.commanded_speed {
                self.residual = 0.0;
            }
        }
        self.refresh_housekeeping(slewing);
    }

    fn refresh_housekeeping(&mut self, slewing: bool) {
        let current =
            IDLE_CURRENT_MA + self.wheel_speed.unsigned_abs() / 20 + if slewing { SLEW_CURRENT_MA } else { 0 };
        self.motor_current = current.min(u32::from(u16::MAX)) as u16;
        self.temperature = (AMBIENT_DECI_C + current as i32 / 10) as i16;
        self.mode = if self.commanded_speed != 0 || self.wheel_speed != 0 {
            WdeMode::Run
        } else {
            WdeMode::Idle
        };
        let mut flags = 0;
        if self.wheel_speed == self.commanded_speed {
            flags |= WDE_AT_TARGET;
        }
        if self.wheel_speed != self.commanded_speed {
            flags |= WDE_SLEWING;
        }
        self.status_flags = flags;
    }

    /// Returns false when `rpm` exceeds the wheel's limit.
    pub fn set_speed(&mut self, rpm: i32) -> bool {
        if rpm.unsigned_abs() > self.params.max_speed.unsigned_abs() {
            return false;
        }
        self.commanded_speed = rpm;
        if rpm != 0 {
            self.mode = WdeMode::Run;
        }
        if self.wheel_speed == rpm {
            self.residual = 0.0;
        }
        true
    }
}

/// 32-byte telemetry block:
/// speed i32 ‖ current u16 ‖ temperature i16 ‖ flags u8 ‖ mode u8 ‖
/// commanded i32 ‖ 18 zero bytes.
pub fn wde_telemetry(state: &WdeState) -> [u8; WDE_TLM_LEN] {
    let mut out = [0u8; WDE_TLM_LEN];
    out[0..4].copy_from_slice(&state.wheel_speed.to_be_bytes());
    out[4..6].copy_from_slice(&state.motor_current.to_be_bytes());
    out[6..8].copy_from_slice(&state.temperature.to_be_bytes());
    out[8] = state.status_flags;
    out[9] = state.mode as u8;
    out[10..14].copy_from_slice(&state.commanded_speed.to_be_bytes());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WdeTelemetry {
    pub wheel_speed: i32,
    pub motor_current_ma: u16,
    pub temperature_c: f64,
    pub status_flags: u8,
    pub mode: WdeMode,
    pub commanded_speed: i32,
}

pub fn decode_wde(payload: &[u8]) -> Option<WdeTelemetry> {
    if payload.len() != WDE_TLM_LEN {
        return None;
    }
    let be32 = |i: usize| i32::from_be_bytes(payload[i..i + 4].try_into().unwrap());
    Some(WdeTelemetry {
        wheel_speed: be32(0),
        motor_current_ma: u16::from_be_bytes([payload[4], payload[5]]),
        temperature_c: f64::from(i16::from_be_bytes([payload[6], payload[7]])) / 10.0,
        status_flags: payload[8],
        mode: if payload[9] == 0 { WdeMode::Idle } else { WdeMode::Run },
        commanded_speed: be32(10),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent big-endian oracle: shifts, not to_be_bytes.
    fn be_i32(v: i32) -> [u8; 4] {
        let u = v as u32;
        [(u >> 24) as u8, (u >> 16) as u8, (u >> 8) as u8, u as u8]
    }

    #[test]
    fn all_zero_state_gives_zero_payload() {
        assert_eq!(wde_telemetry(&WdeState::default()), [0u8; 32]);
    }

    #[test]
    fn speed_bytes_big_endian() {
        let s = WdeState {
            wheel_speed: 1000,
            ..WdeState::default()
        };
        let p = wde_telemetry(&s);
        assert_eq!(&p[0..4], &be_i32(1000));
        assert_eq!(&p[0..4], &[0x00, 0x00, 0x03, 0xE8]);
        let s = WdeState {
            wheel_speed: -2,
            commanded_speed: -6000,
            ..WdeState::default()
        };
        let p = wde_telemetry(&s);
        assert_eq!(&p[0..4], &be_i32(-2));
        assert_eq!(&p[10..14], &be_i32(-6000));
        assert!(p[14..].iter().all(|&b| b == 0));
    }

    #[test]
    fn fixed_point_at_command() {
        let mut s = WdeState::new(WdeParams::default());
        s.set_speed(1000);
        s.wheel_speed = 1000;
        for dt in [1u64, 7, 100, 5000] {
            s.step(Duration::from_millis(dt));
            assert_eq!(s.wheel_speed, 1000);
        }
    }

    #[test]
    fn ramp_reaches_target_in_ten_seconds() {
        // 100 rpm/s for 10 s covers exactly 1000 rpm.
        let mut s = WdeState::new(WdeParams::default());
        s.set_speed(1000);
        let mut trace = Vec::new();
        for _ in 0..10 {
            s.step(Duration::from_secs(1));
            trace.push(s.wheel_speed);
        }
        assert_eq!(trace, (1..=10).map(|k| k * 100).collect::<Vec<_>>());
        assert_eq!(s.status_flags & WDE_AT_TARGET, WDE_AT_TARGET);
        assert_eq!(s.mode, WdeMode::Run);
    }

    #[test]
    fn fractional_steps_accumulate() {
        let mut s = WdeState::new(WdeParams::default());
        s.set_speed(-50);
        for _ in 0..30 {
            s.step(Duration::from_millis(1000 / 60));
        }
        // 30 * 16 ms * 100 rpm/s = 48 rpm of budget
        assert_eq!(s.wheel_speed, -48);
    }

    #[test]
    fn speed_limit() {
        let mut s = WdeState::new(WdeParams::default());
        assert!(!s.set_speed(6001));
        assert!(s.set_speed(-6000));
    }

    #[test]
    fn decode_round_trip() {
        let mut s = WdeState::new(WdeParams::default());
        s.set_speed(300);
        s.step(Duration::from_secs(2));
        let d = decode_wde(&wde_telemetry(&s)).unwrap();
        assert_eq!(d.wheel_speed, 200);
        assert_eq!(d.commanded_speed, 300);
        assert_eq!(d.mode, WdeMode::Run);
    }
}
