use std::time::Duration;

use serde::Serialize;

pub const BATTERY_TLM_LEN: usize = 8;

const EMPTY_MV: f64 = 6000.0;
const MV_PER_PERCENT: f64 = 24.0;

/// Simulated battery: linear discharge under a constant load.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryState {
    /// mV
    pub voltage: u16,
    /// mA, negative while discharging
    pub current: i16,
    /// 0.1 °C
    pub temperature: i16,
    /// percent
    pub state_of_charge: u8,
    /// %/s
    pub discharge_rate: f64,
    soc: f64,
}

impl Default for BatteryState {
    fn default() -> Self {
        Self::new(100.0, 0.01, -850)
    }
}

impl BatteryState {
    pub fn new(soc_percent: f64, discharge_rate: f64, load_ma: i16) -> Self {
        let mut s = Self {
            voltage: 0,
            current: load_ma,
            temperature: 215,
            state_of_charge: 0,
            discharge_rate,
            soc: soc_percent.clamp(0.0, 100.0),
        };
        s.refresh();
        s
    }

    pub fn step(&mut self, dt: Duration) {
        if dt.is_zero() {
            return;
        }
        self.soc = (self.soc - self.discharge_rate * dt.as_secs_f64()).clamp(0.0, 100.0);
        if self.soc == 0.0 {
            self.current = 0;
        }
        self.refresh();
    }

    fn refresh(&mut self) {
        self.state_of_charge = self.soc.round() as u8;
        self.voltage = (EMPTY_MV + MV_PER_PERCENT * self.soc).round() as u16;
    }
}

/// voltage u16 ‖ current i16 ‖ temperature i16 ‖ soc u8 ‖ reserved.
pub fn battery_telemetry(state: &BatteryState) -> [u8; BATTERY_TLM_LEN] {
    let mut out = [0u8; BATTERY_TLM_LEN];
    out[0..2].copy_from_slice(&state.voltage.to_be_bytes());
    out[2..4].copy_from_slice(&state.current.to_be_bytes());
    out[4..6].copy_from_slice(&state.temperature.to_be_bytes());
    out[6] = state.state_of_charge;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatteryTelemetry {
    pub voltage_mv: u16,
    pub current_ma: i16,
    pub temperature_c: f64,
    pub state_of_charge: u8,
}

pub fn decode_battery(payload: &[u8]) -> Option<BatteryTelemetry> {
    if payload.len() != BATTERY_TLM_LEN {
        return None;
    }
    Some(BatteryTelemetry {
        voltage_mv: u16::from_be_bytes([payload[0], payload[1]]),
        current_ma: i16::from_be_bytes([payload[2], payload[3]]),
        temperature_c: f64::from(i16::from_be_bytes([payload[4], payload[5]])) / 10.0,
        state_of_charge: payload[6],
    })
}
