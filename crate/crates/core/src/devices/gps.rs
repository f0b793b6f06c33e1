use std::time::Duration;

use serde::Serialize;

pub const GPS_TLM_LEN: usize = 16;

/// Ground-track waypoints (lat, lon) in degrees, one per segment.
const TRACK: [(f64, f64); 8] = [
    (0.0, 100.0),
    (45.0, 130.0),
    (80.0, -170.0),
    (45.0, -110.0),
    (0.0, -80.0),
    (-45.0, -50.0),
    (-80.0, 10.0),
    (-45.0, 70.0),
];
const SEGMENT_MS: u64 = 700_000;
const ALTITUDE_MM: i32 = 500_000_000;

/// Simulated receiver following a fixed ground track.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsState {
    /// 1e-7 degrees
    pub latitude: i32,
    /// 1e-7 degrees
    pub longitude: i32,
    /// mm
    pub altitude: i32,
    /// s
    pub gps_time: u32,
    time_ms: u64,
}

impl Default for GpsState {
    fn default() -> Self {
        Self::at(0)
    }
}

impl GpsState {
    pub fn at(time_ms: u64) -> Self {
        let mut s = Self {
            latitude: 0,
            longitude: 0,
            altitude: ALTITUDE_MM,
            gps_time: 0,
            time_ms,
        };
        s.refresh();
        s
    }

    pub fn step(&mut self, dt: Duration) {
        if dt.is_zero() {
            return;
        }
        self.time_ms += dt.as_millis() as u64;
        self.refresh();
    }

    fn refresh(&mut self) {
        let seg = (self.time_ms / SEGMENT_MS) as usize % TRACK.len();
        let frac = (self.time_ms % SEGMENT_MS) as f64 / SEGMENT_MS as f64;
        let (lat0, lon0) = TRACK[seg];
        let (lat1, lon1) = TRACK[(seg + 1) % TRACK.len()];
        let mut dlon = lon1 - lon0;
        if dlon > 180.0 {
            dlon -= 360.0;
        } else if dlon < -180.0 {
            dlon += 360.0;
        }
        let lat = lat0 + (lat1 - lat0) * frac;
        let mut lon = lon0 + dlon * frac;
        if lon >= 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        self.latitude = (lat * 1e7).round() as i32;
        self.longitude = (lon * 1e7).round() as i32;
        self.gps_time = (self.time_ms / 1000) as u32;
    }
}

/// lat i32 ‖ lon i32 ‖ alt i32 ‖ gps time u32.
pub fn gps_telemetry(state: &GpsState) -> [u8; GPS_TLM_LEN] {
    let mut out = [0u8; GPS_TLM_LEN];
    out[0..4].copy_from_slice(&state.latitude.to_be_bytes());
    out[4..8].copy_from_slice(&state.longitude.to_be_bytes());
    out[8..12].copy_from_slice(&state.altitude.to_be_bytes());
    out[12..16].copy_from_slice(&state.gps_time.to_be_bytes());
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpsTelemetry {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub altitude_m: f64,
    pub gps_time_s: u32,
}

pub fn decode_gps(payload: &[u8]) -> Option<GpsTelemetry> {
    if payload.len() != GPS_TLM_LEN {
        return None;
    }
    let be = |i: usize| i32::from_be_bytes(payload[i..i + 4].try_into().unwrap());
    Some(GpsTelemetry {
        latitude_deg: f64::from(be(0)) / 1e7,
        longitude_deg: f64::from(be(4)) / 1e7,
        altitude_m: f64::from(be(8)) / 1000.0,
        gps_time_s: u32::from_be_bytes(payload[12..16].try_into().unwrap()),
    })
}
