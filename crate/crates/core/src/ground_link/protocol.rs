//! Request parsing and reply construction for the ground-link JSON protocol.
//!
//! Every message is one JSON object with an `"op"` field. Requests may carry
//! an `"id"` of any JSON type; it is echoed on every reply to that request.

use std::collections::BTreeSet;
use std::time::Duration;

use serde_json::{json, Map, Value};

use crate::devices::{cmd, decode_telemetry, nak, DeviceKind};
use crate::frame::FrameType;
use crate::store::StoredRecord;
use crate::supervisor::{CommandOutcome, CommandStatus, SupervisorEvent};

/// A malformed or rejected request. `field` names the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestError {
    pub field: Option<String>,
    pub message: String,
}

impl RequestError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn general(message: impl Into<String>) -> Self {
        Self {
            field: None,
            message: message.into(),
        }
    }

    pub fn to_json(&self, id: Option<&Value>) -> Value {
        let mut v = json!({"op": "error", "field": self.field, "message": self.message});
        attach_id(&mut v, id);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DevSelector {
    All,
    Devices(BTreeSet<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskAction {
    Suspend,
    Resume,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Ping,
    SendCmd {
        dev: u8,
        code: u8,
        params: Vec<u8>,
        timeout: Option<Duration>,
    },
    Subscribe(DevSelector),
    Unsubscribe(DevSelector),
    Task {
        action: TaskAction,
        task_id: String,
    },
    Status,
    StoreQuery {
        dev: Option<u8>,
        t0: u64,
        t1: u64,
    },
}

pub fn attach_id(v: &mut Value, id: Option<&Value>) {
    if let (Some(id), Value::Object(m)) = (id, v) {
        m.insert("id".into(), id.clone());
    }
}

/// Parses one message; on success also returns the request id, if any.
pub fn parse_request(text: &str) -> Result<(Request, Option<Value>), (RequestError, Option<Value>)> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| (RequestError::general(format!("invalid JSON: {e}")), None))?;
    let Value::Object(m) = v else {
        return Err((RequestError::general("message must be a JSON object"), None));
    };
    let id = m.get("id").cloned();
    parse_object(&m).map(|r| (r, id.clone())).map_err(|e| (e, id))
}

fn parse_object(m: &Map<String, Value>) -> Result<Request, RequestError> {
    let op = match m.get("op") {
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(RequestError::new("op", "must be a string")),
        None => return Err(RequestError::new("op", "missing")),
    };
    match op {
        "ping" => Ok(Request::Ping),
        "send_cmd" => Ok(Request::SendCmd {
            dev: dev_field(m, "dev")?.ok_or_else(|| RequestError::new("dev", "missing"))?,
            code: code_field(m)?,
            params: params_field(m)?,
            timeout: timeout_field(m)?,
        }),
        "subscribe" => Ok(Request::Subscribe(selector_field(m)?)),
        "unsubscribe" => Ok(Request::Unsubscribe(selector_field(m)?)),
        "task" => {
            let action = match m.get("action").and_then(Value::as_str) {
                Some("suspend") => TaskAction::Suspend,
                Some("resume") => TaskAction::Resume,
                Some(_) => return Err(RequestError::new("action", "must be \"suspend\" or \"resume\"")),
                None => return Err(RequestError::new("action", "missing or not a string")),
            };
            let task_id = match m.get("task_id") {
                Some(Value::String(s)) => s.clone(),
                Some(_) => return Err(RequestError::new("task_id", "must be a string")),
                None => return Err(RequestError::new("task_id", "missing")),
            };
            Ok(Request::Task { action, task_id })
        }
        "status" => Ok(Request::Status),
        "store_query" => {
            let t0 = time_field(m, "t0")?.unwrap_or(0);
            let t1 = time_field(m, "t1")?.unwrap_or(u64::MAX);
            if t0 > t1 {
                return Err(RequestError::new("t0", "t0 must not exceed t1"));
            }
            Ok(Request::StoreQuery {
                dev: dev_field(m, "dev")?,
                t0,
                t1,
            })
        }
        other => Err(RequestError::new("op", format!("unknown op '{other}'"))),
    }
}

fn dev_field(m: &Map<String, Value>, key: &str) -> Result<Option<u8>, RequestError> {
    match m.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .and_then(|n| u8::try_from(n).ok())
            .map(Some)
            .ok_or_else(|| RequestError::new(key, "must be an integer 0..=255")),
    }
}

fn code_field(m: &Map<String, Value>) -> Result<u8, RequestError> {
    match m.get("code") {
        Some(Value::String(s)) => {
            cmd::from_name(s).ok_or_else(|| RequestError::new("code", format!("unknown command '{s}'")))
        }
        Some(v) => v
            .as_u64()
            .and_then(|n| u8::try_from(n).ok())
            .ok_or_else(|| RequestError::new("code", "must be a command name or an integer 0..=255")),
        None => Err(RequestError::new("code", "missing")),
    }
}

fn params_field(m: &Map<String, Value>) -> Result<Vec<u8>, RequestError> {
    match m.get("params_hex") {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::String(s)) => {
            hex::decode(s).map_err(|e| RequestError::new("params_hex", format!("invalid hex: {e}")))
        }
        Some(_) => Err(RequestError::new("params_hex", "must be a hex string")),
    }
}

fn timeout_field(m: &Map<String, Value>) -> Result<Option<Duration>, RequestError> {
    match m.get("timeout_ms") {
        None | Some(Value::Null) => Ok(None),
        Some(v) => match v.as_u64() {
            Some(ms) if ms > 0 => Ok(Some(Duration::from_millis(ms))),
            _ => Err(RequestError::new("timeout_ms", "must be a positive integer")),
        },
    }
}

fn time_field(m: &Map<String, Value>, key: &str) -> Result<Option<u64>, RequestError> {
    match m.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| RequestError::new(key, "must be a non-negative integer (ms since epoch)")),
    }
}

fn selector_field(m: &Map<String, Value>) -> Result<DevSelector, RequestError> {
    let one = |v: &Value| {
        v.as_u64()
            .and_then(|n| u8::try_from(n).ok())
            .ok_or_else(|| RequestError::new("dev", "must be an integer 0..=255, a list of them, or \"all\""))
    };
    match m.get("dev") {
        Some(Value::String(s)) if s == "all" => Ok(DevSelector::All),
        Some(Value::Array(a)) => a.iter().map(one).collect::<Result<_, _>>().map(DevSelector::Devices),
        Some(v @ Value::Number(_)) => Ok(DevSelector::Devices([one(v)?].into())),
        Some(_) => Err(RequestError::new(
            "dev",
            "must be an integer 0..=255, a list of them, or \"all\"",
        )),
        None => Err(RequestError::new("dev", "missing")),
    }
}

fn decoded_value(kind: Option<DeviceKind>, ftype: FrameType, payload: &[u8]) -> Option<Value> {
    if ftype != FrameType::Tlm {
        return None;
    }
    decode_telemetry(kind?, payload).and_then(|d| serde_json::to_value(d).ok())
}

pub fn cmd_result(dev: u8, code: u8, kind: Option<DeviceKind>, outcome: &CommandOutcome) -> Value {
    let status = serde_json::to_value(outcome.status).expect("status serializes");
    let mut v = json!({
        "op": "cmd_result",
        "dev": dev,
        "code": cmd::name(code).map(Value::from).unwrap_or_else(|| Value::from(code)),
        "status": status,
        "round_trip_ms": outcome.round_trip.as_secs_f64() * 1000.0,
        "raw_hex": outcome.response_frame.as_ref().map(|f| hex::encode(&f.payload)).unwrap_or_default(),
    });
    let m = v.as_object_mut().expect("object");
    if let Some(seq) = outcome.seq {
        m.insert("seq".into(), seq.into());
    }
    if let Some(f) = &outcome.response_frame {
        m.insert("ftype".into(), f.ftype.name().into());
        if let Some(d) = decoded_value(kind, f.ftype, &f.payload) {
            m.insert("decoded".into(), d);
        }
        if outcome.status == CommandStatus::Nak {
            if let Some(&reason) = f.payload.get(1) {
                m.insert("nak_reason".into(), nak::name(reason).into());
            }
        }
    }
    v
}

pub fn event_json(ev: &SupervisorEvent) -> Value {
    match ev {
        SupervisorEvent::Telemetry(t) => {
            let mut v = json!({
                "op": "telemetry",
                "dev": t.dev_id,
                "kind": t.kind,
                "port_id": t.port_id,
                "seq": t.seq,
                "timestamp_ms": t.timestamp_ms,
                "unsolicited": t.unsolicited,
                "raw_hex": hex::encode(&t.payload),
            });
            if let Some(d) = decoded_value(Some(t.kind), t.ftype, &t.payload) {
                v.as_object_mut().expect("object").insert("decoded".into(), d);
            }
            v
        }
        SupervisorEvent::Task(t) => json!({"op": "task_state", "task_id": t.task_id, "state": t.state}),
    }
}

pub fn record_json(r: &StoredRecord, kind: Option<DeviceKind>) -> Value {
    let rec = &r.record;
    let mut v = json!({
        "seq": r.seq,
        "dev": rec.dev_id,
        "ftype": rec.ftype.name(),
        "timestamp_ms": rec.timestamp_ms,
        "raw_hex": hex::encode(&rec.payload),
    });
    if let Some(d) = decoded_value(kind, rec.ftype, &rec.payload) {
        v.as_object_mut().expect("object").insert("decoded".into(), d);
    }
    v
}
