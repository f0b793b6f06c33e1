//! Operator-facing network endpoint.
//!
//! Sessions speak newline-delimited JSON over TCP. A connection that opens
//! with an HTTP `GET` is upgraded to a WebSocket instead and carries the same
//! messages, one per text frame. Each session gets a bounded event queue; a
//! session that falls behind is disconnected rather than slowing the OBDH.

mod client;
pub mod protocol;

pub use client::Client;

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{select, unbounded, Receiver, Sender, TryRecvError};
use parking_lot::Mutex;
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, info, warn};
use tungstenite::Message;

use crate::config::DEFAULT_SESSION_QUEUE;
use crate::supervisor::{Filter, Subscription, Supervisor, SupervisorError};
use protocol::{attach_id, parse_request, DevSelector, Request, RequestError, TaskAction};

pub const DEFAULT_STORE_BATCH: usize = 100;
const MAX_LINE: usize = 1 << 20;
const WS_POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Error)]
pub enum GroundLinkError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundLinkOptions {
    /// Events a session may have queued before it is disconnected.
    pub queue_bound: usize,
    /// Records per `store_batch` message.
    pub store_batch: usize,
}

impl Default for GroundLinkOptions {
    fn default() -> Self {
        Self {
            queue_bound: DEFAULT_SESSION_QUEUE,
            store_batch: DEFAULT_STORE_BATCH,
        }
    }
}

type Conns = Arc<Mutex<HashMap<u64, TcpStream>>>;

/// A running listener. Dropping it stops accepting and closes all sessions.
#[derive(Debug)]
pub struct GroundLink {
    local: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    conns: Conns,
}

impl GroundLink {
    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn session_count(&self) -> usize {
        self.conns.lock().len()
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect_timeout(&self.local, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, s) in self.conns.lock().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for GroundLink {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn serve(
    addr: impl ToSocketAddrs + ToString,
    sup: Supervisor,
    opts: GroundLinkOptions,
) -> Result<GroundLink, GroundLinkError> {
    let listener = TcpListener::bind(&addr).map_err(|source| GroundLinkError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    let local = listener.local_addr().map_err(|source| GroundLinkError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Conns = Arc::default();
    let accept = {
        let stop = Arc::clone(&stop);
        let conns = Arc::clone(&conns);
        thread::Builder::new()
            .name("ground-accept".into())
            .spawn(move || accept_loop(listener, sup, opts, stop, conns))
            .expect("spawn accept thread")
    };
    info!(addr = %local, "ground link listening");
    Ok(GroundLink {
        local,
        stop,
        accept: Some(accept),
        conns,
    })
}

fn accept_loop(listener: TcpListener, sup: Supervisor, opts: GroundLinkOptions, stop: Arc<AtomicBool>, conns: Conns) {
    let next_id = AtomicU64::new(1);
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!(error = %e, "accept failed");
                continue;
            }
        };
        let id = next_id.fetch_add(1, Ordering::Relaxed);
        if let Ok(clone) = stream.try_clone() {
            conns.lock().insert(id, clone);
        }
        let sup = sup.clone();
        let conns = Arc::clone(&conns);
        let spawned = thread::Builder::new().name(format!("session-{id}")).spawn(move || {
            let peer = stream.peer_addr().ok();
            debug!(session = id, ?peer, "session opened");
            if let Err(e) = run_connection(id, stream, &sup, opts) {
                debug!(session = id, error = %e, "session ended with error");
            }
            if let Some(s) = conns.lock().remove(&id) {
                let _ = s.shutdown(Shutdown::Both);
            }
            debug!(session = id, "session closed");
        });
        if let Err(e) = spawned {
            warn!(error = %e, "cannot spawn session thread");
        }
    }
}

fn run_connection(id: u64, stream: TcpStream, sup: &Supervisor, opts: GroundLinkOptions) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut first = [0u8; 1];
    if stream.peek(&mut first)? == 0 {
        return Ok(());
    }
    let killer = stream.try_clone()?;
    let on_overflow = Box::new(move || {
        warn!(session = id, "session queue overflow; disconnecting");
        let _ = killer.shutdown(Shutdown::Both);
    });
    let sub = sup
        .hub()
        .subscribe(opts.queue_bound, Filter::default(), Some(on_overflow));
    let session = Session {
        sup: sup.clone(),
        sub,
        store_batch: opts.store_batch.max(1),
    };
    if first[0] == b'G' {
        run_websocket(stream, session)
    } else {
        run_lines(stream, session)
    }
}

fn run_lines(stream: TcpStream, session: Session) -> io::Result<()> {
    let (reply_tx, reply_rx) = unbounded::<Value>();
    let events = session.sub.receiver().clone();
    let mut out = stream.try_clone()?;
    let writer = thread::spawn(move || -> io::Result<()> {
        let mut write = |v: &Value| -> io::Result<()> {
            let mut line = serde_json::to_vec(v).map_err(io::Error::other)?;
            line.push(b'\n');
            out.write_all(&line)
        };
        loop {
            select! {
                recv(reply_rx) -> msg => match msg {
                    Ok(v) => write(&v)?,
                    Err(_) => return Ok(()),
                },
                recv(events) -> ev => match ev {
                    Ok(ev) => write(&protocol::event_json(&ev))?,
                    Err(_) => return Ok(()),
                },
            }
        }
    });

    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = Read::take(&mut reader, MAX_LINE as u64).read_until(b'\n', &mut line)?;
        if n == 0 {
            break;
        }
        if line.last() != Some(&b'\n') && n == MAX_LINE {
            let _ = reply_tx.send(RequestError::general("message too long").to_json(None));
            break;
        }
        let text = String::from_utf8_lossy(&line);
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        session.handle(text, &reply_tx);
    }
    drop(reply_tx);
    drop(session);
    let _ = stream.shutdown(Shutdown::Read);
    writer.join().unwrap_or(Ok(()))
}

fn run_websocket(stream: TcpStream, session: Session) -> io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut ws = tungstenite::accept(stream).map_err(|e| io::Error::new(ErrorKind::InvalidData, e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(WS_POLL))?;

    let (reply_tx, reply_rx) = unbounded::<Value>();
    let (req_tx, req_rx) = unbounded::<String>();
    let events = session.sub.receiver().clone();
    let handler = thread::spawn(move || {
        for text in req_rx {
            session.handle(&text, &reply_tx);
        }
    });

    let result = ws_io_loop(&mut ws, &reply_rx, &events, &req_tx);
    drop(req_tx);
    let _ = ws.close(None);
    let _ = ws.flush();
    let _ = handler.join();
    result
}

fn ws_io_loop(
    ws: &mut tungstenite::WebSocket<TcpStream>,
    replies: &Receiver<Value>,
    events: &Receiver<crate::supervisor::SupervisorEvent>,
    requests: &Sender<String>,
) -> io::Result<()> {
    let to_io = |e: tungstenite::Error| match e {
        tungstenite::Error::Io(e) => e,
        other => io::Error::other(other.to_string()),
    };
    loop {
        let mut sent = false;
        for v in replies.try_iter() {
            ws.write(Message::text(v.to_string())).map_err(to_io)?;
            sent = true;
        }
        loop {
            match events.try_recv() {
                Ok(ev) => {
                    ws.write(Message::text(protocol::event_json(&ev).to_string()))
                        .map_err(to_io)?;
                    sent = true;
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Ok(()),
            }
        }
        if sent {
            ws.flush().map_err(to_io)?;
        }
        match ws.read() {
            Ok(Message::Text(t)) => {
                let _ = requests.send(t.to_string());
            }
            Ok(Message::Binary(b)) => {
                let _ = requests.send(String::from_utf8_lossy(&b).into_owned());
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed) | Err(tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(to_io(e)),
        }
    }
}

struct Session {
    sup: Supervisor,
    sub: Subscription,
    store_batch: usize,
}

impl Session {
    fn handle(&self, text: &str, out: &Sender<Value>) {
        match parse_request(text) {
            Err((e, id)) => {
                let _ = out.send(e.to_json(id.as_ref()));
            }
            Ok((req, id)) => {
                let mut emit = |mut v: Value| {
                    attach_id(&mut v, id.as_ref());
                    let _ = out.send(v);
                };
                if let Err(e) = self.execute(req, &mut emit) {
                    emit(e.to_json(None));
                }
            }
        }
    }

    fn execute(&self, req: Request, emit: &mut dyn FnMut(Value)) -> Result<(), RequestError> {
        let sup = &self.sup;
        match req {
            Request::Ping => emit(json!({"op": "pong"})),
            Request::SendCmd {
                dev,
                code,
                params,
                timeout,
            } => {
                let timeout = timeout.unwrap_or_else(|| sup.default_timeout());
                let outcome = sup.dispatch_command(dev, code, &params, timeout).map_err(|e| match e {
                    SupervisorError::UnknownDevice(d) => RequestError::new("dev", format!("unknown device {d}")),
                    SupervisorError::ParamsTooLong(_) => RequestError::new("params_hex", e.to_string()),
                    other => RequestError::general(other.to_string()),
                })?;
                emit(protocol::cmd_result(dev, code, sup.device_kind(dev), &outcome));
            }
            Request::Subscribe(sel) | Request::Unsubscribe(sel) if self.check_devs(&sel).is_err() => {
                return self.check_devs(&sel);
            }
            Request::Subscribe(sel) => {
                self.sub.update_filter(|f| match sel {
                    DevSelector::All => f.all = true,
                    DevSelector::Devices(d) => f.devices.extend(d),
                });
                emit(self.subscription_json("subscribed"));
            }
            Request::Unsubscribe(sel) => {
                self.sub.update_filter(|f| match sel {
                    DevSelector::All => *f = Filter::default(),
                    DevSelector::Devices(d) => {
                        if f.all {
                            f.all = false;
                            f.devices = sup.device_ids().into_iter().collect();
                        }
                        f.devices.retain(|x| !d.contains(x));
                    }
                });
                emit(self.subscription_json("unsubscribed"));
            }
            Request::Task { action, task_id } => {
                let r = match action {
                    TaskAction::Suspend => sup.suspend_task(&task_id),
                    TaskAction::Resume => sup.resume_task(&task_id),
                };
                r.map_err(|e| RequestError::new("task_id", e.to_string()))?;
                let state = sup
                    .task_state(&task_id)
                    .map_err(|e| RequestError::new("task_id", e.to_string()))?;
                emit(json!({
                    "op": "task_result",
                    "action": match action { TaskAction::Suspend => "suspend", TaskAction::Resume => "resume" },
                    "task_id": task_id,
                    "state": state,
                }));
            }
            Request::Status => {
                let mut v = serde_json::to_value(sup.snapshot()).map_err(|e| RequestError::general(e.to_string()))?;
                v.as_object_mut().expect("object").insert("op".into(), "status".into());
                emit(v);
            }
            Request::StoreQuery { dev, t0, t1 } => {
                let recs = sup
                    .store()
                    .query(dev, t0, t1)
                    .map_err(|e| RequestError::general(format!("store: {e}")))?;
                let total = recs.len();
                let batches: Vec<_> = recs.chunks(self.store_batch).collect();
                if batches.is_empty() {
                    emit(json!({"op": "store_batch", "batch": 0, "records": [], "total": 0, "done": true}));
                }
                for (i, chunk) in batches.iter().enumerate() {
                    let records: Vec<Value> = chunk
                        .iter()
                        .map(|r| protocol::record_json(r, sup.device_kind(r.record.dev_id)))
                        .collect();
                    emit(json!({
                        "op": "store_batch",
                        "batch": i,
                        "records": records,
                        "total": total,
                        "done": i + 1 == batches.len(),
                    }));
                }
            }
        }
        Ok(())
    }

    fn check_devs(&self, sel: &DevSelector) -> Result<(), RequestError> {
        if let DevSelector::Devices(d) = sel {
            if let Some(bad) = d.iter().find(|x| self.sup.device_kind(**x).is_none()) {
                return Err(RequestError::new("dev", format!("unknown device {bad}")));
            }
        }
        Ok(())
    }

    fn subscription_json(&self, op: &str) -> Value {
        let f = self.sub.filter();
        let devs: Vec<u8> = if f.all {
            self.sup.device_ids()
        } else {
            f.devices.iter().copied().collect()
        };
        json!({"op": op, "all": f.all, "devs": devs})
    }
}
