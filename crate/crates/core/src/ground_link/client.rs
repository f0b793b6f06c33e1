use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde_json::Value;

/// Minimal line-protocol client, used by the CLI and tests.
#[derive(Debug)]
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> io::Result<Self> {
        let mut last = io::Error::new(ErrorKind::InvalidInput, "address resolved to nothing");
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(s) => {
                    s.set_nodelay(true)?;
                    return Ok(Self {
                        reader: BufReader::new(s.try_clone()?),
                        writer: s,
                    });
                }
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    /// Bounds how long `recv` waits; `None` waits forever.
    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.writer.set_read_timeout(t)
    }

    pub fn send(&mut self, msg: &Value) -> io::Result<()> {
        let mut line = serde_json::to_vec(msg).map_err(io::Error::other)?;
        line.push(b'\n');
        self.writer.write_all(&line)
    }

    /// Next message of any kind.
    pub fn recv(&mut self) -> io::Result<Value> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(io::Error::new(ErrorKind::UnexpectedEof, "connection closed"));
        }
        serde_json::from_str(&line).map_err(|e| io::Error::new(ErrorKind::InvalidData, e))
    }

    /// Sends `msg` and returns the first reply that is not a streamed event.
    pub fn request(&mut self, msg: &Value) -> io::Result<Value> {
        self.send(msg)?;
        loop {
            let v = self.recv()?;
            if !is_event(&v) {
                return Ok(v);
            }
        }
    }
}

pub fn is_event(v: &Value) -> bool {
    matches!(
        v.get("op").and_then(Value::as_str),
        Some("telemetry") | Some("task_state")
    )
}
