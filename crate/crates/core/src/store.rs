//! Crash-safe append-only telemetry log.
//!
//! On-disk record (multi-byte fields big-endian):
//!
//! ```text
//! 0xA5 ‖ dev_id ‖ ftype ‖ timestamp_ms (8) ‖ len (2) ‖ payload ‖ crc16 (2)
//! ```
//!
//! The CRC covers every byte before it. Each append is written with a single
//! `write` and flushed to the OS before returning, so a killed process never
//! loses an acknowledged record; `SyncPolicy::Fsync` additionally survives
//! power loss. Recovery keeps every complete valid record, drops a partial
//! tail, and stops at the first complete-but-invalid record.
//!
//! When the active file would exceed the rotation size it is sealed as
//! `<path>.1`, `<path>.2`, ... and a fresh active file is started.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::frame::{crc16, FrameType, MAX_PAYLOAD};

pub const RECORD_MAGIC: u8 = 0xA5;
/// Magic + dev + type + timestamp + len.
pub const RECORD_HEADER_LEN: usize = 13;
pub const RECORD_OVERHEAD: usize = RECORD_HEADER_LEN + 2;
pub const DEFAULT_ROTATE_BYTES: u64 = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("store is closed")]
    Closed,
    #[error("invalid time range: t0 {t0} > t1 {t1}")]
    InvalidRange { t0: u64, t1: u64 },
    #[error("payload of {0} bytes exceeds 255")]
    PayloadTooLong(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TelemetryRecord {
    pub dev_id: u8,
    pub ftype: FrameType,
    /// OBDH receive time, ms since the Unix epoch.
    pub timestamp_ms: u64,
    pub payload: Vec<u8>,
}

impl TelemetryRecord {
    pub fn new(dev_id: u8, timestamp_ms: u64, payload: impl Into<Vec<u8>>) -> Self {
        Self {
            dev_id,
            ftype: FrameType::Tlm,
            timestamp_ms,
            payload: payload.into(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        RECORD_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, StoreError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(StoreError::PayloadTooLong(self.payload.len()));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(RECORD_MAGIC);
        out.push(self.dev_id);
        out.push(self.ftype.as_byte());
        out.extend_from_slice(&self.timestamp_ms.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc16(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        Ok(out)
    }
}

/// A record together with its position in the global append order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoredRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub record: TelemetryRecord,
}

/// Why a scan stopped before the end of its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScanStop {
    Clean,
    /// An incomplete record at the end of the input.
    TruncatedTail {
        bytes: u64,
    },
    /// A complete record failed validation; everything from `offset` on is
    /// unrecovered.
    Corrupt {
        offset: u64,
        bytes: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scan {
    pub records: Vec<TelemetryRecord>,
    /// Length of the valid prefix.
    pub valid_len: u64,
    pub stop: ScanStop,
}

/// Parses as many valid records as possible from the start of `bytes`.
pub fn scan_records(bytes: &[u8]) -> Scan {
    let mut records = Vec::new();
    let mut off = 0usize;
    let stop = loop {
        let rest = &bytes[off..];
        if rest.is_empty() {
            break ScanStop::Clean;
        }
        if rest[0] != RECORD_MAGIC {
            break corrupt(off, rest.len());
        }
        if rest.len() < RECORD_HEADER_LEN {
            break ScanStop::TruncatedTail {
                bytes: rest.len() as u64,
            };
        }
        let len = u16::from_be_bytes([rest[11], rest[12]]) as usize;
        if len > MAX_PAYLOAD {
            break corrupt(off, rest.len());
        }
        let total = RECORD_OVERHEAD + len;
        if rest.len() < total {
            break ScanStop::TruncatedTail {
                bytes: rest.len() as u64,
            };
        }
        let body = &rest[..total - 2];
        let stored = u16::from_be_bytes([rest[total - 2], rest[total - 1]]);
        let Ok(ftype) = FrameType::try_from(rest[2]) else {
            break corrupt(off, rest.len());
        };
        if crc16(body) != stored {
            break corrupt(off, rest.len());
        }
        records.push(TelemetryRecord {
            dev_id: rest[1],
            ftype,
            timestamp_ms: u64::from_be_bytes(rest[3..11].try_into().unwrap()),
            payload: rest[RECORD_HEADER_LEN..RECORD_HEADER_LEN + len].to_vec(),
        });
        off += total;
    };
    Scan {
        records,
        valid_len: off as u64,
        stop,
    }
}

fn corrupt(offset: usize, bytes: usize) -> ScanStop {
    ScanStop::Corrupt {
        offset: offset as u64,
        bytes: bytes as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncPolicy {
    /// Hand the bytes to the OS before returning (survives process death).
    #[default]
    Flush,
    /// Also fsync the data (survives power loss).
    Fsync,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreOptions {
    pub rotate_bytes: u64,
    pub sync: SyncPolicy,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            rotate_bytes: DEFAULT_ROTATE_BYTES,
            sync: SyncPolicy::Flush,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RecoveryReport {
    pub records_recovered: u64,
    /// Partial record dropped from the end of the active file.
    pub truncated_tail_bytes: u64,
    /// Bytes after a mid-file corruption, in any file.
    pub unrecovered_bytes: u64,
    pub sealed_segments: usize,
}

#[derive(Debug, Clone)]
struct Segment {
    path: PathBuf,
    valid_len: u64,
}

#[derive(Debug)]
struct Inner {
    file: Option<File>,
    active_len: u64,
    segments: Vec<Segment>,
    next_seq: u64,
}

/// Append-only telemetry log shared by all receive tasks.
#[derive(Debug)]
pub struct TelemetryStore {
    path: PathBuf,
    opts: StoreOptions,
    inner: Mutex<Inner>,
}

pub fn segment_path(path: &Path, n: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".{n}"));
    PathBuf::from(s)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_file(path: &Path) -> io::Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

impl TelemetryStore {
    /// Opens (or creates) the store at `path` with default options.
    pub fn recover(path: impl AsRef<Path>) -> Result<(Self, RecoveryReport), StoreError> {
        Self::open(path, StoreOptions::default())
    }

    pub fn open(path: impl AsRef<Path>, opts: StoreOptions) -> Result<(Self, RecoveryReport), StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut report = RecoveryReport::default();
        let mut segments = Vec::new();
        let mut n = 1;
        loop {
            let seg = segment_path(&path, n);
            if !seg.exists() {
                break;
            }
            let bytes = fs::read(&seg)?;
            let scan = scan_records(&bytes);
            match scan.stop {
                ScanStop::Clean => {}
                ScanStop::TruncatedTail { bytes } | ScanStop::Corrupt { bytes, .. } => {
                    warn!(segment = %seg.display(), bytes, "sealed segment has unrecovered bytes");
                    report.unrecovered_bytes += bytes;
                }
            }
            report.records_recovered += scan.records.len() as u64;
            segments.push(Segment {
                path: seg,
                valid_len: scan.valid_len,
            });
            n += 1;
        }
        report.sealed_segments = segments.len();

        let bytes = read_file(&path)?;
        let scan = scan_records(&bytes);
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&path)?;
        match scan.stop {
            ScanStop::Clean => {}
            ScanStop::TruncatedTail { bytes: tail } => {
                report.truncated_tail_bytes = tail;
                file.set_len(scan.valid_len)?;
                file.sync_all()?;
            }
            ScanStop::Corrupt { offset, bytes: lost } => {
                // keep the unreadable remainder for inspection, then cut it off
                let aside = sidecar(&path, ".unrecovered");
                fs::write(&aside, &bytes[offset as usize..])?;
                warn!(path = %path.display(), offset, bytes = lost, aside = %aside.display(),
                    "mid-file corruption; remainder moved aside");
                report.unrecovered_bytes += lost;
                file.set_len(scan.valid_len)?;
                file.sync_all()?;
            }
        }
        report.records_recovered += scan.records.len() as u64;
        info!(path = %path.display(), records = report.records_recovered,
            tail = report.truncated_tail_bytes, "telemetry store open");

        let store = Self {
            opts,
            inner: Mutex::new(Inner {
                file: Some(file),
                active_len: scan.valid_len,
                segments,
                next_seq: report.records_recovered,
            }),
            path,
        };
        Ok((store, report))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record and returns its sequence number. Sequence numbers
    /// are gap-free and strictly increasing across all callers.
    pub fn append(&self, record: &TelemetryRecord) -> Result<u64, StoreError> {
        let bytes = record.encode()?;
        let mut inner = self.inner.lock();
        if inner.file.is_none() {
            return Err(StoreError::Closed);
        }
        if inner.active_len > 0 && inner.active_len + bytes.len() as u64 > self.opts.rotate_bytes {
            self.rotate(&mut inner)?;
        }
        let offset = inner.active_len;
        let file = inner.file.as_mut().ok_or(StoreError::Closed)?;
        let written = file.write_all_at(&bytes, offset).and_then(|()| match self.opts.sync {
            SyncPolicy::Flush => Ok(()),
            SyncPolicy::Fsync => file.sync_data(),
        });
        if let Err(e) = written {
            // leave no partial record behind
            let _ = file.set_len(offset);
            return Err(e.into());
        }
        inner.active_len += bytes.len() as u64;
        let seq = inner.next_seq;
        inner.next_seq += 1;
        Ok(seq)
    }

    fn rotate(&self, inner: &mut Inner) -> Result<(), StoreError> {
        if let Some(f) = inner.file.take() {
            f.sync_all()?;
        }
        let sealed = segment_path(&self.path, inner.segments.len() + 1);
        fs::rename(&self.path, &sealed)?;
        inner.segments.push(Segment {
            path: sealed,
            valid_len: inner.active_len,
        });
        inner.file = Some(
            OpenOptions::new()
                .create(true)
                .read(true)
                .write(true)
                .truncate(true)
                .open(&self.path)?,
        );
        inner.active_len = 0;
        Ok(())
    }

    /// Records with `t0 <= timestamp <= t1` (and matching `dev_id` when
    /// given), in append order. Sees a consistent prefix of concurrent
    /// appends.
    pub fn query(&self, dev_id: Option<u8>, t0: u64, t1: u64) -> Result<Vec<StoredRecord>, StoreError> {
        if t0 > t1 {
            return Err(StoreError::InvalidRange { t0, t1 });
        }
        let mut out = Vec::new();
        self.for_each(|r| {
            if dev_id.is_none_or(|d| d == r.record.dev_id) && (t0..=t1).contains(&r.record.timestamp_ms) {
                out.push(r);
            }
        })?;
        Ok(out)
    }

    fn for_each(&self, mut f: impl FnMut(StoredRecord)) -> Result<(), StoreError> {
        let (segments, active, active_len) = {
            let inner = self.inner.lock();
            let file = match inner.file.as_ref() {
                Some(f) => Some(f.try_clone()?),
                None => None,
            };
            (inner.segments.clone(), file, inner.active_len)
        };
        let mut seq = 0u64;
        for seg in &segments {
            let bytes = fs::read(&seg.path)?;
            let end = (seg.valid_len as usize).min(bytes.len());
            for record in scan_records(&bytes[..end]).records {
                f(StoredRecord { seq, record });
                seq += 1;
            }
        }
        let bytes = match active {
            Some(file) => {
                let mut buf = vec![0u8; active_len as usize];
                file.read_exact_at(&mut buf, 0)?;
                buf
            }
            None => read_file(&self.path)?,
        };
        for record in scan_records(&bytes).records {
            f(StoredRecord { seq, record });
            seq += 1;
        }
        Ok(())
    }

    /// Records appended so far, including recovered ones.
    pub fn len(&self) -> u64 {
        self.inner.lock().next_seq
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held across the active file and sealed segments.
    pub fn size_bytes(&self) -> u64 {
        let inner = self.inner.lock();
        inner.active_len + inner.segments.iter().map(|s| s.valid_len).sum::<u64>()
    }

    pub fn segment_count(&self) -> usize {
        self.inner.lock().segments.len()
    }

    /// Syncs and closes; later appends fail with [`StoreError::Closed`].
    pub fn close(&self) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        if let Some(mut f) = inner.file.take() {
            f.flush()?;
            f.sync_all()?;
        }
        Ok(())
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().file.is_none()
    }
}

/// Read-only view of a store for offline inspection; never modifies files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreDump {
    pub records: Vec<StoredRecord>,
    pub active_stop: ScanStop,
    pub segment_stops: Vec<ScanStop>,
}

impl StoreDump {
    /// Same selection rule as [`TelemetryStore::query`].
    pub fn query(&self, dev_id: Option<u8>, t0: u64, t1: u64) -> Result<Vec<&StoredRecord>, StoreError> {
        if t0 > t1 {
            return Err(StoreError::InvalidRange { t0, t1 });
        }
        Ok(self
            .records
            .iter()
            .filter(|r| dev_id.is_none_or(|d| d == r.record.dev_id) && (t0..=t1).contains(&r.record.timestamp_ms))
            .collect())
    }
}

pub fn read_store(path: impl AsRef<Path>) -> Result<StoreDump, StoreError> {
    let path = path.as_ref();
    // the active file must exist; an absent store is an error for readers
    let active = fs::read(path)?;
    let mut records = Vec::new();
    let mut segment_stops = Vec::new();
    let mut seq = 0;
    let mut n = 1;
    loop {
        let seg = segment_path(path, n);
        if !seg.exists() {
            break;
        }
        let scan = scan_records(&fs::read(&seg)?);
        segment_stops.push(scan.stop);
        for record in scan.records {
            records.push(StoredRecord { seq, record });
            seq += 1;
        }
        n += 1;
    }
    let scan = scan_records(&active);
    for record in scan.records {
        records.push(StoredRecord { seq, record });
        seq += 1;
    }
    Ok(StoreDump {
        records,
        active_stop: scan.stop,
        segment_stops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::sync::Arc;

    fn rec(dev: u8, ts: u64, n: usize) -> TelemetryRecord {
        TelemetryRecord::new(dev, ts, (0..n).map(|i| (i as u8).wrapping_mul(dev)).collect::<Vec<_>>())
    }

    #[test]
    fn record_layout_bit_exact() {
        let r = TelemetryRecord::new(4, 0x0102030405060708, vec![0xAA, 0xBB]);
        let b = r.encode().unwrap();
        assert_eq!(&b[..13], &[0xA5, 4, 2, 1, 2, 3, 4, 5, 6, 7, 8, 0, 2]);
        assert_eq!(&b[13..15], &[0xAA, 0xBB]);
        assert_eq!(&b[15..], &crc16(&b[..15]).to_be_bytes());
    }

    #[test]
    fn first_append_is_zero_and_close_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let (s, rep) = TelemetryStore::recover(dir.path().join("tlm.log")).unwrap();
        assert_eq!(rep, RecoveryReport::default());
        assert!(s.query(None, 0, u64::MAX).unwrap().is_empty());
        assert_eq!(s.append(&rec(1, 10, 32)).unwrap(), 0);
        assert_eq!(s.append(&rec(1, 11, 32)).unwrap(), 1);
        s.close().unwrap();
        assert!(matches!(s.append(&rec(1, 12, 32)), Err(StoreError::Closed)));
        assert_eq!(s.query(None, 0, u64::MAX).unwrap().len(), 2);
    }

    #[test]
    fn query_filters() {
        let dir = tempfile::tempdir().unwrap();
        let (s, _) = TelemetryStore::recover(dir.path().join("tlm.log")).unwrap();
        for i in 0..20u64 {
            s.append(&rec(if i % 2 == 0 { 1 } else { 4 }, 100 + i, 24)).unwrap();
        }
        let only4 = s.query(Some(4), 0, u64::MAX).unwrap();
        assert_eq!(only4.len(), 10);
        assert!(only4.iter().all(|r| r.record.dev_id == 4));
        let window = s.query(None, 105, 109).unwrap();
        assert_eq!(window.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![5, 6, 7, 8, 9]);
        assert!(matches!(s.query(None, 9, 8), Err(StoreError::InvalidRange { .. })));
    }

    #[test]
    fn reopen_continues_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tlm.log");
        {
            let (s, _) = TelemetryStore::recover(&p).unwrap();
            for i in 0..5 {
                s.append(&rec(2, i, 8)).unwrap();
            }
        }
        let (s, rep) = TelemetryStore::recover(&p).unwrap();
        assert_eq!(rep.records_recovered, 5);
        assert_eq!(s.append(&rec(2, 9, 8)).unwrap(), 5);
    }

    #[test]
    fn truncated_tail_is_dropped_and_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tlm.log");
        let mut bytes = Vec::new();
        for i in 0..3 {
            bytes.extend(rec(1, i, 32).encode().unwrap());
        }
        let partial = rec(1, 3, 32).encode().unwrap();
        bytes.extend(&partial[..20]);
        fs::write(&p, &bytes).unwrap();
        let (s, rep) = TelemetryStore::recover(&p).unwrap();
        assert_eq!(
            (rep.records_recovered, rep.truncated_tail_bytes, rep.unrecovered_bytes),
            (3, 20, 0)
        );
        assert_eq!(s.append(&rec(1, 4, 32)).unwrap(), 3);
        let all = s.query(None, 0, u64::MAX).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(all[3].record.timestamp_ms, 4);
    }

    #[test]
    fn mid_file_corruption_stops_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tlm.log");
        let mut bytes = Vec::new();
        for i in 0..5 {
            bytes.extend(rec(1, i, 10).encode().unwrap());
        }
        let rl = rec(1, 0, 10).encoded_len();
        bytes[2 * rl + 14] ^= 0x01;
        fs::write(&p, &bytes).unwrap();
        let (s, rep) = TelemetryStore::recover(&p).unwrap();
        assert_eq!(rep.records_recovered, 2);
        assert_eq!(rep.unrecovered_bytes, (3 * rl) as u64);
        assert_eq!(fs::read(sidecar(&p, ".unrecovered")).unwrap().len(), 3 * rl);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn empty_and_absent_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tlm.log");
        fs::write(&p, b"").unwrap();
        let (s, rep) = TelemetryStore::recover(&p).unwrap();
        assert_eq!(rep.records_recovered, 0);
        assert!(s.is_empty());
        assert!(read_store(dir.path().join("missing")).is_err());
    }

    #[test]
    fn rotation_keeps_order_and_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tlm.log");
        let opts = StoreOptions {
            rotate_bytes: 200,
            sync: SyncPolicy::Flush,
        };
        {
            let (s, _) = TelemetryStore::open(&p, opts).unwrap();
            for i in 0..30 {
                assert_eq!(s.append(&rec(3, i, 30)).unwrap(), i);
            }
            assert!(s.segment_count() >= 5);
            let all = s.query(None, 0, u64::MAX).unwrap();
            assert_eq!(
                all.iter().map(|r| r.record.timestamp_ms).collect::<Vec<_>>(),
                (0..30).collect::<Vec<_>>()
            );
        }
        let (s, rep) = TelemetryStore::open(&p, opts).unwrap();
        assert_eq!(rep.records_recovered, 30);
        assert_eq!(s.append(&rec(3, 30, 30)).unwrap(), 30);
        let dump = read_store(&p).unwrap();
        assert_eq!(dump.records.len(), 31);
        assert!(dump.records.iter().enumerate().all(|(i, r)| r.seq == i as u64));
    }

    #[test]
    fn concurrent_appends_are_gap_free() {
        let dir = tempfile::tempdir().unwrap();
        let (s, _) = TelemetryStore::recover(dir.path().join("tlm.log")).unwrap();
        let s = Arc::new(s);
        let handles: Vec<_> = (0..7u8)
            .map(|t| {
                let s = Arc::clone(&s);
                std::thread::spawn(move || {
                    let n = if t < 6 { 143 } else { 142 };
                    (0..n)
                        .map(|i| {
                            let r = TelemetryRecord::new(t + 1, i, vec![t + 1; 32]);
                            (s.append(&r).unwrap(), t + 1, i)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let acks: Vec<(u64, u8, u64)> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        let seqs: BTreeSet<u64> = acks.iter().map(|a| a.0).collect();
        assert_eq!(acks.len(), 1000);
        assert_eq!(seqs, (0..1000).collect());
        let all = s.query(None, 0, u64::MAX).unwrap();
        for (seq, dev, ts) in acks {
            let r = &all[seq as usize];
            assert_eq!((r.seq, r.record.dev_id, r.record.timestamp_ms), (seq, dev, ts));
            assert_eq!(r.record.payload, vec![dev; 32]);
        }
    }

    #[test]
    fn query_matches_naive_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dir = tempfile::tempdir().unwrap();
        let (s, _) = TelemetryStore::recover(dir.path().join("tlm.log")).unwrap();
        let mut all = Vec::new();
        for _ in 0..300 {
            let r = rec(rng.gen_range(1..=7), rng.gen_range(0..1000), rng.gen_range(0..40));
            s.append(&r).unwrap();
            all.push(r);
        }
        for _ in 0..50 {
            let dev = if rng.gen_bool(0.3) {
                None
            } else {
                Some(rng.gen_range(1..=7))
            };
            let a = rng.gen_range(0..1000);
            let b = rng.gen_range(a..=1000);
            let expect: Vec<&TelemetryRecord> = all
                .iter()
                .filter(|r| dev.is_none_or(|d| r.dev_id == d) && r.timestamp_ms >= a && r.timestamp_ms <= b)
                .collect();
            let got = s.query(dev, a, b).unwrap();
            assert_eq!(got.iter().map(|r| &r.record).collect::<Vec<_>>(), expect);
        }
    }
}
