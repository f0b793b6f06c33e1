//! Streaming deframer: sync hunting, header/body accumulation and CRC check.
//!
//! The decoder is a byte-at-a-time state machine, so the event sequence for
//! a stream does not depend on how the stream is chunked. After a failed
//! candidate the bytes following its first sync byte are replayed through the
//! hunter, so a real frame hiding inside a false candidate is still found.

use std::collections::VecDeque;

use super::{crc16, Frame, FrameType, HEADER_LEN, MAX_FRAME_LEN, OVERHEAD, SYNC};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    /// Complete candidate whose checksum did not match.
    Crc { computed: u16, received: u16 },
    /// Type byte outside the four known values.
    UnknownType(u8),
}

/// Header fields of a rejected candidate, as read off the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrcErrorInfo {
    pub dev_id: u8,
    pub ftype: u8,
    pub seq: u8,
    pub len: u8,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    FrameOk(Frame),
    CrcError(CrcErrorInfo),
    /// Bytes discarded while hunting, reported when the next sync is found.
    Resync(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeframerPhase {
    HuntingSync,
    ReadingHeader,
    ReadingBody,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeframerStats {
    pub frames_ok: u64,
    pub crc_errors: u64,
    pub resyncs: u64,
    pub bytes_skipped: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Hunting { saw_first: bool },
    Header,
    Body { total: usize },
}

/// Per-port streaming decoder. Single owner; keep one per receive task.
#[derive(Debug, Clone)]
pub struct Deframer {
    state: State,
    buf: Vec<u8>,
    replay: VecDeque<u8>,
    skipped: usize,
    stats: DeframerStats,
}

impl Default for Deframer {
    fn default() -> Self {
        Self::new()
    }
}

impl Deframer {
    pub fn new() -> Self {
        Self {
            state: State::Hunting { saw_first: false },
            buf: Vec::with_capacity(MAX_FRAME_LEN),
            replay: VecDeque::new(),
            skipped: 0,
            stats: DeframerStats::default(),
        }
    }

    pub fn phase(&self) -> DeframerPhase {
        match self.state {
            State::Hunting { .. } => DeframerPhase::HuntingSync,
            State::Header => DeframerPhase::ReadingHeader,
            State::Body { .. } => DeframerPhase::ReadingBody,
        }
    }

    pub fn stats(&self) -> DeframerStats {
        self.stats
    }

    /// Bytes held for a partially received candidate.
    pub fn buffered(&self) -> usize {
        self.buf.len() + self.replay.len() + usize::from(self.holds_sync_byte())
    }

    fn holds_sync_byte(&self) -> bool {
        matches!(self.state, State::Hunting { saw_first: true })
    }

    /// Consumes all of `bytes`, returning the events they complete.
    pub fn push(&mut self, bytes: &[u8]) -> Vec<Event> {
        let mut events = Vec::new();
        self.push_into(bytes, &mut events);
        events
    }

    pub fn push_into(&mut self, bytes: &[u8], events: &mut Vec<Event>) {
        let mut input = bytes.iter().copied();
        loop {
            let byte = match self.replay.pop_front() {
                Some(b) => b,
                None => match input.next() {
                    Some(b) => b,
                    None => break,
                },
            };
            self.step(byte, events);
        }
    }

    fn step(&mut self, byte: u8, events: &mut Vec<Event>) {
        match self.state {
            State::Hunting { saw_first } => {
                if saw_first && byte == SYNC[1] {
                    if self.skipped > 0 {
                        self.stats.resyncs += 1;
                        self.stats.bytes_skipped += self.skipped as u64;
                        events.push(Event::Resync(self.skipped));
                        self.skipped = 0;
                    }
                    self.buf.clear();
                    self.buf.extend_from_slice(&SYNC);
                    self.state = State::Header;
                } else if byte == SYNC[0] {
                    if saw_first {
                        self.skipped += 1;
                    }
                    self.state = State::Hunting { saw_first: true };
                } else {
                    self.skipped += 1 + usize::from(saw_first);
                    self.state = State::Hunting { saw_first: false };
                }
            }
            State::Header => {
                self.buf.push(byte);
                if self.buf.len() == HEADER_LEN {
                    let ftype = self.buf[3];
                    if FrameType::try_from(ftype).is_err() {
                        self.reject(RejectReason::UnknownType(ftype), events);
                    } else {
                        let total = OVERHEAD + self.buf[5] as usize;
                        self.state = State::Body { total };
                    }
                }
            }
            State::Body { total } => {
                self.buf.push(byte);
                if self.buf.len() == total {
                    let body_end = total - 2;
                    let computed = crc16(&self.buf[2..body_end]);
                    let received = u16::from_be_bytes([self.buf[body_end], self.buf[body_end + 1]]);
                    if computed == received {
                        let frame = Frame {
                            dev_id: self.buf[2],
                            // validated on header completion
                            ftype: FrameType::try_from(self.buf[3]).unwrap_or(FrameType::Cmd),
                            seq: self.buf[4],
                            payload: self.buf[HEADER_LEN..body_end].to_vec(),
                        };
                        self.stats.frames_ok += 1;
                        events.push(Event::FrameOk(frame));
                        self.buf.clear();
                        self.state = State::Hunting { saw_first: false };
                    } else {
                        self.reject(RejectReason::Crc { computed, received }, events);
                    }
                }
            }
        }
    }

    fn reject(&mut self, reason: RejectReason, events: &mut Vec<Event>) {
        self.stats.crc_errors += 1;
        events.push(Event::CrcError(CrcErrorInfo {
            dev_id: self.buf[2],
            ftype: self.buf[3],
            seq: self.buf[4],
            len: self.buf[5],
            reason,
        }));
        // Resume hunting at the byte after the failed sync's first byte.
        for &b in self.buf[1..].iter().rev() {
            self.replay.push_front(b);
        }
        self.buf.clear();
        self.state = State::Hunting { saw_first: false };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::FrameType;
    use proptest::prelude::*;

    fn frame(dev: u8, seq: u8, payload: &[u8]) -> Frame {
        Frame::new(dev, FrameType::Tlm, seq, payload.to_vec())
    }

    fn feed_bytewise(bytes: &[u8]) -> Vec<Event> {
        let mut d = Deframer::new();
        let mut ev = Vec::new();
        for b in bytes {
            d.push_into(std::slice::from_ref(b), &mut ev);
        }
        ev
    }

    #[test]
    fn two_frames_bytewise() {
        let f1 = frame(1, 0, &[0x10]);
        let f2 = frame(2, 1, &[1, 2, 3, 4]);
        let mut bytes = f1.encode().unwrap();
        bytes.extend(f2.encode().unwrap());
        assert_eq!(feed_bytewise(&bytes), vec![Event::FrameOk(f1), Event::FrameOk(f2)]);
    }

    #[test]
    fn garbage_then_frame() {
        let mut bytes: Vec<u8> = (0..100u32).map(|i| (i * 7 % 200) as u8 + 1).collect();
        assert!(!bytes.windows(2).any(|w| w == SYNC));
        let f = frame(4, 9, &[0xAA; 24]);
        bytes.extend(f.encode().unwrap());
        assert_eq!(
            Deframer::new().push(&bytes),
            vec![Event::Resync(100), Event::FrameOk(f)]
        );
    }

    #[test]
    fn trailing_sync_byte_counts_as_skipped() {
        let f = frame(1, 0, &[]);
        let mut bytes = vec![0x00, 0xEB, 0xEB];
        bytes.extend(f.encode().unwrap());
        assert_eq!(Deframer::new().push(&bytes), vec![Event::Resync(3), Event::FrameOk(f)]);
    }

    #[test]
    fn payload_bit_flip_is_crc_error() {
        let f = frame(1, 3, &[0x10, 0x20, 0x30]);
        let mut bytes = f.encode().unwrap();
        bytes[7] ^= 0x04;
        let ev = Deframer::new().push(&bytes);
        assert!(matches!(
            ev[0],
            Event::CrcError(CrcErrorInfo {
                reason: RejectReason::Crc { .. },
                ..
            })
        ));
        assert!(!ev.iter().any(|e| matches!(e, Event::FrameOk(_))));
    }

    #[test]
    fn bad_type_rejected_early() {
        let mut d = Deframer::new();
        let ev = d.push(&[0xEB, 0x90, 0x01, 0x09, 0x00, 0xFF]);
        assert!(matches!(
            ev[0],
            Event::CrcError(CrcErrorInfo {
                reason: RejectReason::UnknownType(9),
                ..
            })
        ));
        assert_eq!(d.phase(), DeframerPhase::HuntingSync);
    }

    #[test]
    fn frame_hidden_in_false_candidate_is_recovered() {
        // A false sync whose declared length swallows a real frame.
        let real = frame(2, 5, &[1, 2, 3]);
        let mut bytes = vec![0xEB, 0x90, 0x01, 0x02, 0x00, 0x20];
        bytes.extend(real.encode().unwrap());
        bytes.extend(vec![0x55; 40]);
        let ev = Deframer::new().push(&bytes);
        assert!(matches!(ev[0], Event::CrcError(_)));
        assert!(ev.contains(&Event::FrameOk(real)));
    }

    #[test]
    fn phases_progress() {
        let mut d = Deframer::new();
        assert_eq!(d.phase(), DeframerPhase::HuntingSync);
        d.push(&[0xEB, 0x90, 0x01]);
        assert_eq!(d.phase(), DeframerPhase::ReadingHeader);
        d.push(&[0x02, 0x00, 0x02]);
        assert_eq!(d.phase(), DeframerPhase::ReadingBody);
    }

    proptest! {
        #[test]
        fn chunking_independence(
            data in proptest::collection::vec(prop_oneof![any::<u8>(), Just(0xEBu8), Just(0x90u8)], 0..2000),
            cuts in proptest::collection::vec(any::<prop::sample::Index>(), 0..20),
        ) {
            let whole = Deframer::new().push(&data);
            let mut points: Vec<usize> = cuts.iter().map(|c| c.index(data.len() + 1)).collect();
            points.sort_unstable();
            let mut d = Deframer::new();
            let mut ev = Vec::new();
            let mut prev = 0;
            for p in points.into_iter().chain(std::iter::once(data.len())) {
                d.push_into(&data[prev..p], &mut ev);
                prop_assert!(d.buffered() <= MAX_FRAME_LEN);
                prev = p;
            }
            prop_assert_eq!(whole, ev);
        }

        #[test]
        fn round_trip_through_stream(
            dev in any::<u8>(), seq in any::<u8>(),
            payload in proptest::collection::vec(any::<u8>(), 0..=255),
        ) {
            let f = frame(dev, seq, &payload);
            prop_assert_eq!(Deframer::new().push(&f.encode().unwrap()), vec![Event::FrameOk(f)]);
        }
    }
}
