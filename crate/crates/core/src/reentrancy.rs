//! Interleaved-writer corruption lab.
//!
//! Several writers push fixed-length messages through one shared sink. In
//! `Unsafe` mode a writer may be preempted between chunks, so a message can
//! be cut by another writer's bytes. In `Safe` mode a writer holds an
//! exclusive lease for a whole message. Each writer draws from its own
//! alphabet, which makes every mixed run in the sink provably corrupted.
//!
//! The default scheduler is a seeded cooperative one: each step a random
//! runnable writer emits its next chunk. Results are reproducible per seed.
//! `Scheduling::Host` uses real threads instead and is not reproducible.

use std::sync::{Arc, Barrier, Mutex};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

/// One pass over the alphabet.
pub const DEFAULT_MESSAGE_LEN: usize = 26;
pub const MAX_WRITERS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabError {
    #[error("writer alphabets {0} and {1} overlap")]
    OverlappingAlphabets(usize, usize),
    #[error("writer {0} has an empty alphabet")]
    EmptyAlphabet(usize),
    #[error("writer_count must be between 1 and {MAX_WRITERS}, got {0}")]
    WriterCount(usize),
    #[error("{0} must be > 0")]
    Zero(&'static str),
    #[error("{given} alphabets supplied for {writers} writers")]
    AlphabetCount { given: usize, writers: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoMode {
    Unsafe,
    Safe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheduling {
    #[default]
    Seeded,
    Host,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub mode: DemoMode,
    pub writer_count: usize,
    pub messages_per_writer: usize,
    /// Bytes per message; also the classification run length.
    pub message_len: usize,
    /// Bytes per write step.
    pub chunk_size: usize,
    pub seed: u64,
    /// Per-writer symbol sets; generated when `None`.
    pub alphabets: Option<Vec<Vec<u8>>>,
    pub scheduling: Scheduling,
}

impl DemoConfig {
    pub fn new(mode: DemoMode, writer_count: usize, messages_per_writer: usize) -> Self {
        Self {
            mode,
            writer_count,
            messages_per_writer,
            message_len: DEFAULT_MESSAGE_LEN,
            chunk_size: 1,
            seed: 0,
            alphabets: None,
            scheduling: Scheduling::Seeded,
        }
    }

    pub fn chunk(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn resolved_alphabets(&self) -> Result<Vec<Vec<u8>>, LabError> {
        if self.writer_count == 0 || self.writer_count > MAX_WRITERS {
            return Err(LabError::WriterCount(self.writer_count));
        }
        if self.chunk_size == 0 {
            return Err(LabError::Zero("chunk_size"));
        }
        if self.message_len == 0 {
            return Err(LabError::Zero("message_len"));
        }
        let alphabets = match &self.alphabets {
            Some(a) if a.len() != self.writer_count => {
                return Err(LabError::AlphabetCount {
                    given: a.len(),
                    writers: self.writer_count,
                })
            }
            Some(a) => a.clone(),
            None => default_alphabets(self.writer_count),
        };
        let mut owner = [None::<usize>; 256];
        for (i, a) in alphabets.iter().enumerate() {
            if a.is_empty() {
                return Err(LabError::EmptyAlphabet(i));
            }
            for &b in a {
                match owner[b as usize] {
                    Some(j) if j != i => return Err(LabError::OverlappingAlphabets(j, i)),
                    _ => owner[b as usize] = Some(i),
                }
            }
        }
        Ok(alphabets)
    }
}

/// Writer 0 gets `a..z`, writer 1 `A..Z`; further writers get disjoint
/// 14-byte blocks of the remaining byte values.
pub fn default_alphabets(writers: usize) -> Vec<Vec<u8>> {
    let rest: Vec<u8> = (0..=255u8).filter(|b| !b.is_ascii_alphabetic()).collect();
    (0..writers)
        .map(|i| match i {
            0 => (b'a'..=b'z').collect(),
            1 => (b'A'..=b'Z').collect(),
            k => rest[(k - 2) * 14..(k - 1) * 14].to_vec(),
        })
        .collect()
}

fn message_for(alphabet: &[u8], len: usize) -> Vec<u8> {
    alphabet.iter().copied().cycle().take(len).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptionReport {
    pub messages_total: u64,
    pub messages_corrupted: u64,
    pub corruption_rate: f64,
    #[serde(serialize_with = "escaped")]
    pub first_corruption_example: Option<Vec<u8>>,
    /// Bytes after the last complete run; not classified.
    pub trailing_bytes: usize,
}

fn escaped<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(bytes) => {
            let text: String = bytes
                .iter()
                .flat_map(|b| std::ascii::escape_default(*b))
                .map(char::from)
                .collect();
            s.serialize_some(&text)
        }
        None => s.serialize_none(),
    }
}

/// Splits `bytes` into runs of `run_length` and counts runs that mix
/// symbols of more than one writer (or contain foreign bytes).
pub fn classify_stream(bytes: &[u8], alphabets: &[Vec<u8>], run_length: usize) -> CorruptionReport {
    assert!(run_length > 0, "run_length must be > 0");
    const FOREIGN: u8 = u8::MAX;
    let mut owner = [FOREIGN; 256];
    for (i, a) in alphabets.iter().enumerate() {
        for &b in a {
            owner[b as usize] = i as u8;
        }
    }
    let mut total = 0u64;
    let mut corrupted = 0u64;
    let mut first = None;
    let mut runs = bytes.chunks_exact(run_length);
    for run in &mut runs {
        total += 1;
        let w = owner[run[0] as usize];
        if w == FOREIGN || run.iter().any(|&b| owner[b as usize] != w) {
            corrupted += 1;
            if first.is_none() {
                first = Some(run.to_vec());
            }
        }
    }
    CorruptionReport {
        messages_total: total,
        messages_corrupted: corrupted,
        corruption_rate: if total == 0 {
            0.0
        } else {
            corrupted as f64 / total as f64
        },
        first_corruption_example: first,
        trailing_bytes: runs.remainder().len(),
    }
}

/// Runs the configured writers and classifies what reached the sink.
pub fn run_demo(config: &DemoConfig) -> Result<CorruptionReport, LabError> {
    let alphabets = config.resolved_alphabets()?;
    let sink = match config.scheduling {
        Scheduling::Seeded => seeded_sink(config, &alphabets),
        Scheduling::Host => host_sink(config, &alphabets),
    };
    Ok(classify_stream(&sink, &alphabets, config.message_len))
}

fn seeded_sink(config: &DemoConfig, alphabets: &[Vec<u8>]) -> Vec<u8> {
    let messages: Vec<Vec<u8>> = alphabets.iter().map(|a| message_for(a, config.message_len)).collect();
    let total_bytes = config.writer_count * config.messages_per_writer * config.message_len;
    let mut sink = Vec::with_capacity(total_bytes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // (messages left, offset into current message)
    let mut writers: Vec<(usize, usize)> = vec![(config.messages_per_writer, 0); config.writer_count];
    let mut runnable: Vec<usize> = (0..config.writer_count)
        .filter(|_| config.messages_per_writer > 0)
        .collect();
    let mut lease: Option<usize> = None;

    while !runnable.is_empty() {
        let slot = match (config.mode, lease) {
            (DemoMode::Safe, Some(holder)) => runnable.iter().position(|&w| w == holder).unwrap(),
            _ => rng.gen_range(0..runnable.len()),
        };
        let w = runnable[slot];
        if config.mode == DemoMode::Safe {
            lease = Some(w);
        }
        let (left, offset) = &mut writers[w];
        let end = (*offset + config.chunk_size).min(config.message_len);
        sink.extend_from_slice(&messages[w][*offset..end]);
        *offset = end;
        if end == config.message_len {
            *offset = 0;
            *left -= 1;
            lease = None;
            if *left == 0 {
                runnable.swap_remove(slot);
            }
        }
    }
    sink
}

fn host_sink(config: &DemoConfig, alphabets: &[Vec<u8>]) -> Vec<u8> {
    let sink = Arc::new(Mutex::new(Vec::new()));
    let lease = Arc::new(Mutex::new(()));
    let start = Arc::new(Barrier::new(config.writer_count));
    let handles: Vec<_> = alphabets
        .iter()
        .map(|a| {
            let message = message_for(a, config.message_len);
            let (sink, lease, start) = (Arc::clone(&sink), Arc::clone(&lease), Arc::clone(&start));
            let (mode, count, chunk) = (config.mode, config.messages_per_writer, config.chunk_size);
            thread::spawn(move || {
                start.wait();
                for _ in 0..count {
                    let _guard = (mode == DemoMode::Safe).then(|| lease.lock().unwrap());
                    for piece in message.chunks(chunk) {
                        sink.lock().unwrap().extend_from_slice(piece);
                        thread::yield_now();
                    }
                }
            })
        })
        .collect();
    for h in handles {
        h.join().expect("writer thread panicked");
    }
    Arc::try_unwrap(sink)
        .map(|m| m.into_inner().unwrap())
        .unwrap_or_default()
}
