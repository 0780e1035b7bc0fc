//! Multi-buffer trace collector.
//!
//! The collector owns a ring of `n_buffers` slots of `capacity` entries each.
//! The producing thread (the simulator's execution callback) fills one slot
//! at a time; a dedicated writer thread drains full slots in ring order and
//! writes each as one exec frame. Every slot moves through
//!
//! ```text
//!   Empty --producer--> Filling --producer--> Full --writer--> Flushing --writer--> Empty
//! ```
//!
//! When the producer fills a slot and the next one in the ring is not yet
//! Empty it blocks until the writer releases it; each such block counts as
//! one congestion wait. With a single slot the producer therefore waits on
//! every rotation.
//!
//! With merging enabled, an execution that starts exactly where the last
//! entry of the filling slot ends extends that entry instead of appending a
//! new one. Merging never looks past the start of the filling slot.

use std::fmt;
use std::io;
use std::mem;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::elog::{encode_exec_frame_into, ConfigPreamble, ExecEntry, FLAG_MERGE, FLAG_TIMING};
use crate::sink::FrameSink;

pub const DEFAULT_BUFFERS: usize = 4;
pub const DEFAULT_CAPACITY: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CollectorConfig {
    pub n_buffers: usize,
    /// Entries per buffer; also the maximum entry count of one frame.
    pub capacity: usize,
    pub merge_enabled: bool,
    /// When false, recorded durations are forced to 0.
    pub timing_enabled: bool,
    pub unit_id: u16,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            n_buffers: DEFAULT_BUFFERS,
            capacity: DEFAULT_CAPACITY,
            merge_enabled: true,
            timing_enabled: false,
            unit_id: 0,
        }
    }
}

impl CollectorConfig {
    pub fn validate(&self) -> Result<(), CollectorError> {
        if self.n_buffers == 0 {
            return Err(CollectorError::InvalidParam("n_buffers must be at least 1"));
        }
        if self.capacity == 0 {
            return Err(CollectorError::InvalidParam("capacity must be at least 1"));
        }
        if self.capacity > crate::elog::MAX_FRAME_ENTRIES {
            return Err(CollectorError::InvalidParam("capacity exceeds the largest encodable frame"));
        }
        Ok(())
    }

    /// Info-block flags describing this configuration.
    pub fn info_flags(&self) -> u32 {
        let mut flags = 0;
        if self.merge_enabled {
            flags |= FLAG_MERGE;
        }
        if self.timing_enabled {
            flags |= FLAG_TIMING;
        }
        flags
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub struct CollectorStats {
    pub events_recorded: u64,
    pub entries_merged: u64,
    pub frames_written: u64,
    /// Times the producer blocked because the next slot was not Empty.
    pub congestion_waits: u64,
    /// Bytes of exec frames handed to the sink (the preamble is not counted).
    pub bytes_written: u64,
}

impl CollectorStats {
    /// Entries that end up in frames once everything is flushed.
    pub fn entries_stored(&self) -> u64 {
        self.events_recorded - self.entries_merged
    }

    pub fn add(&mut self, other: &CollectorStats) {
        self.events_recorded += other.events_recorded;
        self.entries_merged += other.entries_merged;
        self.frames_written += other.frames_written;
        self.congestion_waits += other.congestion_waits;
        self.bytes_written += other.bytes_written;
    }
}

#[derive(Clone, Debug, Error)]
pub enum CollectorError {
    #[error("invalid collector configuration: {0}")]
    InvalidParam(&'static str),
    #[error("invalid address range [{start:#x}, {end:#x})")]
    InvalidRange { start: u64, end: u64 },
    #[error("collector is closed")]
    Closed,
    #[error("elog sink failed: {0}")]
    Sink(Arc<io::Error>),
}

/// Failure while draining at exit; `stats` reflects what was written.
#[derive(Clone, Debug, Error)]
#[error("flushing the collector failed: {source}")]
pub struct FlushError {
    pub source: Arc<io::Error>,
    pub stats: CollectorStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum SlotState {
    Empty,
    Filling,
    Full,
    Flushing,
}

impl SlotState {
    pub fn is_legal_transition(from: SlotState, to: SlotState) -> bool {
        use SlotState::*;
        matches!((from, to), (Empty, Filling) | (Filling, Full) | (Full, Flushing) | (Flushing, Empty))
    }
}

impl fmt::Display for SlotState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SlotState::Empty => "empty",
            SlotState::Filling => "filling",
            SlotState::Full => "full",
            SlotState::Flushing => "flushing",
        };
        f.write_str(s)
    }
}

/// Hook called (under the ring lock) on every slot state change.
pub trait TransitionObserver: Send + Sync {
    fn on_transition(&self, slot: usize, from: SlotState, to: SlotState);
}

#[derive(Clone, Default)]
pub struct CollectorOptions {
    /// Preamble handed to [`FrameSink::begin`]; defaults to a generic one
    /// carrying this configuration's flags.
    pub preamble: Option<ConfigPreamble>,
    pub observer: Option<Arc<dyn TransitionObserver>>,
}

/// Merges an execution of `[start, end)` into `last` when it continues
/// exactly where `last` ends.
pub fn try_merge(last: &ExecEntry, start: u64, end: u64, duration_ns: u32) -> Option<ExecEntry> {
    (last.end == start).then(|| ExecEntry {
        duration_ns: last.duration_ns.saturating_add(duration_ns),
        start: last.start,
        end,
    })
}

struct Slot {
    state: SlotState,
    entries: Vec<ExecEntry>,
    start_time_ns: u64,
}

struct Ring {
    slots: Vec<Slot>,
    end_of_stream: bool,
    writer_error: Option<Arc<io::Error>>,
}

struct Shared {
    ring: Mutex<Ring>,
    slot_emptied: Condvar,
    slot_filled: Condvar,
    frames_written: AtomicU64,
    bytes_written: AtomicU64,
    failed: AtomicBool,
    observer: Option<Arc<dyn TransitionObserver>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn wait<'a, T>(cv: &Condvar, guard: MutexGuard<'a, T>) -> MutexGuard<'a, T> {
    cv.wait(guard).unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl Shared {
    fn transition(&self, ring: &mut Ring, slot: usize, to: SlotState) {
        let from = ring.slots[slot].state;
        debug_assert!(SlotState::is_legal_transition(from, to), "illegal transition {from} -> {to}");
        ring.slots[slot].state = to;
        if let Some(observer) = &self.observer {
            observer.on_transition(slot, from, to);
        }
    }
}

pub struct Collector {
    cfg: CollectorConfig,
    shared: Arc<Shared>,
    writer: Option<JoinHandle<Result<(), Arc<io::Error>>>>,
    /// Slot the producer fills next (Filling while `current` is Some).
    fill_idx: usize,
    /// Entries of the Filling slot, taken out of the ring while filling.
    current: Option<Vec<ExecEntry>>,
    epoch: Instant,
    events_recorded: u64,
    entries_merged: u64,
    congestion_waits: u64,
    outcome: Option<Result<CollectorStats, FlushError>>,
}

impl fmt::Debug for Collector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Collector").field("cfg", &self.cfg).field("stats", &self.stats()).finish()
    }
}

impl Collector {
    pub fn new(cfg: CollectorConfig, sink: impl FrameSink + 'static) -> Result<Self, CollectorError> {
        Self::with_options(cfg, sink, CollectorOptions::default())
    }

    /// Validates `cfg`, emits the preamble to `sink` and starts the writer thread.
    pub fn with_options(
        cfg: CollectorConfig,
        mut sink: impl FrameSink + 'static,
        options: CollectorOptions,
    ) -> Result<Self, CollectorError> {
        cfg.validate()?;
        let preamble = options.preamble.unwrap_or_else(|| {
            let mut p = ConfigPreamble::default();
            p.info.flags = cfg.info_flags();
            p
        });
        sink.begin(&preamble).map_err(|e| CollectorError::Sink(Arc::new(e)))?;

        let slots = (0..cfg.n_buffers)
            .map(|_| Slot { state: SlotState::Empty, entries: Vec::with_capacity(cfg.capacity), start_time_ns: 0 })
            .collect();
        let shared = Arc::new(Shared {
            ring: Mutex::new(Ring { slots, end_of_stream: false, writer_error: None }),
            slot_emptied: Condvar::new(),
            slot_filled: Condvar::new(),
            frames_written: AtomicU64::new(0),
            bytes_written: AtomicU64::new(0),
            failed: AtomicBool::new(false),
            observer: options.observer,
        });
        let writer = {
            let shared = Arc::clone(&shared);
            let unit_id = cfg.unit_id;
            thread::Builder::new()
                .name(format!("elog-writer-{unit_id}"))
                .spawn(move || writer_loop(&shared, sink, unit_id))
                .map_err(|e| CollectorError::Sink(Arc::new(e)))?
        };
        Ok(Collector {
            cfg,
            shared,
            writer: Some(writer),
            fill_idx: 0,
            current: None,
            epoch: Instant::now(),
            events_recorded: 0,
            entries_merged: 0,
            congestion_waits: 0,
            outcome: None,
        })
    }

    pub fn config(&self) -> &CollectorConfig {
        &self.cfg
    }

    /// Records one execution of the guest range `[start, end)`.
    ///
    /// May block when the buffer fills up and the writer has not yet freed
    /// the next slot.
    pub fn record_tb_exec(&mut self, start: u64, end: u64, duration_ns: u32) -> Result<(), CollectorError> {
        if self.outcome.is_some() {
            return Err(CollectorError::Closed);
        }
        if start >= end {
            return Err(CollectorError::InvalidRange { start, end });
        }
        if self.shared.failed.load(Ordering::Relaxed) {
            return Err(self.writer_error());
        }
        let duration_ns = if self.cfg.timing_enabled { duration_ns } else { 0 };

        match self.current.as_mut() {
            Some(current) => {
                if self.cfg.merge_enabled {
                    // `current` is never empty while it is Some.
                    let last = current.last_mut().expect("filling buffer holds at least one entry");
                    if let Some(merged) = try_merge(last, start, end, duration_ns) {
                        *last = merged;
                        self.events_recorded += 1;
                        self.entries_merged += 1;
                        return Ok(());
                    }
                }
            }
            None => self.begin_filling(),
        }

        let current = self.current.as_mut().expect("slot acquired");
        current.push(ExecEntry { duration_ns, start, end });
        self.events_recorded += 1;
        if current.len() == self.cfg.capacity {
            self.rotate()?;
        }
        Ok(())
    }

    /// Empty -> Filling on the reserved slot.
    fn begin_filling(&mut self) {
        let start_time_ns = self.epoch.elapsed().as_nanos() as u64;
        let mut ring = lock(&self.shared.ring);
        self.shared.transition(&mut ring, self.fill_idx, SlotState::Filling);
        let slot = &mut ring.slots[self.fill_idx];
        slot.start_time_ns = start_time_ns;
        self.current = Some(mem::take(&mut slot.entries));
    }

    /// Filling -> Full, then reserve the next slot, waiting until it is Empty.
    fn rotate(&mut self) -> Result<(), CollectorError> {
        let entries = self.current.take().expect("rotating a filling slot");
        let n = self.cfg.n_buffers;
        let mut ring = lock(&self.shared.ring);
        ring.slots[self.fill_idx].entries = entries;
        self.shared.transition(&mut ring, self.fill_idx, SlotState::Full);
        self.shared.slot_filled.notify_one();

        self.fill_idx = (self.fill_idx + 1) % n;
        if ring.slots[self.fill_idx].state != SlotState::Empty {
            self.congestion_waits += 1;
            while ring.slots[self.fill_idx].state != SlotState::Empty {
                if let Some(e) = &ring.writer_error {
                    return Err(CollectorError::Sink(Arc::clone(e)));
                }
                ring = wait(&self.shared.slot_emptied, ring);
            }
        }
        Ok(())
    }

    fn writer_error(&self) -> CollectorError {
        match &lock(&self.shared.ring).writer_error {
            Some(e) => CollectorError::Sink(Arc::clone(e)),
            None => CollectorError::Closed,
        }
    }

    pub fn stats(&self) -> CollectorStats {
        CollectorStats {
            events_recorded: self.events_recorded,
            entries_merged: self.entries_merged,
            frames_written: self.shared.frames_written.load(Ordering::Acquire),
            congestion_waits: self.congestion_waits,
            bytes_written: self.shared.bytes_written.load(Ordering::Acquire),
        }
    }

    pub fn slot_states(&self) -> Vec<SlotState> {
        lock(&self.shared.ring).slots.iter().map(|s| s.state).collect()
    }

    pub fn is_closed(&self) -> bool {
        self.outcome.is_some()
    }

    /// Writes the partially filled buffer as a final frame, drains the
    /// writer and joins it. Later calls return the same result.
    pub fn flush_on_exit(&mut self) -> Result<CollectorStats, FlushError> {
        if let Some(outcome) = &self.outcome {
            return outcome.clone();
        }
        {
            let mut ring = lock(&self.shared.ring);
            if let Some(entries) = self.current.take() {
                ring.slots[self.fill_idx].entries = entries;
                self.shared.transition(&mut ring, self.fill_idx, SlotState::Full);
            }
            ring.end_of_stream = true;
        }
        self.shared.slot_filled.notify_one();

        let joined = match self.writer.take() {
            Some(handle) => {
                handle.join().unwrap_or_else(|_| Err(Arc::new(io::Error::other("elog writer thread panicked"))))
            }
            None => Ok(()),
        };
        let stats = self.stats();
        let outcome = joined.map(|()| stats).map_err(|source| FlushError { source, stats });
        self.outcome = Some(outcome.clone());
        outcome
    }
}

impl Drop for Collector {
    fn drop(&mut self) {
        if self.outcome.is_none() {
            let _ = self.flush_on_exit();
        }
    }
}

fn writer_loop(shared: &Shared, mut sink: impl FrameSink, unit_id: u16) -> Result<(), Arc<io::Error>> {
    let n = lock(&shared.ring).slots.len();
    let mut idx = 0;
    let mut frame = Vec::new();
    loop {
        let (entries, start_time_ns) = {
            let mut ring = lock(&shared.ring);
            while ring.slots[idx].state != SlotState::Full {
                if ring.end_of_stream {
                    drop(ring);
                    return sink.finish().map_err(Arc::new);
                }
                ring = wait(&shared.slot_filled, ring);
            }
            shared.transition(&mut ring, idx, SlotState::Flushing);
            let slot = &mut ring.slots[idx];
            (mem::take(&mut slot.entries), slot.start_time_ns)
        };

        frame.clear();
        let written = encode_exec_frame_into(&mut frame, unit_id, start_time_ns, &entries)
            .map_err(io::Error::other)
            .and_then(|()| sink.write_frame(&frame));

        let mut entries = entries;
        entries.clear();
        let mut ring = lock(&shared.ring);
        ring.slots[idx].entries = entries;
        shared.transition(&mut ring, idx, SlotState::Empty);
        match written {
            Ok(()) => {
                shared.bytes_written.fetch_add(frame.len() as u64, Ordering::AcqRel);
                shared.frames_written.fetch_add(1, Ordering::AcqRel);
            }
            Err(e) => {
                let e = Arc::new(e);
                ring.writer_error = Some(Arc::clone(&e));
                shared.failed.store(true, Ordering::Release);
                drop(ring);
                shared.slot_emptied.notify_one();
                return Err(e);
            }
        }
        drop(ring);
        shared.slot_emptied.notify_one();
        idx = (idx + 1) % n;
    }
}
