//! Single-threaded reference model of the collector pipeline.
//!
//! Events are processed on a virtual clock: each event advances the producer
//! by `event_cost_ns`, each frame occupies its unit's writer for
//! `write_latency_ns`. Buffering, merging and rotation follow the same rules
//! as the threaded collector, so entries, merges and frames match it exactly
//! and congestion waits match it whenever real timing agrees with the model
//! (always for a single buffer, where every rotation waits).

use elogcov_core::collector::{try_merge, CollectorConfig, CollectorStats};
use elogcov_core::elog::{exec_frame_size, ExecEntry};

use crate::stream::TbEvent;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimParams {
    pub event_cost_ns: u64,
    pub write_latency_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimOutcome {
    pub stats: CollectorStats,
    /// Entry counts of the frames of each unit, in write order.
    pub frame_sizes: Vec<(u16, Vec<usize>)>,
    /// Virtual time at which the last frame is written.
    pub finish_ns: u64,
}

struct UnitModel {
    current: Vec<ExecEntry>,
    fill_idx: usize,
    /// Virtual time at which each slot becomes Empty again.
    released_at: Vec<u64>,
    writer_free_at: u64,
    frames: Vec<usize>,
    stats: CollectorStats,
}

impl UnitModel {
    fn new(n_buffers: usize) -> Self {
        UnitModel {
            current: Vec::new(),
            fill_idx: 0,
            released_at: vec![0; n_buffers],
            writer_free_at: 0,
            frames: Vec::new(),
            stats: CollectorStats::default(),
        }
    }

    fn write_frame(&mut self, now: u64, p: &SimParams) -> u64 {
        let entries = self.current.len();
        let done = self.writer_free_at.max(now) + p.write_latency_ns;
        self.writer_free_at = done;
        self.frames.push(entries);
        self.stats.frames_written += 1;
        self.stats.bytes_written += exec_frame_size(entries) as u64;
        self.current.clear();
        done
    }
}

pub fn simulate(events: &[TbEvent], cfg: &CollectorConfig, p: &SimParams) -> SimOutcome {
    let mut units: Vec<Option<UnitModel>> = Vec::new();
    let mut now = 0u64;
    for e in events {
        let idx = usize::from(e.unit);
        if units.len() <= idx {
            units.resize_with(idx + 1, || None);
        }
        let u = units[idx].get_or_insert_with(|| UnitModel::new(cfg.n_buffers));
        now += p.event_cost_ns;
        let duration = if cfg.timing_enabled { e.duration_ns } else { 0 };
        u.stats.events_recorded += 1;

        if cfg.merge_enabled {
            if let Some(merged) = u.current.last().and_then(|last| try_merge(last, e.start, e.end, duration)) {
                *u.current.last_mut().expect("checked") = merged;
                u.stats.entries_merged += 1;
                continue;
            }
        }
        u.current.push(ExecEntry { duration_ns: duration, start: e.start, end: e.end });
        if u.current.len() == cfg.capacity {
            let filled = u.fill_idx;
            u.released_at[filled] = u.write_frame(now, p);
            u.fill_idx = (filled + 1) % cfg.n_buffers;
            let ready = u.released_at[u.fill_idx];
            if u.fill_idx == filled || ready > now {
                u.stats.congestion_waits += 1;
                now = now.max(ready);
            }
        }
    }

    let mut finish_ns = now;
    let mut stats = CollectorStats::default();
    let mut frame_sizes = Vec::new();
    for (idx, u) in units.iter_mut().enumerate() {
        let Some(u) = u else { continue };
        if !u.current.is_empty() {
            u.write_frame(now, p);
        }
        finish_ns = finish_ns.max(u.writer_free_at);
        stats.add(&u.stats);
        frame_sizes.push((idx as u16, std::mem::take(&mut u.frames)));
    }
    SimOutcome { stats, frame_sizes, finish_ns }
}
