//! Driving real collectors with recorded or synthetic streams.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::Serialize;

use elogcov_core::collector::{Collector, CollectorConfig, CollectorOptions, CollectorStats};
use elogcov_core::elog::ConfigPreamble;
use elogcov_core::sink::{LatencySink, MemoryBuffer, SharedElog};

use crate::stream::{gen_stream, StreamSpec, TbEvent};
use crate::HarnessError;

pub const CSV_HEADER: &str =
    "n_buffers,capacity,merge,latency_ns,events,merged,frames,congestion_waits,file_bytes,wall_ns";

/// Architecture name written into the preamble of synthetic runs.
pub const SYNTHETIC_TARGET: &str = "synthetic";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Delay injected before every frame write.
    pub writer_latency: Duration,
    /// Minimum time each event occupies the producer, standing in for guest
    /// execution between two block executions.
    pub event_cost: Duration,
    /// Output file; `None` keeps the elog in memory.
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExperimentResult {
    pub n_buffers: usize,
    pub capacity: usize,
    pub merge: bool,
    pub latency_ns: u64,
    /// Sum over all units.
    pub stats: CollectorStats,
    pub units: Vec<(u16, CollectorStats)>,
    pub file_bytes: u64,
    pub wall_time_ns: u64,
}

impl ExperimentResult {
    pub fn to_csv_row(&self) -> String {
        let s = &self.stats;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.n_buffers,
            self.capacity,
            if self.merge { "on" } else { "off" },
            self.latency_ns,
            s.events_recorded,
            s.entries_merged,
            s.frames_written,
            s.congestion_waits,
            self.file_bytes,
            self.wall_time_ns
        )
    }
}

pub fn write_csv<W: Write>(results: &[ExperimentResult], mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in results {
        writeln!(out, "{}", r.to_csv_row())?;
    }
    out.flush()
}

/// Busy-waits until `cost` has passed, yielding so the writer threads can
/// run even on a single core.
fn pace(since: Instant, cost: Duration) {
    while since.elapsed() < cost {
        std::thread::yield_now();
    }
}

fn drive<W: Write + Send + 'static>(
    events: &[TbEvent],
    cfg: &CollectorConfig,
    opts: &ReplayOptions,
    preamble: &ConfigPreamble,
    output: &SharedElog<W>,
) -> Result<Vec<(u16, CollectorStats)>, HarnessError> {
    let units: BTreeSet<u16> = events.iter().map(|e| e.unit).collect();
    let mut collectors: Vec<Option<Collector>> = vec![];
    for &unit in &units {
        let sink = LatencySink::new(output.handle(), opts.writer_latency);
        let c = Collector::with_options(
            CollectorConfig { unit_id: unit, ..*cfg },
            sink,
            CollectorOptions { preamble: Some(*preamble), observer: None },
        )?;
        let idx = usize::from(unit);
        if collectors.len() <= idx {
            collectors.resize_with(idx + 1, || None);
        }
        collectors[idx] = Some(c);
    }

    let paced = !opts.event_cost.is_zero();
    for e in events {
        let t = paced.then(Instant::now);
        let c = collectors[usize::from(e.unit)].as_mut().expect("collector for every unit");
        c.record_tb_exec(e.start, e.end, e.duration_ns)?;
        if let Some(t) = t {
            pace(t, opts.event_cost);
        }
    }

    let mut out = Vec::with_capacity(units.len());
    for (unit, c) in collectors.iter_mut().enumerate() {
        if let Some(c) = c {
            out.push((unit as u16, c.flush_on_exit()?));
        }
    }
    Ok(out)
}

fn finish(
    cfg: &CollectorConfig,
    opts: &ReplayOptions,
    units: Vec<(u16, CollectorStats)>,
    file_bytes: u64,
    wall: Duration,
) -> ExperimentResult {
    let mut stats = CollectorStats::default();
    for (_, s) in &units {
        stats.add(s);
    }
    ExperimentResult {
        n_buffers: cfg.n_buffers,
        capacity: cfg.capacity,
        merge: cfg.merge_enabled,
        latency_ns: opts.writer_latency.as_nanos() as u64,
        stats,
        units,
        file_bytes,
        wall_time_ns: wall.as_nanos() as u64,
    }
}

/// Replays `events` through one collector per unit into a single elog and
/// measures the whole produce, drain and join cycle.
///
/// `cfg.unit_id` is ignored; each collector takes the unit of its events.
pub fn replay(
    events: &[TbEvent],
    cfg: &CollectorConfig,
    opts: &ReplayOptions,
) -> Result<ExperimentResult, HarnessError> {
    match &opts.output {
        Some(path) => {
            cfg.validate()?;
            let preamble = ConfigPreamble::for_target(SYNTHETIC_TARGET, cfg.info_flags());
            let t0 = Instant::now();
            let output = SharedElog::new(BufWriter::with_capacity(1 << 16, File::create(path)?), &preamble)?;
            let units = drive(events, cfg, opts, &preamble, &output);
            let closed = output.close();
            let wall = t0.elapsed();
            let units = units?;
            closed?;
            let file_bytes = std::fs::metadata(path)?.len();
            Ok(finish(cfg, opts, units, file_bytes, wall))
        }
        None => replay_capture(events, cfg, opts).map(|(r, _)| r),
    }
}

/// Like [`replay`] but always in memory, returning the elog bytes too.
pub fn replay_capture(
    events: &[TbEvent],
    cfg: &CollectorConfig,
    opts: &ReplayOptions,
) -> Result<(ExperimentResult, Vec<u8>), HarnessError> {
    cfg.validate()?;
    let preamble = ConfigPreamble::for_target(SYNTHETIC_TARGET, cfg.info_flags());
    let buf = MemoryBuffer::new();
    let t0 = Instant::now();
    let output = SharedElog::new(buf.clone(), &preamble)?;
    let units = drive(events, cfg, opts, &preamble, &output)?;
    output.close()?;
    let wall = t0.elapsed();
    let bytes = buf.bytes();
    Ok((finish(cfg, opts, units, bytes.len() as u64, wall), bytes))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepGrid {
    pub n_buffers: Vec<usize>,
    pub capacities: Vec<usize>,
    pub merge: Vec<bool>,
    pub latencies_ns: Vec<u64>,
}

impl SweepGrid {
    pub fn cells(&self) -> usize {
        self.n_buffers.len() * self.capacities.len() * self.merge.len() * self.latencies_ns.len()
    }
}

/// Replays one stream generated from `spec` for every cell of `grid`, in
/// grid order (buffers, capacity, merge, latency).
pub fn sweep(grid: &SweepGrid, spec: &StreamSpec, event_cost: Duration) -> Result<Vec<ExperimentResult>, HarnessError> {
    if grid.cells() == 0 {
        return Err(HarnessError::InvalidParam("sweep grid has an empty axis".into()));
    }
    let events = gen_stream(spec)?;
    let mut results = Vec::with_capacity(grid.cells());
    for &n_buffers in &grid.n_buffers {
        for &capacity in &grid.capacities {
            for &merge_enabled in &grid.merge {
                for &latency in &grid.latencies_ns {
                    let cfg = CollectorConfig { n_buffers, capacity, merge_enabled, timing_enabled: true, unit_id: 0 };
                    let opts =
                        ReplayOptions { writer_latency: Duration::from_nanos(latency), event_cost, output: None };
                    results.push(replay(&events, &cfg, &opts)?);
                }
            }
        }
    }
    Ok(results)
}
