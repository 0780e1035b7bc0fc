//! The `elogcov` command line.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, missing input
//! files), 2 when the command itself fails.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tempfile::NamedTempFile;
use thiserror::Error;

use elogcov_core::collector::CollectorConfig;
use elogcov_core::elog::{
    iterate_blocks, predict_file_size, size_ratio, Block, ElogError, FLAG_MERGE, FLAG_TIMING, PREAMBLE_SIZE,
};
use elogcov_core::report::{
    accumulate, emit_lcov, gen_line_map_via_symbolizer, observed_ranges, summarize, LineMap, ReportError,
};
use elogcov_harness::{gen_stream, replay, sweep, write_csv, HarnessError, ReplayOptions, StreamSpec, SweepGrid};

pub const DEFAULT_SEED: u64 = 0x5eed;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Elog(#[from] ElogError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "elogcov", version, about = "Coverage from QEMU translation-block execution logs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the blocks of an elog file
    Inspect(InspectArgs),
    /// Turn an elog into an lcov tracefile
    Convert(ConvertArgs),
    /// Replay a synthetic stream through the collector
    Simulate(SimulateArgs),
    /// Replay one synthetic stream over a grid of collector configurations
    Sweep(SweepArgs),
    /// Predict the elog size of an unmerged run
    Predict(PredictArgs),
    /// Build a line map for the addresses executed in elog files
    GenLinemap(GenLinemapArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn enabled(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub elog: PathBuf,
    /// Print a JSON array instead of one line per block
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub elog: PathBuf,
    #[arg(long)]
    pub linemap: PathBuf,
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
    /// Print per-file line coverage
    #[arg(long)]
    pub summary: bool,
}

fn parse_u64(s: &str) -> Result<u64, String> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    }
    .map_err(|e| e.to_string())
}

fn parse_probability(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("{p} is not in [0, 1]"))
    }
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Number of block executions
    #[arg(long, default_value_t = 100_000)]
    pub events: u64,
    /// Probability that a block starts where the previous one ended
    #[arg(long, default_value = "0.4208", value_parser = parse_probability)]
    pub contig: f64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub tb_min: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    pub tb_max: u64,
    #[arg(long, default_value = "0x40000000", value_parser = parse_u64)]
    pub addr_lo: u64,
    #[arg(long, default_value = "0x80000000", value_parser = parse_u64)]
    pub addr_hi: u64,
    /// Number of vCPUs the stream is spread over
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub units: u16,
    #[arg(long, value_parser = parse_u64)]
    pub seed: Option<u64>,
    /// Minimum producer time per event, in nanoseconds
    #[arg(long, default_value_t = 0)]
    pub event_cost_ns: u64,
}

impl StreamArgs {
    fn spec(&self, err: &mut dyn Write) -> Result<StreamSpec, CliError> {
        let seed = match self.seed {
            Some(s) => s,
            None => {
                writeln!(err, "elogcov: using default seed {DEFAULT_SEED:#x}")?;
                DEFAULT_SEED
            }
        };
        let spec = StreamSpec {
            n_events: self.events,
            contiguity_prob: self.contig,
            tb_size_range: (self.tb_min, self.tb_max),
            address_space: (self.addr_lo, self.addr_hi),
            seed,
            n_units: self.units,
        };
        spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub stream: StreamArgs,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub buffers: u64,
    #[arg(long, default_value_t = 8192, value_parser = clap::value_parser!(u64).range(1..))]
    pub capacity: u64,
    #[arg(long, value_enum, default_value = "on")]
    pub merge: Switch,
    #[arg(long, value_enum, default_value = "off")]
    pub timing: Switch,
    /// Delay injected before every frame write, in nanoseconds
    #[arg(long, default_value_t = 0)]
    pub latency_ns: u64,
    /// Where to write the elog; kept in memory when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the result as a one-row CSV
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub stream: StreamArgs,
    #[arg(long, value_delimiter = ',', default_value = "4", value_parser = clap::value_parser!(u64).range(1..))]
    pub buffers: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "8192", value_parser = clap::value_parser!(u64).range(1..))]
    pub capacities: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "on")]
    pub merge: Vec<Switch>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub latencies_ns: Vec<u64>,
    /// CSV output; standard output when absent
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Number of recorded block executions
    #[arg(long)]
    pub tb: u64,
    /// Entries per buffer
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub capacity: u64,
}

#[derive(Debug, Args)]
pub struct GenLinemapArgs {
    /// Guest ELF with debug information
    #[arg(long)]
    pub elf: PathBuf,
    /// Elog files whose executed addresses are symbolized
    #[arg(long, required = true)]
    pub elog: Vec<PathBuf>,
    /// Symbolizer command; `-e <elf>` is appended
    #[arg(long, default_value = "addr2line")]
    pub symbolizer: String,
    /// Instruction size used to step through executed ranges
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub step: u64,
    #[arg(short = 'o', long = "out")]
    pub out: PathBuf,
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

/// Writes `path` through a temporary file in the same directory, so a
/// failure never leaves a partial file behind.
fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<(), CliError>) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct BlockSummary {
    offset: u64,
    #[serde(rename = "type")]
    kind: String,
    block_type: u16,
    unit: u16,
    len: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    entries: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    start_time_ns: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    duration_ns: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<String>,
}

fn flag_names(flags: u32) -> String {
    let names: Vec<&str> = [(FLAG_MERGE, "merge"), (FLAG_TIMING, "timing")]
        .iter()
        .filter(|(bit, _)| flags & bit != 0)
        .map(|(_, name)| *name)
        .collect();
    if names.is_empty() {
        "none".into()
    } else {
        names.join(",")
    }
}

fn block_summary(offset: u64, block: &Block) -> BlockSummary {
    let h = block.header();
    let mut s = BlockSummary {
        offset,
        kind: String::new(),
        block_type: h.block_type,
        unit: h.unit_id,
        len: h.payload_len,
        entries: None,
        start_time_ns: None,
        duration_ns: None,
        detail: None,
    };
    match block {
        Block::Info { info, .. } => {
            s.kind = "info".into();
            s.detail = Some(format!(
                "{:?} v{}.{} flags {}",
                info.tool_name.to_string_lossy(),
                info.version_major,
                info.version_minor,
                flag_names(info.flags)
            ));
        }
        Block::Arch { arch, .. } => {
            s.kind = "arch".into();
            s.detail = Some(format!(
                "{} (machine {}, {}-bit)",
                arch.arch_name.to_string_lossy(),
                arch.arch_id,
                arch.guest_word_bits
            ));
        }
        Block::Exec(f) => {
            s.kind = "exec".into();
            s.entries = Some(f.entries.len());
            s.start_time_ns = Some(f.start_time_ns);
            s.duration_ns = Some(f.total_duration_ns());
        }
        Block::Unknown { .. } => s.kind = "unknown".into(),
    }
    s
}

fn format_summary(s: &BlockSummary) -> String {
    let mut line = format!("{:>10}  {:<7} unit {:<3} len {:<8}", s.offset, s.kind, s.unit, s.len);
    if let (Some(n), Some(t), Some(d)) = (s.entries, s.start_time_ns, s.duration_ns) {
        line.push_str(&format!("  {n} entries  t {t}..{} ns", t.saturating_add(d)));
    }
    if let Some(detail) = &s.detail {
        line.push_str("  ");
        line.push_str(detail);
    }
    if s.kind == "unknown" {
        line.push_str(&format!("  type {}", s.block_type));
    }
    line.trim_end().to_string()
}

fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_file(&a.elog)?;
    let reader = BufReader::new(File::open(&a.elog)?);
    let mut listed = Vec::new();
    let mut failure = None;
    for item in iterate_blocks(reader) {
        match item {
            Ok((offset, block)) => {
                let s = block_summary(offset, &block);
                if !a.json {
                    writeln!(out, "{}", format_summary(&s))?;
                }
                listed.push(s);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if a.json {
        serde_json::to_writer_pretty(&mut *out, &listed).map_err(io::Error::from)?;
        writeln!(out)?;
    }
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn read_blocks(path: &Path) -> Result<Vec<Block>, CliError> {
    iterate_blocks(BufReader::new(File::open(path)?)).map(|r| r.map(|(_, b)| b).map_err(CliError::from)).collect()
}

fn cmd_convert(a: &ConvertArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_file(&a.elog)?;
    require_file(&a.linemap)?;
    let map = LineMap::load(&a.linemap)?;
    let blocks = read_blocks(&a.elog)?;
    let counts = accumulate(&blocks, &map);
    write_atomic(&a.out, |w| {
        emit_lcov(&counts, w)?;
        Ok(())
    })?;
    if a.summary {
        write!(out, "{}", summarize(&counts))?;
    }
    Ok(())
}

fn collector_config(buffers: u64, capacity: u64, merge: bool, timing: bool) -> Result<CollectorConfig, CliError> {
    let cfg = CollectorConfig {
        n_buffers: usize::try_from(buffers).map_err(|e| CliError::Usage(e.to_string()))?,
        capacity: usize::try_from(capacity).map_err(|e| CliError::Usage(e.to_string()))?,
        merge_enabled: merge,
        timing_enabled: timing,
        unit_id: 0,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let spec = a.stream.spec(err)?;
    let cfg = collector_config(a.buffers, a.capacity, a.merge.enabled(), a.timing.enabled())?;
    let events = gen_stream(&spec)?;
    let mut opts = ReplayOptions {
        writer_latency: Duration::from_nanos(a.latency_ns),
        event_cost: Duration::from_nanos(a.stream.event_cost_ns),
        output: None,
    };
    let result = match &a.out {
        Some(path) => {
            let dir = match path.parent() {
                Some(p) if !p.as_os_str().is_empty() => p,
                _ => Path::new("."),
            };
            let tmp = NamedTempFile::new_in(dir)?;
            opts.output = Some(tmp.path().to_path_buf());
            let result = replay(&events, &cfg, &opts)?;
            tmp.persist(path).map_err(|e| e.error)?;
            result
        }
        None => replay(&events, &cfg, &opts)?,
    };
    if let Some(path) = &a.stats {
        write_atomic(path, |w| Ok(write_csv(std::slice::from_ref(&result), w)?))?;
    }
    let s = &result.stats;
    writeln!(
        out,
        "events {} merged {} entries {} frames {} congestion_waits {} file_bytes {} wall_ns {}",
        s.events_recorded,
        s.entries_merged,
        s.entries_stored(),
        s.frames_written,
        s.congestion_waits,
        result.file_bytes,
        result.wall_time_ns
    )?;
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let spec = a.stream.spec(err)?;
    let to_usize = |v: &[u64]| -> Result<Vec<usize>, CliError> {
        v.iter().map(|&x| usize::try_from(x).map_err(|e| CliError::Usage(e.to_string()))).collect()
    };
    let grid = SweepGrid {
        n_buffers: to_usize(&a.buffers)?,
        capacities: to_usize(&a.capacities)?,
        merge: a.merge.iter().map(|m| m.enabled()).collect(),
        latencies_ns: a.latencies_ns.clone(),
    };
    for &capacity in &grid.capacities {
        collector_config(1, capacity as u64, true, false)?;
    }
    if grid.cells() == 0 {
        return Err(CliError::Usage("empty sweep grid".into()));
    }
    let rows = sweep(&grid, &spec, Duration::from_nanos(a.stream.event_cost_ns))?;
    match &a.stats {
        Some(path) => write_atomic(path, |w| Ok(write_csv(&rows, w)?)),
        None => Ok(write_csv(&rows, out)?),
    }
}

/// Predicted size of `n_tb` unmerged entries at `capacity`, and its ratio to
/// the same run at capacity 1, preamble excluded.
pub fn predict(n_tb: u64, capacity: u64) -> Result<(u64, f64), ElogError> {
    let bytes = predict_file_size(n_tb, capacity)?;
    let ratio = if n_tb == 0 {
        size_ratio(capacity)?
    } else {
        let base = predict_file_size(n_tb, 1)? - PREAMBLE_SIZE;
        (bytes - PREAMBLE_SIZE) as f64 / base as f64
    };
    Ok((bytes, ratio))
}

fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (bytes, ratio) = predict(a.tb, a.capacity)?;
    writeln!(out, "predicted_bytes {bytes}")?;
    writeln!(out, "ratio_vs_capacity_1 {ratio:.4} ({:.1}% reduction)", (1.0 - ratio) * 100.0)?;
    Ok(())
}

fn cmd_gen_linemap(a: &GenLinemapArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_file(&a.elf)?;
    for p in &a.elog {
        require_file(p)?;
    }
    let command: Vec<String> = a.symbolizer.split_whitespace().map(String::from).collect();
    if command.is_empty() {
        return Err(CliError::Usage("empty symbolizer command".into()));
    }
    let mut blocks = Vec::new();
    for p in &a.elog {
        blocks.extend(read_blocks(p)?);
    }
    let ranges = observed_ranges(&blocks);
    let sym = gen_line_map_via_symbolizer(&a.elf, &command, &ranges, a.step)?;
    write_atomic(&a.out, |w| Ok(w.write_all(sym.map.to_text().as_bytes())?))?;
    writeln!(out, "{} line records, {} addresses without source", sym.map.len(), sym.skipped)?;
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Inspect(a) => cmd_inspect(a, out),
        Command::Convert(a) => cmd_convert(a, out),
        Command::Simulate(a) => cmd_simulate(a, out, err),
        Command::Sweep(a) => cmd_sweep(a, out, err),
        Command::Predict(a) => cmd_predict(a, out),
        Command::GenLinemap(a) => cmd_gen_linemap(a, out),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut err = io::stderr();
    let code = match run(&cli, &mut out, &mut err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            let _ = writeln!(err, "elogcov: error: {e}");
            e.exit_code()
        }
    };
    let _ = out.flush();
    code
}
