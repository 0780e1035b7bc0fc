//! Core of the elogcov toolchain.
//!
//! * [`elog`] encodes and decodes the binary execution log (a stream of
//!   `header + payload` blocks) and models its size.
//! * [`collector`] turns a stream of translation-block executions into exec
//!   frames using a ring of buffers drained by an asynchronous writer thread,
//!   optionally merging contiguous executions.
//! * [`sink`] holds the frame consumers the collector writes to.
//! * [`report`] maps recorded address ranges to source lines and emits lcov.

pub mod collector;
pub mod elog;
pub mod report;
pub mod sink;

pub use collector::{Collector, CollectorConfig, CollectorError, CollectorStats, FlushError};
pub use elog::{Block, BlockHeader, ConfigPreamble, ElogError, ExecEntry, ExecFrame};
