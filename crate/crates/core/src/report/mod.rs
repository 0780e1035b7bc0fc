//! Coverage reports from elog traces.
//!
//! An elog only holds executed address ranges. [`LineMap`] supplies the
//! address-to-source mapping (one record per instruction), [`accumulate`]
//! folds exec entries into per-line counts and [`emit_lcov`] writes the lcov
//! tracefile consumed by `genhtml`.

mod coverage;
mod lcov;
mod linemap;
mod symbolizer;

use std::io;

use thiserror::Error;

pub use coverage::{accumulate, Accumulator, CoverageCounts, ResidualRange};
pub use lcov::{emit_lcov, format_percent, summarize};
pub use linemap::{LineMap, LineRecord};
pub use symbolizer::{gen_line_map_via_symbolizer, observed_ranges, symbolize, Symbolized};

use crate::elog::ElogError;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("malformed line map at line {line}: {reason}")]
    MalformedLineMap { line: usize, reason: String },
    #[error("symbolizer failed: {0}")]
    Symbolizer(String),
    #[error(transparent)]
    Elog(#[from] ElogError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
