//! Experiment driver: synthetic streams, collector replay with injected
//! writer latency, parameter sweeps, a reference pipeline model and a mock
//! QEMU host for the plugin.

pub mod mockhost;
pub mod oracle;
pub mod refsim;
pub mod replay;
pub mod stream;

use std::io;

use thiserror::Error;

use elogcov_core::collector::{CollectorError, FlushError};
use elogcov_core::elog::ElogError;

pub use mockhost::{mock_host_run, MockCall, MockHost, MockRun};
pub use replay::{replay, replay_capture, sweep, write_csv, ExperimentResult, ReplayOptions, SweepGrid, CSV_HEADER};
pub use stream::{gen_stream, StreamSpec, TbEvent};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("bad mock-host script: {0}")]
    Script(String),
    #[error("plugin install returned {0}")]
    Install(i32),
    #[error(transparent)]
    Collector(#[from] CollectorError),
    #[error(transparent)]
    Flush(#[from] FlushError),
    #[error(transparent)]
    Elog(#[from] ElogError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
