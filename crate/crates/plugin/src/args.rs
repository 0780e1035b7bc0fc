use std::path::PathBuf;

use thiserror::Error;

use elogcov_core::collector::{DEFAULT_BUFFERS, DEFAULT_CAPACITY};

pub const DEFAULT_OUTPUT: &str = "nqc2.elog";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArgsError {
    #[error("argument {0:?} is not of the form key=value")]
    NotKeyValue(String),
    #[error("unknown argument {0:?} (expected out, buffers, capacity, merge, timing)")]
    UnknownKey(String),
    #[error("{key}: {reason}")]
    BadValue { key: String, reason: String },
}

/// Plugin options, given by QEMU as `key=value` strings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PluginArgs {
    pub out: PathBuf,
    pub buffers: usize,
    pub capacity: usize,
    pub merge: bool,
    pub timing: bool,
}

impl Default for PluginArgs {
    fn default() -> Self {
        PluginArgs {
            out: PathBuf::from(DEFAULT_OUTPUT),
            buffers: DEFAULT_BUFFERS,
            capacity: DEFAULT_CAPACITY,
            merge: true,
            timing: false,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ArgsError> {
    match value {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => Err(ArgsError::BadValue { key: key.into(), reason: format!("expected on or off, got {value:?}") }),
    }
}

fn parse_count(key: &str, value: &str) -> Result<usize, ArgsError> {
    match value.parse::<usize>() {
        Ok(0) => Err(ArgsError::BadValue { key: key.into(), reason: "must be at least 1".into() }),
        Ok(n) => Ok(n),
        Err(e) => Err(ArgsError::BadValue { key: key.into(), reason: e.to_string() }),
    }
}

impl PluginArgs {
    pub fn parse<'a, I: IntoIterator<Item = &'a str>>(args: I) -> Result<Self, ArgsError> {
        let mut out = PluginArgs::default();
        for arg in args {
            let (key, value) = arg.split_once('=').ok_or_else(|| ArgsError::NotKeyValue(arg.into()))?;
            match key {
                "out" if value.is_empty() => {
                    return Err(ArgsError::BadValue { key: key.into(), reason: "empty path".into() })
                }
                "out" => out.out = PathBuf::from(value),
                "buffers" => out.buffers = parse_count(key, value)?,
                "capacity" => out.capacity = parse_count(key, value)?,
                "merge" => out.merge = parse_bool(key, value)?,
                "timing" => out.timing = parse_bool(key, value)?,
                _ => return Err(ArgsError::UnknownKey(key.into())),
            }
        }
        Ok(out)
    }

    /// Parses the comma-separated form used on the QEMU command line.
    pub fn parse_str(args: &str) -> Result<Self, ArgsError> {
        Self::parse(args.split(',').filter(|a| !a.is_empty()))
    }
}
