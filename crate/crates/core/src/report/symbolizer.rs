//! Line maps from an external addr2line-compatible symbolizer.
//!
//! The symbolizer reads hex addresses on stdin, one per line, and answers
//! each with `file:line` on stdout (`??:0` or `??:?` when unknown).

use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::thread;

use super::{LineMap, LineRecord, ReportError};
use crate::elog::Block;

#[derive(Debug)]
pub struct Symbolized {
    pub map: LineMap,
    /// Addresses the symbolizer could not attribute to a source line.
    pub skipped: usize,
}

/// Union of all executed ranges in `blocks`, sorted and coalesced.
pub fn observed_ranges<'b>(blocks: impl IntoIterator<Item = &'b Block>) -> Vec<(u64, u64)> {
    let mut ranges: Vec<(u64, u64)> = blocks
        .into_iter()
        .filter_map(|b| match b {
            Block::Exec(f) => Some(f.entries.iter().filter(|e| e.start < e.end).map(|e| (e.start, e.end))),
            _ => None,
        })
        .flatten()
        .collect();
    ranges.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::with_capacity(ranges.len());
    for (s, e) in ranges {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

fn parse_answer(answer: &str) -> Option<(&str, u32)> {
    let (file, rest) = answer.trim().rsplit_once(':')?;
    let digits: &str = &rest[..rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len())];
    let line: u32 = digits.parse().ok()?;
    if file.is_empty() || file == "??" || line == 0 {
        return None;
    }
    Some((file, line))
}

/// Runs `command` over `addrs` (sorted, distinct, at least `insn_size`
/// apart) and turns each answer into a record of `insn_size` bytes.
pub fn symbolize(command: &[String], addrs: &[u64], insn_size: u64) -> Result<Symbolized, ReportError> {
    let (program, args) =
        command.split_first().ok_or_else(|| ReportError::Symbolizer("empty symbolizer command".into()))?;
    if insn_size == 0 {
        return Err(ReportError::Symbolizer("instruction size must be at least 1".into()));
    }
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| ReportError::Symbolizer(format!("cannot run {program:?}: {e}")))?;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let input: String = addrs.iter().map(|a| format!("{a:#x}\n")).collect();
    let feeder = thread::spawn(move || {
        // the child may exit early; its status tells us what happened
        let _ = stdin.write_all(input.as_bytes());
    });
    let output =
        child.wait_with_output().map_err(|e| ReportError::Symbolizer(format!("waiting for {program:?}: {e}")))?;
    let _ = feeder.join();

    if !output.status.success() {
        return Err(ReportError::Symbolizer(format!(
            "{program:?} exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let answers: Vec<&str> = stdout.lines().collect();
    if answers.len() < addrs.len() {
        return Err(ReportError::Symbolizer(format!(
            "{program:?} answered {} of {} addresses: {}",
            answers.len(),
            addrs.len(),
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }

    let mut records = Vec::with_capacity(addrs.len());
    let mut skipped = 0;
    let mut last_file: Option<Arc<str>> = None;
    for (&addr, answer) in addrs.iter().zip(answers) {
        match parse_answer(answer) {
            Some((file, line)) => {
                let file = match &last_file {
                    Some(f) if &**f == file => Arc::clone(f),
                    _ => {
                        let f: Arc<str> = Arc::from(file);
                        last_file = Some(Arc::clone(&f));
                        f
                    }
                };
                records.push(LineRecord { addr, size: insn_size, file, line });
            }
            None => skipped += 1,
        }
    }
    Ok(Symbolized { map: LineMap::new(records)?, skipped })
}

/// Symbolizes every `step`-aligned address inside `ranges` against `elf`.
/// `command` is the symbolizer invocation without the `-e <elf>` argument.
pub fn gen_line_map_via_symbolizer(
    elf: &Path,
    command: &[String],
    ranges: &[(u64, u64)],
    step: u64,
) -> Result<Symbolized, ReportError> {
    if step == 0 {
        return Err(ReportError::Symbolizer("address step must be at least 1".into()));
    }
    let mut addrs = Vec::new();
    for &(start, end) in ranges {
        let mut a = start - start % step;
        while a < end {
            addrs.push(a);
            a = match a.checked_add(step) {
                Some(next) => next,
                None => break,
            };
        }
    }
    addrs.sort_unstable();
    addrs.dedup();
    let mut cmd = command.to_vec();
    cmd.push("-e".into());
    cmd.push(elf.display().to_string());
    symbolize(&cmd, &addrs, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elog::{ExecEntry, ExecFrame};

    #[test]
    fn answers() {
        assert_eq!(parse_answer("/src/main.c:42\n"), Some(("/src/main.c", 42)));
        assert_eq!(parse_answer("main.c:7 (discriminator 3)"), Some(("main.c", 7)));
        assert_eq!(parse_answer("??:0"), None);
        assert_eq!(parse_answer("??:?"), None);
        assert_eq!(parse_answer("main.c:?"), None);
        assert_eq!(parse_answer("C:/x/y.c:3"), Some(("C:/x/y.c", 3)));
    }

    #[test]
    fn coalesces_observed_ranges() {
        let f = Block::Exec(ExecFrame {
            unit_id: 0,
            start_time_ns: 0,
            entries: vec![ExecEntry::new(0x20, 0x30, 0), ExecEntry::new(0x10, 0x20, 0), ExecEntry::new(0x40, 0x44, 0)],
        });
        assert_eq!(observed_ranges([&f]), vec![(0x10, 0x30), (0x40, 0x44)]);
    }

    #[test]
    fn missing_symbolizer() {
        let err = symbolize(&["/nonexistent/addr2line-xyz".to_string()], &[0x10], 4).unwrap_err();
        assert!(matches!(err, ReportError::Symbolizer(_)));
    }

    #[cfg(unix)]
    #[test]
    fn scripted_symbolizer() {
        let script = r#"while read a; do case "$a" in 0x1000) echo "main.c:10";; 0x1004) echo "??:0";; *) echo "util.c:3 (discriminator 1)";; esac; done"#;
        let cmd = vec!["sh".to_string(), "-c".to_string(), script.to_string()];
        let out = symbolize(&cmd, &[0x1000, 0x1004, 0x1008], 4).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.map.to_text(), "0x1000 4 main.c 10\n0x1008 4 util.c 3\n");
    }

    #[cfg(unix)]
    #[test]
    fn failing_symbolizer_reports_stderr() {
        let cmd = vec!["sh".to_string(), "-c".to_string(), "echo 'no such file' >&2; exit 3".to_string()];
        match symbolize(&cmd, &[0x10], 4) {
            Err(ReportError::Symbolizer(msg)) => assert!(msg.contains("no such file")),
            other => panic!("{other:?}"),
        }
    }
}
