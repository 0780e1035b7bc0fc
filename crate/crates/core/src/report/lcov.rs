use std::fmt::Write as _;
use std::io::{self, Write};

use super::CoverageCounts;

/// Writes an lcov tracefile: one `SF`/`DA`*/`LF`/`LH`/`end_of_record` section
/// per file, files and lines in ascending order. Returns the bytes written.
pub fn emit_lcov<W: Write + ?Sized>(counts: &CoverageCounts, out: &mut W) -> io::Result<u64> {
    let mut text = String::new();
    for (file, lines) in &counts.lines {
        let _ = writeln!(text, "SF:{file}");
        for (line, count) in lines {
            let _ = writeln!(text, "DA:{line},{count}");
        }
        let hit = lines.values().filter(|&&c| c > 0).count();
        let _ = writeln!(text, "LF:{}", lines.len());
        let _ = writeln!(text, "LH:{hit}");
        text.push_str("end_of_record\n");
    }
    out.write_all(text.as_bytes())?;
    Ok(text.len() as u64)
}

/// `hit / total` as a percentage rounded half-up to one decimal.
/// No lines at all counts as fully covered.
pub fn format_percent(hit: usize, total: usize) -> String {
    if total == 0 {
        return "100.0%".to_string();
    }
    let (hit, total) = (hit as u128, total as u128);
    let tenths = (hit * 2000 + total) / (2 * total);
    format!("{}.{}%", tenths / 10, tenths % 10)
}

const RESIDUAL_LISTED: usize = 10;

/// Plain-text coverage table, one row per file and a total row, followed by
/// the unmapped executed ranges.
pub fn summarize(counts: &CoverageCounts) -> String {
    let width = counts.lines.keys().map(|f| f.chars().count()).chain([5]).max().unwrap_or(5);
    let mut out = String::new();
    for (file, lines) in &counts.lines {
        let hit = lines.values().filter(|&&c| c > 0).count();
        let _ = writeln!(out, "{file:<width$}  {hit}/{}, {}", lines.len(), format_percent(hit, lines.len()));
    }
    let (hit, total) = (counts.lines_hit(), counts.lines_total());
    let _ = writeln!(out, "{:<width$}  {hit}/{total}, {}", "Total", format_percent(hit, total));
    if !counts.residual.is_empty() {
        let _ = writeln!(out, "unmapped: {} ranges, {} bytes", counts.residual.len(), counts.residual_bytes());
        for r in counts.residual.iter().take(RESIDUAL_LISTED) {
            let _ = writeln!(out, "  [{:#x}, {:#x}) x{}", r.start, r.end, r.count);
        }
        if counts.residual.len() > RESIDUAL_LISTED {
            let _ = writeln!(out, "  ... {} more", counts.residual.len() - RESIDUAL_LISTED);
        }
    }
    out
}
