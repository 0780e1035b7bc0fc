use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::ReportError;

/// One instruction: `size` bytes at `addr`, attributed to `file:line`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineRecord {
    pub addr: u64,
    pub size: u64,
    pub file: Arc<str>,
    pub line: u32,
}

impl LineRecord {
    pub fn end(&self) -> u64 {
        self.addr.saturating_add(self.size)
    }
}

/// Sorted, non-overlapping instruction records.
///
/// Text form, one record per line, `#` starts a comment:
///
/// ```text
/// 0x40000000 4 src/main.c 10
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LineMap {
    records: Vec<LineRecord>,
}

fn parse_u64(text: &str) -> Option<u64> {
    match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => text.parse().ok(),
    }
}

impl LineMap {
    /// Builds a map from records already in address order.
    pub fn new(records: Vec<LineRecord>) -> Result<Self, ReportError> {
        for (i, r) in records.iter().enumerate() {
            let prev = if i == 0 { None } else { records.get(i - 1) };
            Self::check(prev, r).map_err(|reason| ReportError::MalformedLineMap { line: i + 1, reason })?;
        }
        Ok(LineMap { records })
    }

    fn check(prev: Option<&LineRecord>, r: &LineRecord) -> Result<(), String> {
        if r.size == 0 {
            return Err("record size must be at least 1".into());
        }
        if r.line == 0 {
            return Err("line numbers start at 1".into());
        }
        if r.addr.checked_add(r.size).is_none() {
            return Err(format!("record at {:#x} wraps the address space", r.addr));
        }
        if let Some(p) = prev {
            if r.addr <= p.addr {
                return Err(format!("address {:#x} is not above the previous record {:#x}", r.addr, p.addr));
            }
            if r.addr < p.end() {
                return Err(format!("record at {:#x} overlaps [{:#x}, {:#x})", r.addr, p.addr, p.end()));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ReportError> {
        let mut records: Vec<LineRecord> = Vec::new();
        let mut files: HashSet<Arc<str>> = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let malformed = |reason: String| ReportError::MalformedLineMap { line: line_no, reason };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (addr, rest) =
                content.split_once(char::is_whitespace).ok_or_else(|| malformed("expected 4 fields".into()))?;
            let (size, rest) = rest
                .trim_start()
                .split_once(char::is_whitespace)
                .ok_or_else(|| malformed("expected 4 fields".into()))?;
            let (path, line) =
                rest.trim().rsplit_once(char::is_whitespace).ok_or_else(|| malformed("expected 4 fields".into()))?;
            let addr = parse_u64(addr).ok_or_else(|| malformed(format!("bad address {addr:?}")))?;
            let size = parse_u64(size).ok_or_else(|| malformed(format!("bad size {size:?}")))?;
            let line: u32 = line.parse().map_err(|_| malformed(format!("bad line number {line:?}")))?;
            let path = path.trim();
            let file = match files.get(path) {
                Some(f) => Arc::clone(f),
                None => {
                    let f: Arc<str> = Arc::from(path);
                    files.insert(Arc::clone(&f));
                    f
                }
            };
            let record = LineRecord { addr, size, file, line };
            Self::check(records.last(), &record).map_err(malformed)?;
            records.push(record);
        }
        Ok(LineMap { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{:#x} {} {} {}", r.addr, r.size, r.file, r.line);
        }
        out
    }

    pub fn records(&self) -> &[LineRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index of the first record with `addr >= start`.
    pub fn first_at_or_after(&self, start: u64) -> usize {
        self.records.partition_point(|r| r.addr < start)
    }

    /// Record whose byte range contains `addr`.
    pub fn lookup(&self, addr: u64) -> Option<&LineRecord> {
        let i = self.records.partition_point(|r| r.addr <= addr);
        self.records[..i].last().filter(|r| addr < r.end())
    }

    /// Records whose start address lies in `[start, end)`.
    pub fn starting_in(&self, start: u64, end: u64) -> &[LineRecord] {
        let lo = self.first_at_or_after(start);
        let hi = self.first_at_or_after(end).max(lo);
        &self.records[lo..hi]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_records_and_comments() {
        let map = LineMap::parse("# header\n0x1000 4 main.c 10\n\n0x1008 4 main.c 11 # trailing\n").unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map.records()[1].addr, 0x1008);
        assert_eq!(&*map.records()[1].file, "main.c");
        assert_eq!(map.records()[1].line, 11);
    }

    #[test]
    fn paths_may_contain_spaces() {
        let map = LineMap::parse("0x10 2 my dir/a b.c 3\n").unwrap();
        assert_eq!(&*map.records()[0].file, "my dir/a b.c");
    }

    #[test]
    fn rejects_overlap_and_disorder() {
        let err = LineMap::parse("0x1000 8 a.c 1\n0x1004 4 a.c 2\n").unwrap_err();
        assert!(matches!(err, ReportError::MalformedLineMap { line: 2, .. }));
        let err = LineMap::parse("0x1000 4 a.c 1\n# c\n0x0ff0 4 a.c 2\n").unwrap_err();
        assert!(matches!(err, ReportError::MalformedLineMap { line: 3, .. }));
        for bad in ["0x1000 0 a.c 1", "0x1000 4 a.c 0", "zz 4 a.c 1", "0x1000 4", "0x1000 4 a.c x"] {
            assert!(LineMap::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn lookup_and_ranges() {
        let map = LineMap::parse("0x1000 4 a.c 1\n0x1004 4 a.c 2\n0x1010 2 b.c 7\n").unwrap();
        assert_eq!(map.lookup(0x1006).unwrap().line, 2);
        assert!(map.lookup(0x100c).is_none());
        assert!(map.lookup(0x0fff).is_none());
        assert_eq!(map.starting_in(0x1002, 0x1011).len(), 2);
        assert_eq!(map.starting_in(0x2000, 0x1000).len(), 0);
    }

    #[test]
    fn large_generated_map_roundtrips() {
        let records: Vec<LineRecord> = (0..100_000u64)
            .map(|i| LineRecord {
                addr: 0x4000_0000 + 4 * i,
                size: 4,
                file: Arc::from(format!("f{}.c", i / 1000)),
                line: (i % 1000 + 1) as u32,
            })
            .collect();
        let map = LineMap::new(records).unwrap();
        let parsed = LineMap::parse(&map.to_text()).unwrap();
        assert_eq!(parsed, map);
        assert_eq!(parsed.lookup(0x4000_0000 + 4 * 54_321 + 3).unwrap().line, 322);
    }
}
