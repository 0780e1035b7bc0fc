use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::LineMap;
use crate::elog::{Block, ExecEntry};

/// Executed bytes not covered by any line-map record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ResidualRange {
    pub start: u64,
    pub end: u64,
    pub count: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CoverageCounts {
    /// file -> line -> execution count; every line of the map is present.
    pub lines: BTreeMap<String, BTreeMap<u32, u64>>,
    /// Execution count of each line-map record, in map order.
    pub instructions: Vec<u64>,
    /// Maximal runs of unmapped executed bytes with equal counts, by address.
    pub residual: Vec<ResidualRange>,
}

impl CoverageCounts {
    pub fn lines_total(&self) -> usize {
        self.lines.values().map(BTreeMap::len).sum()
    }

    pub fn lines_hit(&self) -> usize {
        self.lines.values().flat_map(|l| l.values()).filter(|&&c| c > 0).count()
    }

    pub fn residual_bytes(&self) -> u64 {
        self.residual.iter().map(|r| r.end - r.start).sum()
    }
}

/// Folds exec entries into coverage counts.
///
/// A record counts one execution for every entry `[s, e)` with
/// `s <= record.addr < e`, so a merged entry contributes exactly what its
/// constituents would. A line takes the count of its first instruction.
pub struct Accumulator<'a> {
    map: &'a LineMap,
    ranges: HashMap<(u64, u64), u64>,
}

impl<'a> Accumulator<'a> {
    pub fn new(map: &'a LineMap) -> Self {
        Accumulator { map, ranges: HashMap::new() }
    }

    pub fn add_range(&mut self, start: u64, end: u64) {
        if start < end {
            *self.ranges.entry((start, end)).or_insert(0) += 1;
        }
    }

    pub fn add_entry(&mut self, entry: &ExecEntry) {
        self.add_range(entry.start, entry.end);
    }

    /// Adds the entries of an exec frame; other blocks are ignored.
    pub fn add_block(&mut self, block: &Block) {
        if let Block::Exec(frame) = block {
            for e in &frame.entries {
                self.add_entry(e);
            }
        }
    }

    pub fn finish(self) -> CoverageCounts {
        let records = self.map.records();
        let mut instructions = vec![0u64; records.len()];
        // +count at gap start, -count at gap end
        let mut gaps: BTreeMap<u64, i128> = BTreeMap::new();

        for (&(start, end), &count) in &self.ranges {
            let first = self.map.first_at_or_after(start);
            let mut cursor = start;
            if first > 0 {
                let prev = &records[first - 1];
                if prev.end() > start {
                    cursor = prev.end().min(end);
                }
            }
            for (i, r) in records[first..].iter().enumerate().take_while(|(_, r)| r.addr < end) {
                instructions[first + i] += count;
                if r.addr > cursor {
                    *gaps.entry(cursor).or_insert(0) += i128::from(count);
                    *gaps.entry(r.addr).or_insert(0) -= i128::from(count);
                }
                cursor = cursor.max(r.end().min(end));
            }
            if cursor < end {
                *gaps.entry(cursor).or_insert(0) += i128::from(count);
                *gaps.entry(end).or_insert(0) -= i128::from(count);
            }
        }

        let mut residual: Vec<ResidualRange> = Vec::new();
        let mut level: i128 = 0;
        let mut prev_addr = 0u64;
        for (&addr, &delta) in &gaps {
            if level > 0 && addr > prev_addr {
                let count = level as u64;
                match residual.last_mut() {
                    Some(last) if last.end == prev_addr && last.count == count => last.end = addr,
                    _ => residual.push(ResidualRange { start: prev_addr, end: addr, count }),
                }
            }
            level += delta;
            prev_addr = addr;
        }

        let mut lines: BTreeMap<String, BTreeMap<u32, u64>> = BTreeMap::new();
        for (r, &count) in records.iter().zip(&instructions) {
            lines.entry(r.file.to_string()).or_default().entry(r.line).or_insert(count);
        }
        CoverageCounts { lines, instructions, residual }
    }
}

pub fn accumulate<'b, I>(blocks: I, map: &LineMap) -> CoverageCounts
where
    I: IntoIterator<Item = &'b Block>,
{
    let mut acc = Accumulator::new(map);
    for b in blocks {
        acc.add_block(b);
    }
    acc.finish()
}
