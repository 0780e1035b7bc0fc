//! Reference per-address execution counts.
//!
//! Counts are reported as maximal `(start, end, count)` segments with
//! `count > 0`, which makes them comparable no matter how the ranges were
//! split or merged on the way.

use std::collections::BTreeMap;

use elogcov_core::elog::Block;

use crate::stream::TbEvent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Segment {
    pub start: u64,
    pub end: u64,
    pub count: u64,
}

/// Sweep over `[start, end)` ranges producing canonical segments.
pub fn segments<I: IntoIterator<Item = (u64, u64)>>(ranges: I) -> Vec<Segment> {
    let mut deltas: BTreeMap<u64, i64> = BTreeMap::new();
    for (s, e) in ranges {
        if s < e {
            *deltas.entry(s).or_insert(0) += 1;
            *deltas.entry(e).or_insert(0) -= 1;
        }
    }
    let mut out: Vec<Segment> = Vec::new();
    let mut level = 0i64;
    let mut prev = 0u64;
    for (&addr, &delta) in &deltas {
        if level > 0 && addr > prev {
            let count = level as u64;
            match out.last_mut() {
                Some(last) if last.end == prev && last.count == count => last.end = addr,
                _ => out.push(Segment { start: prev, end: addr, count }),
            }
        }
        level += delta;
        prev = addr;
    }
    out
}

pub fn counts_from_events(events: &[TbEvent]) -> Vec<Segment> {
    segments(events.iter().map(|e| (e.start, e.end)))
}

pub fn counts_from_blocks<'a, I: IntoIterator<Item = &'a Block>>(blocks: I) -> Vec<Segment> {
    segments(blocks.into_iter().flat_map(|b| match b {
        Block::Exec(f) => f.entries.iter().map(|e| (e.start, e.end)).collect::<Vec<_>>(),
        _ => Vec::new(),
    }))
}
