//! Synthetic translation-block execution streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::HarnessError;

/// One executed block `[start, end)` on vCPU `unit`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct TbEvent {
    pub unit: u16,
    pub start: u64,
    pub end: u64,
    pub duration_ns: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamSpec {
    pub n_events: u64,
    /// Probability that an event starts where the previous event of the same
    /// unit ended.
    pub contiguity_prob: f64,
    /// Inclusive block size range in bytes.
    pub tb_size_range: (u64, u64),
    /// Half-open guest address range blocks are placed in.
    pub address_space: (u64, u64),
    pub seed: u64,
    pub n_units: u16,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            n_events: 100_000,
            contiguity_prob: 0.4208,
            tb_size_range: (4, 64),
            address_space: (0x4000_0000, 0x8000_0000),
            seed: 0x5eed,
            n_units: 1,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let (min, max) = self.tb_size_range;
        let (lo, hi) = self.address_space;
        if !(0.0..=1.0).contains(&self.contiguity_prob) {
            return Err(HarnessError::InvalidParam(format!("contiguity {} outside [0, 1]", self.contiguity_prob)));
        }
        if min == 0 || min > max {
            return Err(HarnessError::InvalidParam(format!("bad block size range [{min}, {max}]")));
        }
        if lo >= hi || hi - lo <= max {
            return Err(HarnessError::InvalidParam(format!(
                "address space [{lo:#x}, {hi:#x}) must be larger than the biggest block"
            )));
        }
        if self.n_units == 0 {
            return Err(HarnessError::InvalidParam("at least one unit is required".into()));
        }
        Ok(())
    }
}

/// Generates the stream described by `spec`; identical specs give identical
/// streams.
///
/// A contiguous successor that would run past the end of the address space
/// is placed randomly instead, so `contiguity_prob = 1` yields a single run
/// only when the space holds `n_events` maximal blocks.
pub fn gen_stream(spec: &StreamSpec) -> Result<Vec<TbEvent>, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (min, max) = spec.tb_size_range;
    let (lo, hi) = spec.address_space;
    let mut last_end: Vec<Option<u64>> = vec![None; usize::from(spec.n_units)];
    let mut events = Vec::with_capacity(spec.n_events as usize);

    for _ in 0..spec.n_events {
        let unit = if spec.n_units == 1 { 0 } else { rng.gen_range(0..spec.n_units) };
        let size = rng.gen_range(min..=max);
        let prev = last_end[usize::from(unit)];
        let contiguous = prev.is_some() && rng.gen_bool(spec.contiguity_prob);
        let start = match prev {
            Some(p) if contiguous && p.checked_add(size).is_some_and(|e| e <= hi) => p,
            _ => {
                let s = rng.gen_range(lo..=hi - size);
                match prev {
                    Some(p) if s == p => {
                        if p > lo {
                            p - 1
                        } else {
                            p + 1
                        }
                    }
                    _ => s,
                }
            }
        };
        let end = start + size;
        last_end[usize::from(unit)] = Some(end);
        events.push(TbEvent { unit, start, end, duration_ns: rng.gen_range(1..=1000) });
    }
    Ok(events)
}

/// Fraction of events (after each unit's first) that continue the previous
/// event of their unit.
pub fn contiguous_fraction(events: &[TbEvent]) -> f64 {
    let mut last_end: std::collections::HashMap<u16, u64> = std::collections::HashMap::new();
    let (mut eligible, mut contiguous) = (0u64, 0u64);
    for e in events {
        if let Some(&p) = last_end.get(&e.unit) {
            eligible += 1;
            contiguous += u64::from(p == e.start);
        }
        last_end.insert(e.unit, e.end);
    }
    if eligible == 0 {
        0.0
    } else {
        contiguous as f64 / eligible as f64
    }
}
