//! Conflicting-offset stressor.
//!
//! Several threads hammer a handful of offsets with stores, loads and
//! invalidations. Each op is bracketed by ticks of a shared logical clock,
//! and afterwards every load is checked against the register semantics of
//! its offset: the value read must come from a write that started before
//! the load ended and that was not wholly overwritten before the load
//! began.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trace::page_from_seed;
use super::HarnessError;
use crate::donee::{DoneeEngine, DoneeError};
use crate::wire::Page;

#[derive(Debug, Clone)]
pub struct StressConfig {
    pub threads: usize,
    /// Offsets under contention: `first_offset..first_offset + offsets`.
    pub first_offset: u64,
    pub offsets: u64,
    pub ops_per_thread: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StressReport {
    pub stores: u64,
    pub loads: u64,
    pub empty_loads: u64,
    pub invalidations: u64,
}

/// Value a write leaves in a register; `None` is the empty register.
type Value = Option<u64>;

#[derive(Debug, Clone, Copy)]
struct Event {
    offset: u64,
    write: bool,
    value: Value,
    start: u64,
    end: u64,
}

/// Tags encode (thread, sequence) so every store writes a distinct value.
fn tag(thread: usize, seq: usize) -> u64 {
    ((thread as u64) << 32) | seq as u64 | (1 << 63)
}

fn page_for(offset: u64, tag: u64) -> Page {
    let mut p = page_from_seed(tag ^ offset.rotate_left(17));
    p[8..16].copy_from_slice(&tag.to_le_bytes());
    p[16..24].copy_from_slice(&offset.to_le_bytes());
    p
}

/// Recovers the tag of a page written by [`page_for`], rejecting torn or
/// foreign pages.
fn read_tag(offset: u64, page: &Page) -> Option<u64> {
    let t = u64::from_le_bytes(page[8..16].try_into().unwrap());
    (page_for(offset, t) == *page).then_some(t)
}

pub fn stress_conflicting(engine: &DoneeEngine, cfg: &StressConfig) -> Result<StressReport, HarnessError> {
    let clock = AtomicU64::new(1);
    let tick = || clock.fetch_add(1, Ordering::SeqCst);
    let offsets = cfg.offsets.max(1);
    let logs: Vec<Result<Vec<Event>, HarnessError>> = thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.threads)
            .map(|t| {
                let tick = &tick;
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let mut log = Vec::with_capacity(cfg.ops_per_thread);
                    for seq in 0..cfg.ops_per_thread {
                        let offset = cfg.first_offset + rng.random_range(0..offsets);
                        let roll: f64 = rng.random();
                        let ev = if roll < 0.5 {
                            let v = tag(t, seq);
                            let page = page_for(offset, v);
                            let start = tick();
                            engine.store(offset, &page[..])?;
                            Event {
                                offset,
                                write: true,
                                value: Some(v),
                                start,
                                end: tick(),
                            }
                        } else if roll < 0.85 {
                            let start = tick();
                            let res = engine.load(offset);
                            let end = tick();
                            let value = match res {
                                Ok(page) => Some(read_tag(offset, &page).ok_or_else(|| {
                                    HarnessError::Linearizability(format!("offset {offset} returned a foreign or torn page"))
                                })?),
                                Err(DoneeError::NotPresent(_)) => None,
                                Err(e) => return Err(e.into()),
                            };
                            Event {
                                offset,
                                write: false,
                                value,
                                start,
                                end,
                            }
                        } else {
                            let start = tick();
                            engine.invalidate_page(offset)?;
                            Event {
                                offset,
                                write: true,
                                value: None,
                                start,
                                end: tick(),
                            }
                        };
                        log.push(ev);
                    }
                    Ok(log)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("stress thread panicked")).collect()
    });
    let mut events = Vec::new();
    for l in logs {
        events.extend(l?);
    }
    check_registers(&events)?;
    let mut report = StressReport::default();
    for e in &events {
        match (e.write, e.value) {
            (true, Some(_)) => report.stores += 1,
            (true, None) => report.invalidations += 1,
            (false, v) => {
                report.loads += 1;
                report.empty_loads += v.is_none() as u64;
            }
        }
    }
    Ok(report)
}

/// Every register starts empty, as if written at time zero.
fn check_registers(events: &[Event]) -> Result<(), HarnessError> {
    let initial = |offset| Event {
        offset,
        write: true,
        value: None,
        start: 0,
        end: 0,
    };
    let mut by_offset: std::collections::BTreeMap<u64, Vec<Event>> = Default::default();
    for e in events {
        by_offset.entry(e.offset).or_default().push(*e);
    }
    for (offset, evs) in by_offset {
        let mut writes: Vec<Event> = evs.iter().filter(|e| e.write).copied().collect();
        writes.push(initial(offset));
        for read in evs.iter().filter(|e| !e.write) {
            let ok = writes.iter().filter(|w| w.value == read.value).any(|w| {
                w.start < read.end
                    && !writes.iter().any(|y| y.start > w.end && y.end < read.start)
            });
            if !ok {
                return Err(HarnessError::Linearizability(format!(
                    "offset {offset}: load during [{}, {}] returned {:?}, which no admissible write produced",
                    read.start, read.end, read.value
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(write: bool, value: Value, start: u64, end: u64) -> Event {
        Event {
            offset: 0,
            write,
            value,
            start,
            end,
        }
    }

    #[test]
    fn accepts_legal_histories() {
        // overlapping write may or may not be seen
        let h = [ev(true, Some(1), 1, 2), ev(true, Some(2), 3, 6), ev(false, Some(1), 4, 5)];
        check_registers(&h).unwrap();
        let h = [ev(true, Some(1), 1, 2), ev(true, Some(2), 3, 6), ev(false, Some(2), 4, 5)];
        check_registers(&h).unwrap();
        check_registers(&[ev(false, None, 1, 2)]).unwrap();
    }

    #[test]
    fn rejects_stale_and_invented_reads() {
        let stale = [ev(true, Some(1), 1, 2), ev(true, Some(2), 3, 4), ev(false, Some(1), 5, 6)];
        assert!(check_registers(&stale).is_err());
        let future = [ev(false, Some(1), 1, 2), ev(true, Some(1), 3, 4)];
        assert!(check_registers(&future).is_err());
        let lost = [ev(true, Some(1), 1, 2), ev(false, None, 3, 4)];
        assert!(check_registers(&lost).is_err());
        let resurrected = [ev(true, Some(1), 1, 2), ev(true, None, 3, 4), ev(false, Some(1), 5, 6)];
        assert!(check_registers(&resurrected).is_err());
    }

    #[test]
    fn tags_detect_torn_pages() {
        let mut p = page_for(5, tag(1, 2));
        assert_eq!(read_tag(5, &p), Some(tag(1, 2)));
        assert_eq!(read_tag(6, &p), None);
        p[4000] ^= 1;
        assert_eq!(read_tag(5, &p), None);
    }
}
