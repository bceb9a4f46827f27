use std::collections::{BTreeMap, HashMap};
use std::thread;
use std::time::{Duration, Instant};

use super::trace::{page_from_seed, SwapTrace, TraceOp, TraceRecord};
use super::{BenchReport, Deployment, HarnessConfig, HarnessError, LatencyRecorder, OpCounts};
use crate::donee::{DoneeEngine, Placement};
use crate::wire::Tier;

/// One replay worker: a slice of the offset space plus its reference model.
#[derive(Default)]
struct Worker {
    reference: HashMap<u64, u64>,
    recorder: LatencyRecorder,
    tiers: BTreeMap<String, u64>,
    counts: OpCounts,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed())
}

impl Worker {
    fn apply(&mut self, engine: &DoneeEngine, index: usize, r: &TraceRecord) -> Result<(), HarnessError> {
        let fail = |detail: String, cause| HarnessError::Verification { index, detail, cause };
        self.counts.total += 1;
        match r.op {
            TraceOp::Store => {
                let page = page_from_seed(r.seed);
                let (res, d) = timed(|| engine.store(r.offset, &page[..]));
                let tier = res.map_err(|e| fail(format!("store of offset {} failed: {e}", r.offset), Some(e)))?;
                self.recorder.record("store", d);
                self.recorder.record(&format!("store.{tier}"), d);
                *self.tiers.entry(tier.to_string()).or_default() += 1;
                self.reference.insert(r.offset, r.seed);
                self.counts.store += 1;
            }
            TraceOp::Load => {
                let tier = engine.entry(r.offset).filter(|e| e.valid).map(|e| e.tier);
                let (res, d) = timed(|| engine.load(r.offset));
                let page = res.map_err(|e| fail(format!("load of offset {} failed: {e}", r.offset), Some(e)))?;
                let expected = self.reference.get(&r.offset).copied().ok_or_else(|| {
                    fail(format!("load of offset {} returned a page that was never stored", r.offset), None)
                })?;
                if page != page_from_seed(expected) {
                    return Err(fail(format!("load of offset {} returned the wrong bytes", r.offset), None));
                }
                self.recorder.record("load", d);
                if let Some(t) = tier {
                    self.recorder.record(&format!("load.{t}"), d);
                }
                self.counts.load += 1;
            }
            TraceOp::InvalidatePage => {
                let (res, d) = timed(|| engine.invalidate_page(r.offset));
                res.map_err(|e| fail(format!("invalidate of offset {} failed: {e}", r.offset), Some(e)))?;
                self.recorder.record("invalidate_page", d);
                self.reference.remove(&r.offset);
                self.counts.invalidate_page += 1;
            }
            TraceOp::InvalidateArea => {
                let (res, d) = timed(|| engine.invalidate_area());
                res.map_err(|e| fail(format!("invalidate_area failed: {e}"), Some(e)))?;
                self.recorder.record("invalidate_area", d);
                self.reference.clear();
                self.counts.invalidate_area += 1;
            }
        }
        Ok(())
    }
}

fn merge(workers: Vec<Worker>, elapsed: Duration) -> BenchReport {
    let n = workers.len();
    let mut counts = OpCounts::default();
    let mut recorder = LatencyRecorder::default();
    let mut tiers: BTreeMap<String, u64> = BTreeMap::new();
    for w in workers {
        counts.store += w.counts.store;
        counts.load += w.counts.load;
        counts.invalidate_page += w.counts.invalidate_page;
        counts.invalidate_area += w.counts.invalidate_area;
        counts.total += w.counts.total;
        recorder.merge(w.recorder);
        for (k, v) in w.tiers {
            *tiers.entry(k).or_default() += v;
        }
    }
    BenchReport::finish(counts, recorder, tiers, elapsed, n)
}

/// Replays `trace` in order, checking every load against what was stored.
/// The first divergence aborts the run.
pub fn replay(trace: &SwapTrace, engine: &DoneeEngine) -> Result<BenchReport, HarnessError> {
    let start = Instant::now();
    let mut w = Worker::default();
    for (i, r) in trace.records.iter().enumerate() {
        w.apply(engine, i, r)?;
    }
    Ok(merge(vec![w], start.elapsed()))
}

/// Replays with `workers` threads. Records are partitioned by
/// `offset % workers`, so per-offset order is kept; every invalidate_area
/// acts as a barrier between phases.
pub fn replay_parallel(trace: &SwapTrace, engine: &DoneeEngine, workers: usize) -> Result<BenchReport, HarnessError> {
    let workers = workers.max(1);
    if workers == 1 {
        return replay(trace, engine);
    }
    let start = Instant::now();
    let mut state: Vec<Worker> = (0..workers).map(|_| Worker::default()).collect();
    let mut area_worker = Worker::default();
    let records: Vec<(usize, &TraceRecord)> = trace.records.iter().enumerate().collect();
    for phase in records.split_inclusive(|(_, r)| r.op == TraceOp::InvalidateArea) {
        let (body, barrier) = match phase.last() {
            Some((_, r)) if r.op == TraceOp::InvalidateArea => (&phase[..phase.len() - 1], phase.last()),
            _ => (phase, None),
        };
        let mut parts: Vec<Vec<(usize, &TraceRecord)>> = vec![Vec::new(); workers];
        for &(i, r) in body {
            parts[(r.offset % workers as u64) as usize].push((i, r));
        }
        let results: Vec<(Worker, Result<(), HarnessError>)> = thread::scope(|s| {
            let handles: Vec<_> = std::mem::take(&mut state)
                .into_iter()
                .zip(parts)
                .map(|(mut w, part)| {
                    s.spawn(move || {
                        let res = part.iter().try_for_each(|&(i, r)| w.apply(engine, i, r));
                        (w, res)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("replay worker panicked")).collect()
        });
        let mut first_err = None;
        for (w, res) in results {
            state.push(w);
            if let (Err(e), None) = (res, &first_err) {
                first_err = Some(e);
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        if let Some(&(i, r)) = barrier {
            area_worker.apply(engine, i, r)?;
            state.iter_mut().for_each(|w| w.reference.clear());
        }
    }
    state.push(area_worker);
    let mut report = merge(state, start.elapsed());
    report.workers = workers;
    Ok(report)
}

/// Stores then loads `pages` distinct pages pinned to `tier`.
pub fn bench_latency(base: &HarnessConfig, tier: Tier, pages: u64) -> Result<BenchReport, HarnessError> {
    let mut cfg = base.clone();
    cfg.pressure = None;
    cfg.workers = 1;
    cfg.donee.swap_offsets = pages.max(1);
    cfg.donee.placement = Placement::Pin(tier);
    cfg.donee.local_pages = if tier == Tier::DoneeHbm { pages } else { 0 };
    cfg.donee.local_swap_pages = if tier == Tier::LocalSwap { pages } else { 0 };
    match tier {
        Tier::DonorHbm => {
            cfg.donor.hbm_pages = cfg.donor.hbm_pages.max(pages + pages.div_ceil(4096) + 1);
            cfg.donor.metadata_reserve_pages = None;
        }
        Tier::DonorDram => cfg.donor.dram_pages = cfg.donor.dram_pages.max(pages),
        _ => {}
    }
    let dep = Deployment::new(&cfg)?;
    let mut records: Vec<TraceRecord> = (0..pages).map(|o| TraceRecord::store(o, o ^ cfg.seed)).collect();
    records.extend((0..pages).map(TraceRecord::load));
    let report = replay(&SwapTrace { records }, &dep.donee)?;
    let landed = report.stores_by_tier.get(tier.name()).copied().unwrap_or(0);
    if landed != pages {
        return Err(HarnessError::Config(format!(
            "only {landed} of {pages} bench pages landed in {tier}"
        )));
    }
    Ok(report)
}
