use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::wire::PAGE_SIZE;

/// Nearest-rank percentiles in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: u64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
    pub mean: f64,
}

impl Percentiles {
    /// `samples` are nanoseconds; they get sorted in place.
    pub fn from_nanos(samples: &mut [u64]) -> Percentiles {
        if samples.is_empty() {
            return Percentiles::default();
        }
        samples.sort_unstable();
        let n = samples.len();
        let rank = |q: f64| samples[((q * n as f64).ceil() as usize).clamp(1, n) - 1] as f64 / 1e3;
        Percentiles {
            count: n as u64,
            p50: rank(0.50),
            p95: rank(0.95),
            p99: rank(0.99),
            max: samples[n - 1] as f64 / 1e3,
            mean: samples.iter().map(|&s| s as f64).sum::<f64>() / n as f64 / 1e3,
        }
    }
}

/// Per-label latency samples.
#[derive(Debug, Clone, Default)]
pub struct LatencyRecorder {
    samples: BTreeMap<String, Vec<u64>>,
}

impl LatencyRecorder {
    pub fn record(&mut self, label: &str, d: Duration) {
        let ns = d.as_nanos().min(u64::MAX as u128) as u64;
        match self.samples.get_mut(label) {
            Some(v) => v.push(ns),
            None => {
                self.samples.insert(label.to_string(), vec![ns]);
            }
        }
    }

    pub fn merge(&mut self, other: LatencyRecorder) {
        for (k, mut v) in other.samples {
            self.samples.entry(k).or_default().append(&mut v);
        }
    }

    pub fn total(&self, label: &str) -> Duration {
        Duration::from_nanos(self.samples.get(label).map_or(0, |v| v.iter().sum()))
    }

    pub fn summarize(mut self) -> BTreeMap<String, Percentiles> {
        self.samples
            .iter_mut()
            .map(|(k, v)| (k.clone(), Percentiles::from_nanos(v)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCounts {
    pub store: u64,
    pub load: u64,
    pub invalidate_page: u64,
    pub invalidate_area: u64,
    pub total: u64,
}

/// Outcome of a replay or bench run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub ops: OpCounts,
    /// Loads whose bytes differed from what was stored. A successful run
    /// always reports zero; a mismatch aborts the replay.
    pub mismatches: u64,
    /// Keyed by op name and by `store.<tier>` / `load.<tier>`.
    pub latency_us: BTreeMap<String, Percentiles>,
    /// Pages per tier at store time.
    pub stores_by_tier: BTreeMap<String, u64>,
    /// Bytes moved divided by the summed time of the ops moving them.
    pub store_mb_s: f64,
    pub load_mb_s: f64,
    pub elapsed_s: f64,
    pub workers: usize,
}

impl BenchReport {
    pub(crate) fn finish(
        ops: OpCounts,
        recorder: LatencyRecorder,
        stores_by_tier: BTreeMap<String, u64>,
        elapsed: Duration,
        workers: usize,
    ) -> BenchReport {
        let mb_s = |n: u64, d: Duration| {
            if d.is_zero() {
                0.0
            } else {
                (n as f64 * PAGE_SIZE as f64) / 1e6 / d.as_secs_f64()
            }
        };
        let store_mb_s = mb_s(ops.store, recorder.total("store"));
        let load_mb_s = mb_s(ops.load, recorder.total("load"));
        BenchReport {
            ops,
            mismatches: 0,
            latency_us: recorder.summarize(),
            stores_by_tier,
            store_mb_s,
            load_mb_s,
            elapsed_s: elapsed.as_secs_f64(),
            workers,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Tiers that received at least one store.
    pub fn tiers_used(&self) -> usize {
        self.stores_by_tier.values().filter(|&&n| n > 0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let mut v: Vec<u64> = (1..=100).map(|i| i * 1000).collect();
        let p = Percentiles::from_nanos(&mut v);
        assert_eq!((p.count, p.p50, p.p95, p.p99, p.max), (100, 50.0, 95.0, 99.0, 100.0));
        assert_eq!(p.mean, 50.5);
        let mut one = vec![7000];
        let p = Percentiles::from_nanos(&mut one);
        assert_eq!((p.p50, p.p99), (7.0, 7.0));
        assert_eq!(Percentiles::from_nanos(&mut []).count, 0);
    }

    #[test]
    fn json_roundtrip() {
        let mut r = LatencyRecorder::default();
        r.record("store", Duration::from_micros(3));
        let rep = BenchReport::finish(
            OpCounts {
                store: 1,
                total: 1,
                ..OpCounts::default()
            },
            r,
            BTreeMap::from([("donee-hbm".to_string(), 1)]),
            Duration::from_millis(1),
            1,
        );
        let back: BenchReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
        assert_eq!(rep.tiers_used(), 1);
        assert!((rep.store_mb_s - 4096.0 / 3.0).abs() < 1e-6);
    }
}
