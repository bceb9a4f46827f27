//! Synthetic swap traces.
//!
//! Text form, one record per line (`#` starts a comment):
//!
//! ```text
//! store 17 9837248923
//! load 17 0
//! invalidate_page 17 0
//! invalidate_area 0 0
//! ```
//!
//! Binary form: the 8-byte magic `SSTRACE1`, then 17-byte records of
//! `u8 op` (0 store, 1 load, 2 invalidate_page, 3 invalidate_area),
//! `u64 offset`, `u64 seed`, little-endian.
//!
//! A store's page content is a pure function of its seed, see
//! [`page_from_seed`].

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::wire::{zero_page, Page};

pub const BINARY_MAGIC: &[u8; 8] = b"SSTRACE1";
const BINARY_RECORD: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceOp {
    Store,
    Load,
    InvalidatePage,
    InvalidateArea,
}

impl TraceOp {
    pub fn name(self) -> &'static str {
        match self {
            TraceOp::Store => "store",
            TraceOp::Load => "load",
            TraceOp::InvalidatePage => "invalidate_page",
            TraceOp::InvalidateArea => "invalidate_area",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<TraceOp> {
        [TraceOp::Store, TraceOp::Load, TraceOp::InvalidatePage, TraceOp::InvalidateArea]
            .get(c as usize)
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub op: TraceOp,
    pub offset: u64,
    pub seed: u64,
}

impl TraceRecord {
    pub fn store(offset: u64, seed: u64) -> Self {
        TraceRecord {
            op: TraceOp::Store,
            offset,
            seed,
        }
    }

    pub fn load(offset: u64) -> Self {
        TraceRecord {
            op: TraceOp::Load,
            offset,
            seed: 0,
        }
    }

    pub fn invalidate_page(offset: u64) -> Self {
        TraceRecord {
            op: TraceOp::InvalidatePage,
            offset,
            seed: 0,
        }
    }

    pub fn invalidate_area() -> Self {
        TraceRecord {
            op: TraceOp::InvalidateArea,
            offset: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwapTrace {
    pub records: Vec<TraceRecord>,
}

/// Deterministic page content for a store seed. The first eight bytes hold
/// the seed itself so a page's origin can be read back.
pub fn page_from_seed(seed: u64) -> Page {
    let mut page = zero_page();
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut page[..]);
    page[..8].copy_from_slice(&seed.to_le_bytes());
    page
}

impl SwapTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# sealswap trace v1\n");
        for r in &self.records {
            let _ = writeln!(out, "{} {} {}", r.op.name(), r.offset, r.seed);
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<SwapTrace, HarnessError> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| HarnessError::Trace(format!("line {}: {what}", lineno + 1));
            let mut fields = line.split_whitespace();
            let op = match fields.next() {
                Some("store") => TraceOp::Store,
                Some("load") => TraceOp::Load,
                Some("invalidate_page") => TraceOp::InvalidatePage,
                Some("invalidate_area") => TraceOp::InvalidateArea,
                Some(other) => return Err(bad(&format!("unknown op {other:?}"))),
                None => unreachable!(),
            };
            let mut num = |name: &str| -> Result<u64, HarnessError> {
                match fields.next() {
                    Some(f) => f.parse().map_err(|_| bad(&format!("bad {name} {f:?}"))),
                    None if op == TraceOp::InvalidateArea || name == "seed" => Ok(0),
                    None => Err(bad(&format!("missing {name}"))),
                }
            };
            let offset = num("offset")?;
            let seed = num("seed")?;
            if fields.next().is_some() {
                return Err(bad("trailing fields"));
            }
            records.push(TraceRecord { op, offset, seed });
        }
        Ok(SwapTrace { records })
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.records.len() * BINARY_RECORD);
        out.extend_from_slice(BINARY_MAGIC);
        for r in &self.records {
            out.push(r.op.code());
            out.extend_from_slice(&r.offset.to_le_bytes());
            out.extend_from_slice(&r.seed.to_le_bytes());
        }
        out
    }

    pub fn parse_binary(bytes: &[u8]) -> Result<SwapTrace, HarnessError> {
        let body = bytes
            .strip_prefix(BINARY_MAGIC)
            .ok_or_else(|| HarnessError::Trace("missing binary trace magic".into()))?;
        if body.len() % BINARY_RECORD != 0 {
            return Err(HarnessError::Trace("truncated binary trace".into()));
        }
        body.chunks_exact(BINARY_RECORD)
            .enumerate()
            .map(|(i, rec)| {
                let op = TraceOp::from_code(rec[0])
                    .ok_or_else(|| HarnessError::Trace(format!("record {i}: bad op {}", rec[0])))?;
                Ok(TraceRecord {
                    op,
                    offset: u64::from_le_bytes(rec[1..9].try_into().unwrap()),
                    seed: u64::from_le_bytes(rec[9..17].try_into().unwrap()),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|records| SwapTrace { records })
    }

    /// Accepts either form.
    pub fn parse(bytes: &[u8]) -> Result<SwapTrace, HarnessError> {
        if bytes.starts_with(BINARY_MAGIC) {
            Self::parse_binary(bytes)
        } else {
            let text = std::str::from_utf8(bytes).map_err(|_| HarnessError::Trace("trace is not UTF-8".into()))?;
            Self::parse_text(text)
        }
    }

    pub fn count(&self, op: TraceOp) -> usize {
        self.records.iter().filter(|r| r.op == op).count()
    }
}

/// Knobs for [`generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSpec {
    pub ops: usize,
    /// Footprint: offsets are drawn from `0..offsets`.
    pub offsets: u64,
    pub seed: u64,
    /// Store every offset once before the random phase.
    pub prefill: bool,
    pub store_weight: f64,
    pub load_weight: f64,
    pub invalidate_weight: f64,
    /// Probability that any given record is an invalidate_area.
    pub area_rate: f64,
    /// Share of offsets forming the hot set.
    pub hot_fraction: f64,
    /// Probability that an op targets the hot set.
    pub hot_probability: f64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec {
            ops: 10_000,
            offsets: 512,
            seed: 1,
            prefill: true,
            store_weight: 0.45,
            load_weight: 0.4,
            invalidate_weight: 0.15,
            area_rate: 0.0005,
            hot_fraction: 0.1,
            hot_probability: 0.5,
        }
    }
}

/// Generates a trace that only loads offsets holding a page, so a correct
/// engine replays it without errors. Prefill records count toward `ops`.
pub fn generate(spec: &TraceSpec) -> SwapTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut present: HashSet<u64> = HashSet::new();
    let mut records = Vec::with_capacity(spec.ops);
    let offsets = spec.offsets.max(1);
    if spec.prefill {
        for o in 0..offsets.min(spec.ops as u64) {
            records.push(TraceRecord::store(o, rng.random()));
            present.insert(o);
        }
    }
    let hot = ((offsets as f64 * spec.hot_fraction).ceil() as u64).clamp(1, offsets);
    let total_weight = spec.store_weight + spec.load_weight + spec.invalidate_weight;
    while records.len() < spec.ops {
        if rng.random_bool(spec.area_rate.clamp(0.0, 1.0)) {
            records.push(TraceRecord::invalidate_area());
            present.clear();
            continue;
        }
        let offset = if rng.random_bool(spec.hot_probability.clamp(0.0, 1.0)) {
            rng.random_range(0..hot)
        } else {
            rng.random_range(0..offsets)
        };
        let rec = if !present.contains(&offset) {
            TraceRecord::store(offset, rng.random())
        } else {
            let x = rng.random::<f64>() * total_weight;
            if x < spec.store_weight {
                TraceRecord::store(offset, rng.random())
            } else if x < spec.store_weight + spec.load_weight {
                TraceRecord::load(offset)
            } else {
                TraceRecord::invalidate_page(offset)
            }
        };
        match rec.op {
            TraceOp::Store => {
                present.insert(offset);
            }
            TraceOp::InvalidatePage => {
                present.remove(&offset);
            }
            _ => {}
        }
        records.push(rec);
    }
    SwapTrace { records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_format() {
        let t = SwapTrace::parse_text("# hi\nstore 3 99\nload 3\n\ninvalidate_page 3 0 # x\ninvalidate_area\n").unwrap();
        assert_eq!(
            t.records,
            vec![
                TraceRecord::store(3, 99),
                TraceRecord::load(3),
                TraceRecord::invalidate_page(3),
                TraceRecord::invalidate_area()
            ]
        );
        assert!(SwapTrace::parse_text("frob 1 2").is_err());
        assert!(SwapTrace::parse_text("store x 2").is_err());
        assert!(SwapTrace::parse_text("load").is_err());
        assert!(SwapTrace::parse_text("load 1 2 3").is_err());
    }

    #[test]
    fn binary_rejects_garbage() {
        assert!(SwapTrace::parse_binary(b"nope").is_err());
        let mut b = SwapTrace { records: vec![TraceRecord::load(1)] }.to_binary();
        b[8] = 9;
        assert!(SwapTrace::parse_binary(&b).is_err());
        b.pop();
        assert!(SwapTrace::parse_binary(&b).is_err());
    }

    #[test]
    fn seeded_pages() {
        let a = page_from_seed(42);
        assert_eq!(a, page_from_seed(42));
        assert_ne!(a, page_from_seed(43));
        assert_eq!(u64::from_le_bytes(a[..8].try_into().unwrap()), 42);
    }

    #[test]
    fn generated_traces_only_load_present_offsets() {
        let spec = TraceSpec {
            ops: 5000,
            offsets: 64,
            area_rate: 0.01,
            ..TraceSpec::default()
        };
        let t = generate(&spec);
        assert_eq!(t.len(), 5000);
        assert_eq!(t, generate(&spec));
        let mut present = HashSet::new();
        for r in &t.records {
            assert!(r.offset < 64);
            match r.op {
                TraceOp::Store => {
                    present.insert(r.offset);
                }
                TraceOp::Load => assert!(present.contains(&r.offset)),
                TraceOp::InvalidatePage => {
                    present.remove(&r.offset);
                }
                TraceOp::InvalidateArea => present.clear(),
            }
        }
        assert!(t.count(TraceOp::InvalidateArea) > 0);
        assert!(t.records[..64].iter().all(|r| r.op == TraceOp::Store));
    }

    fn arb_record() -> impl Strategy<Value = TraceRecord> {
        (0u8..4, any::<u64>(), any::<u64>()).prop_map(|(op, offset, seed)| TraceRecord {
            op: TraceOp::from_code(op).unwrap(),
            offset,
            seed,
        })
    }

    proptest! {
        #[test]
        fn both_forms_roundtrip(records in prop::collection::vec(arb_record(), 0..50)) {
            let t = SwapTrace { records };
            prop_assert_eq!(SwapTrace::parse(t.to_text().as_bytes()).unwrap(), t.clone());
            prop_assert_eq!(SwapTrace::parse(&t.to_binary()).unwrap(), t);
        }
    }
}
