use std::sync::{Arc, Mutex};
use std::time::Duration;

use proptest::prelude::*;
use sealswap_core::allocator::MachineId;
use sealswap_core::donor::serve_connection;
use sealswap_core::harness::{
    generate, replay, replay_parallel, stress_conflicting, Deployment, HarnessConfig, HarnessError, StressConfig,
    SwapTrace, TraceRecord, TraceSpec,
};
use sealswap_core::pagecrypt::generate_key;
use sealswap_core::transport::FrameSender;
use sealswap_core::wire::{decode_command, decode_store_packet};
use sealswap_core::{
    loopback_pair, DoneeConfig, DoneeEngine, DoneeError, DonorConfig, DonorEngine, DonorLink, Endpoint, Frame,
    FrameKind, LatencyModel, Tier, TransportError,
};

fn jittery(seed: u64) -> LatencyModel {
    LatencyModel::Uniform {
        min_micros: 0,
        max_micros: 150,
        seed,
    }
}

fn small_config(seed: u64, latency: LatencyModel) -> HarnessConfig {
    let mut cfg = HarnessConfig::loopback(DoneeConfig::new(1, 100, 96, 24, 24), DonorConfig::new(100, 33, 32));
    cfg.seed = seed;
    cfg.transport.latency = latency;
    cfg
}

/// Copies held anywhere must equal the number of valid translation entries.
fn assert_single_copy(dep: &Deployment) {
    let donee = &dep.donee;
    // a round trip on the same connection flushes earlier invalidations
    let _ = donee.link().unwrap().load(Tier::DonorHbm, 0).unwrap();
    let cfg = donee.config();
    let occupancy = donee.tier_occupancy();
    let local_used = cfg.local_pages - donee.local_free();
    let swap_used = cfg.local_swap_pages - donee.local_swap_free();
    let donor_owned = dep.donor.as_ref().unwrap().lock().unwrap().pages_owned_by(MachineId(cfg.mid));
    assert_eq!(occupancy[0], local_used, "{occupancy:?}");
    assert_eq!(occupancy[1] + occupancy[2], donor_owned, "{occupancy:?}");
    assert_eq!(occupancy[3], swap_used, "{occupancy:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_traces_replay_under_jitter(seed in any::<u64>(), workers in 1usize..6) {
        let dep = Deployment::new(&small_config(seed, jittery(seed))).unwrap();
        let trace = generate(&TraceSpec {
            ops: 600,
            offsets: 96,
            seed,
            area_rate: 0.005,
            ..TraceSpec::default()
        });
        let report = replay_parallel(&trace, &dep.donee, workers).unwrap();
        prop_assert_eq!(report.ops.total as usize, trace.len());
        prop_assert_eq!(report.mismatches, 0);
        assert_single_copy(&dep);
    }
}

#[test]
fn loading_a_never_stored_offset_is_a_verification_failure() {
    let dep = Deployment::new(&small_config(1, LatencyModel::None)).unwrap();
    let trace = SwapTrace {
        records: vec![TraceRecord::store(1, 5), TraceRecord::load(2)],
    };
    match replay(&trace, &dep.donee) {
        Err(HarnessError::Verification { index: 1, cause, .. }) => assert_eq!(cause, Some(DoneeError::NotPresent(2))),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn conflicting_offsets_behave_like_registers() {
    for seed in 0..4 {
        let dep = Deployment::new(&small_config(seed, jittery(seed))).unwrap();
        let r = stress_conflicting(
            &dep.donee,
            &StressConfig {
                threads: 8,
                first_offset: 0,
                offsets: 3,
                ops_per_thread: 60,
                seed,
            },
        )
        .unwrap();
        assert_eq!(r.stores + r.loads + r.invalidations, 480);
        assert!(r.loads > r.empty_loads);
        assert_single_copy(&dep);
    }
}

struct Tap {
    inner: Box<dyn FrameSender>,
    seen: Arc<Mutex<Vec<Frame>>>,
}

impl FrameSender for Tap {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.seen.lock().unwrap().push(frame.clone());
        self.inner.send_frame(frame)
    }

    fn close(&mut self) {
        self.inner.close()
    }
}

#[test]
fn only_ciphertext_leaves_the_donee() {
    let donor = Arc::new(Mutex::new(DonorEngine::new(DonorConfig::new(100, 64, 0), 3).unwrap()));
    let (client, server) = loopback_pair(LatencyModel::None);
    serve_connection(donor.clone(), server);
    let seen = Arc::new(Mutex::new(Vec::new()));
    let tapped = Endpoint {
        tx: Box::new(Tap {
            inner: client.tx,
            seen: seen.clone(),
        }),
        rx: client.rx,
    };
    let link = DonorLink::new(tapped, MachineId(1), MachineId(100), Duration::from_secs(5));
    let donee = DoneeEngine::new(DoneeConfig::new(1, 100, 32, 0, 0), &generate_key().unwrap(), Some(link), 3).unwrap();

    let plain: Vec<_> = (0..32u64).map(sealswap_core::harness::page_from_seed).collect();
    let zero = [0u8; 4096];
    for (o, p) in plain.iter().enumerate() {
        donee.store(o as u64, &p[..]).unwrap();
    }
    donee.store(0, &zero).unwrap();
    for o in 0..32u64 {
        donee.load(o).unwrap();
    }

    let frames = seen.lock().unwrap();
    let mut stores = 0;
    for f in frames.iter() {
        let header = match f.kind() {
            FrameKind::Packet4160 => {
                let pkt = decode_store_packet(f.bytes()).unwrap();
                stores += 1;
                // ciphertext shares about 1/256 of its bytes with any given page
                for p in plain.iter().map(|p| &p[..]).chain([&zero[..]]) {
                    let same = pkt.page.iter().zip(p).filter(|(a, b)| a == b).count();
                    assert!(same < 64, "{same} bytes match a plaintext page");
                }
                pkt.header
            }
            FrameKind::Command64 => decode_command(f.bytes()).unwrap(),
        };
        // the only per-request value on the wire is the request token
        assert_eq!(header.page_token, header.request_token);
    }
    assert_eq!(stores, 33);
}
