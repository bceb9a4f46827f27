//! Fixtures shared by the benches.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sealswap_core::harness::{Deployment, HarnessConfig};
use sealswap_core::wire::zero_page;
use sealswap_core::{DoneeConfig, DonorConfig, Page, Placement, Tier};

pub fn random_page(seed: u64) -> Page {
    let mut p = zero_page();
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut p[..]);
    p
}

/// Loopback deployment with `offsets` offsets whose stores go to `tier`.
pub fn pinned_deployment(tier: Tier, offsets: u64) -> Deployment {
    let local = if tier == Tier::DoneeHbm { offsets + 8 } else { 0 };
    let swap = if tier == Tier::LocalSwap { offsets + 8 } else { 0 };
    let mut donee = DoneeConfig::new(1, 100, offsets, local, swap);
    donee.placement = Placement::Pin(tier);
    let cfg = HarnessConfig::loopback(donee, DonorConfig::new(100, offsets + 16, offsets + 16));
    Deployment::new(&cfg).expect("bench deployment")
}
