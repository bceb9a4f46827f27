//! Donor-side view of allocation: does a donee's page placement reveal
//! anything about which offset is being swapped?
//!
//! One offset is stored and invalidated over and over. A donor that picks
//! pages uniformly at random from its free pool produces placements that
//! are indistinguishable from independent uniform draws; anything else
//! shows up in a chi-square test over binned page indices or in the rate
//! at which consecutive placements repeat.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{DonorTarget, HarnessError};
use crate::allocator::{MachineId, PageAllocator};
use crate::donee::{DoneeConfig, DoneeEngine, Placement};
use crate::donor::{DonorConfig, DonorEngine, DonorService};
use crate::pagecrypt::generate_key;
use crate::transport::{Frame, FrameKind, LatencyModel};
use crate::wire::{
    decode_command, decode_store_packet, encode_completion, encode_load_response, zero_page, Command, Completion,
    Opcode, Page, PagePacket, Status, Tier, PAGE_SIZE,
};

/// Significance level for both checks.
pub const ALPHA: f64 = 0.01;
/// Fewer cycles leave the chi-square bins too sparse to mean anything.
pub const MIN_CYCLES: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub cycles: u64,
    /// Size of the placement domain.
    pub free_pages: u64,
    pub bins: u64,
    pub chi_square: f64,
    pub p_value: f64,
    pub repeats: u64,
    pub repeat_rate: f64,
    pub expected_repeat_rate: f64,
    pub repeat_sigma: f64,
    pub uniform: bool,
    pub repeats_ok: bool,
    pub pass: bool,
}

/// Pearson statistic for `indices` in `0..domain` grouped into `bins`
/// contiguous bins, with expected counts proportional to bin width.
pub fn binned_chi_square(indices: &[u64], domain: u64, bins: u64) -> f64 {
    let t = indices.len() as f64;
    let mut observed = vec![0u64; bins as usize];
    for &i in indices {
        observed[(i as u128 * bins as u128 / domain as u128) as usize] += 1;
    }
    // bin b holds indices i with floor(i*bins/domain) == b
    let lower = |b: u64| (b as u128 * domain as u128).div_ceil(bins as u128) as u64;
    (0..bins)
        .map(|b| {
            let width = lower(b + 1) - lower(b);
            let e = t * width as f64 / domain as f64;
            let o = observed[b as usize] as f64;
            (o - e) * (o - e) / e
        })
        .sum()
}

fn analyse(indices: &[u64], domain: u64) -> AuditReport {
    let cycles = indices.len() as u64;
    let bins = (cycles / 10).clamp(2, domain.max(2));
    let chi_square = binned_chi_square(indices, domain, bins);
    let p_value = ChiSquared::new((bins - 1) as f64).expect("positive dof").sf(chi_square);
    let repeats = indices.windows(2).filter(|w| w[0] == w[1]).count() as u64;
    let pairs = cycles.saturating_sub(1).max(1) as f64;
    let p = 1.0 / domain as f64;
    let repeat_rate = repeats as f64 / pairs;
    let repeat_sigma = (p * (1.0 - p) / pairs).sqrt();
    let uniform = p_value > ALPHA;
    let repeats_ok = (repeat_rate - p).abs() <= 3.0 * repeat_sigma;
    AuditReport {
        cycles,
        free_pages: domain,
        bins,
        chi_square,
        p_value,
        repeats,
        repeat_rate,
        expected_repeat_rate: p,
        repeat_sigma,
        uniform,
        repeats_ok,
        pass: uniform && repeats_ok,
    }
}

/// Runs the audit against whatever serves `target`, which must be an idle
/// donor shaped like `donor`.
pub fn audit_service(
    target: &DonorTarget,
    donor: &DonorConfig,
    cycles: u64,
    seed: u64,
) -> Result<AuditReport, HarnessError> {
    if cycles < MIN_CYCLES {
        return Err(HarnessError::Usage(format!("audit needs at least {MIN_CYCLES} cycles, got {cycles}")));
    }
    let mid = if donor.mid == 1 { 2 } else { 1 };
    let mut cfg = DoneeConfig::new(mid, donor.mid, 1, 0, 0);
    cfg.placement = Placement::Pin(Tier::DonorHbm);
    cfg.cache_depth = 0;
    let link = target.link(mid, donor.mid, cfg.op_timeout())?;
    let engine = DoneeEngine::new(cfg, &generate_key()?, Some(link), seed)?;

    let reserve = donor.metadata_pages();
    let hbm_slots = donor.hbm_pages - reserve;
    let domain = hbm_slots + donor.dram_pages;
    if domain == 0 {
        return Err(HarnessError::Config("donor has no pages to audit".into()));
    }
    let page = zero_page();
    let mut indices = Vec::with_capacity(cycles as usize);
    for _ in 0..cycles {
        engine.store(0, &page[..])?;
        let e = engine.entry(0).expect("offset 0 exists");
        let page_index = |base: u64| (e.remote_address - base) / PAGE_SIZE as u64;
        indices.push(match e.tier {
            Tier::DonorHbm => page_index(donor.hbm_base) - reserve,
            Tier::DonorDram => hbm_slots + page_index(donor.dram_base),
            t => return Err(HarnessError::Config(format!("audit page landed in {t}"))),
        });
        engine.invalidate_page(0)?;
    }
    Ok(analyse(&indices, domain))
}

/// Audits a fresh in-process donor.
pub fn audit_obliviousness(donor: &DonorConfig, cycles: u64, seed: u64) -> Result<AuditReport, HarnessError> {
    let engine = Arc::new(Mutex::new(DonorEngine::new(donor.clone(), seed ^ 0xA0D1)?));
    audit_service(&DonorTarget::loopback(engine, LatencyModel::None), donor, cycles, seed)
}

/// A deliberately bad donor that always hands out the lowest free page. It
/// speaks the protocol correctly, so only the audit can tell it apart.
pub struct SequentialDonor {
    mid: MachineId,
    hbm: PageAllocator,
    pages: Vec<u8>,
}

impl SequentialDonor {
    pub fn new(config: &DonorConfig) -> Result<Self, HarnessError> {
        let mut hbm = PageAllocator::new(config.hbm_pages, config.hbm_base).map_err(crate::donor::DonorError::from)?;
        hbm.reserve_block(config.metadata_pages())
            .map_err(crate::donor::DonorError::from)?;
        Ok(SequentialDonor {
            mid: config.my_mid(),
            pages: vec![0; hbm.capacity_pages() as usize * PAGE_SIZE],
            hbm,
        })
    }

    fn slot(&mut self, addr: u64) -> &mut [u8] {
        let i = self.hbm.index_of(addr).expect("allocated address") as usize;
        &mut self.pages[i * PAGE_SIZE..(i + 1) * PAGE_SIZE]
    }

    fn load(&mut self, cmd: &Command) -> Result<Page, Status> {
        if cmd.tier != Tier::DonorHbm {
            return Err(Status::Invalid);
        }
        match self.hbm.owner_of(cmd.remote_addr) {
            Ok(o) if o.0 == cmd.src_mid => {
                let mut p = zero_page();
                p.copy_from_slice(self.slot(cmd.remote_addr));
                Ok(p)
            }
            Ok(_) => Err(Status::PermissionDenied),
            Err(_) => Err(Status::Invalid),
        }
    }
}

impl DonorService for SequentialDonor {
    fn dispatch(&mut self, frame: &Frame) -> Option<Frame> {
        match frame.kind() {
            FrameKind::Packet4160 => {
                let p = decode_store_packet(frame.bytes()).ok()?;
                let c = match self.hbm.alloc_lowest(MachineId(p.header.src_mid)) {
                    Ok(addr) => {
                        self.slot(addr).copy_from_slice(&p.page[..]);
                        Completion::ok(Tier::DonorHbm, addr, p.header.request_token)
                    }
                    Err(_) => Completion::failed(Status::Exhausted, p.header.request_token),
                };
                Some(Frame::word(encode_completion(&c)))
            }
            FrameKind::Command64 => {
                let cmd = decode_command(frame.bytes()).ok()?;
                if cmd.dst_mid != self.mid.0 {
                    return None;
                }
                match cmd.opcode {
                    Opcode::Load => Some(match self.load(&cmd) {
                        Ok(page) => Frame::new(encode_load_response(&PagePacket {
                            header: Command {
                                opcode: Opcode::LoadResponse,
                                src_mid: self.mid.0,
                                dst_mid: cmd.src_mid,
                                ..cmd
                            },
                            page,
                        }))
                        .expect("fixed-size packet"),
                        Err(s) => Frame::word(encode_completion(&Completion::failed(s, cmd.request_token))),
                    }),
                    Opcode::InvalidatePage => {
                        let _ = self.hbm.free_page(cmd.remote_addr, MachineId(cmd.src_mid));
                        None
                    }
                    Opcode::InvalidateArea => {
                        self.hbm.free_all(MachineId(cmd.src_mid));
                        None
                    }
                    _ => None,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of the Pearson statistic for equal-width bins.
    fn naive_chi_square(indices: &[u64], domain: u64, bins: u64) -> f64 {
        assert_eq!(domain % bins, 0);
        let w = domain / bins;
        let e = indices.len() as f64 / bins as f64;
        (0..bins)
            .map(|b| {
                let o = indices.iter().filter(|&&i| i / w == b).count() as f64;
                (o - e).powi(2) / e
            })
            .sum()
    }

    #[test]
    fn chi_square_matches_equal_width_formula() {
        let idx: Vec<u64> = (0..1000u64).map(|i| (i * 7919) % 400).collect();
        let a = binned_chi_square(&idx, 400, 40);
        let b = naive_chi_square(&idx, 400, 40);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn unequal_bins_have_proportional_expectations() {
        // domain 10 in 3 bins: widths 4, 3, 3; a perfectly proportional
        // sample has statistic zero
        let idx: Vec<u64> = (0..10).collect();
        assert!(binned_chi_square(&idx, 10, 3).abs() < 1e-12);
    }

    #[test]
    fn constant_placements_fail() {
        let r = analyse(&vec![5; 2000], 4095);
        assert!(!r.uniform && !r.repeats_ok && !r.pass);
        assert_eq!(r.repeats, 1999);
    }

    #[test]
    fn short_audits_are_refused() {
        let cfg = DonorConfig::new(9, 64, 0);
        assert!(matches!(audit_obliviousness(&cfg, 999, 1), Err(HarnessError::Usage(_))));
    }

    #[test]
    fn real_donor_passes_and_sequential_donor_fails() {
        let cfg = DonorConfig::new(9, 512, 0);
        let good = audit_obliviousness(&cfg, 1000, 11).unwrap();
        assert!(good.pass, "{good:?}");
        let bad = Arc::new(Mutex::new(SequentialDonor::new(&cfg).unwrap()));
        let bad = audit_service(&DonorTarget::loopback(bad, LatencyModel::None), &cfg, 1000, 11).unwrap();
        assert!(!bad.pass, "{bad:?}");
        assert_eq!(bad.repeats, 999);
    }
}
