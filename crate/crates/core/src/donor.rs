//! Donor-side engine.
//!
//! The donor owns two tiers (HBM and DRAM), each a [`PageAllocator`] plus
//! the raw page bytes. Every store lands on a uniformly random free page,
//! every load is checked against the page's owner, and invalidations are
//! applied silently. All handlers run one at a time; the serving loops in
//! this module funnel every connection through a single mutex.

use std::io::{self, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{AllocError, MachineId, PageAllocator};
use crate::transport::{tcp_endpoint, Endpoint, Frame, FrameKind, LatencyModel, TransportError};
use crate::wire::{
    self, decode_command, decode_store_packet, encode_completion, encode_load_response, zero_page, Command,
    Completion, Opcode, Page, PagePacket, Status, Tier, PAGE_SIZE,
};

#[derive(Debug, Error)]
pub enum DonorError {
    #[error("bad donor configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DonorConfig {
    pub mid: u8,
    pub hbm_pages: u64,
    pub dram_pages: u64,
    #[serde(default)]
    pub hbm_base: u64,
    #[serde(default = "default_dram_base")]
    pub dram_base: u64,
    /// Pages at the bottom of HBM set aside for ownership metadata. Defaults
    /// to one byte per donated page, rounded up to whole pages.
    #[serde(default)]
    pub metadata_reserve_pages: Option<u64>,
}

fn default_dram_base() -> u64 {
    1 << 40
}

impl DonorConfig {
    pub fn new(mid: u8, hbm_pages: u64, dram_pages: u64) -> Self {
        DonorConfig {
            mid,
            hbm_pages,
            dram_pages,
            hbm_base: 0,
            dram_base: default_dram_base(),
            metadata_reserve_pages: None,
        }
    }

    pub fn my_mid(&self) -> MachineId {
        MachineId(self.mid)
    }

    pub fn metadata_pages(&self) -> u64 {
        self.metadata_reserve_pages
            .unwrap_or_else(|| (self.hbm_pages + self.dram_pages).div_ceil(PAGE_SIZE as u64))
            .min(self.hbm_pages)
    }

    pub fn validate(&self) -> Result<(), DonorError> {
        if !self.my_mid().is_assignable() {
            return Err(DonorError::BadConfig(format!("mid {} is reserved", self.mid)));
        }
        if let Some(r) = self.metadata_reserve_pages {
            if r > self.hbm_pages {
                return Err(DonorError::BadConfig(format!(
                    "metadata reserve {r} exceeds {} HBM pages",
                    self.hbm_pages
                )));
            }
        }
        Ok(())
    }
}

/// Out-of-band counters. Invalidations never produce wire responses, so
/// this is the only place their outcome is visible.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DonorAudit {
    pub frames: u64,
    pub stores_ok: u64,
    pub stores_spilled: u64,
    pub stores_exhausted: u64,
    pub loads_ok: u64,
    pub loads_denied: u64,
    pub loads_invalid: u64,
    pub invalidations: u64,
    pub denied_invalidations: u64,
    pub spurious_invalidations: u64,
    pub area_invalidations: u64,
    pub area_pages_freed: u64,
    pub malformed_frames: u64,
    pub misrouted_frames: u64,
}

/// Anything that can sit on the donor end of a connection.
pub trait DonorService: Send {
    /// Handles one incoming frame, returning the response if the request
    /// type has one.
    fn dispatch(&mut self, frame: &Frame) -> Option<Frame>;
}

struct DonorTier {
    alloc: PageAllocator,
    pages: Vec<u8>,
}

impl DonorTier {
    fn new(capacity: u64, base: u64) -> Result<Self, DonorError> {
        Ok(DonorTier {
            alloc: PageAllocator::new(capacity, base)?,
            pages: vec![0u8; capacity as usize * PAGE_SIZE],
        })
    }

    fn page_range(&self, addr: u64) -> std::ops::Range<usize> {
        let idx = ((addr - self.alloc.base_addr()) / PAGE_SIZE as u64) as usize;
        idx * PAGE_SIZE..(idx + 1) * PAGE_SIZE
    }

    fn free(&mut self, addr: u64, requester: MachineId) -> Result<(), AllocError> {
        self.alloc.free_page(addr, requester)?;
        let r = self.page_range(addr);
        self.pages[r].fill(0);
        Ok(())
    }
}

pub struct DonorEngine {
    config: DonorConfig,
    hbm: DonorTier,
    dram: DonorTier,
    rng: ChaCha8Rng,
    audit: DonorAudit,
}

impl std::fmt::Debug for DonorEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DonorEngine")
            .field("config", &self.config)
            .field("audit", &self.audit)
            .finish_non_exhaustive()
    }
}

impl DonorEngine {
    pub fn new(config: DonorConfig, seed: u64) -> Result<Self, DonorError> {
        config.validate()?;
        let mut hbm = DonorTier::new(config.hbm_pages, config.hbm_base)?;
        hbm.alloc.reserve_block(config.metadata_pages())?;
        let dram = DonorTier::new(config.dram_pages, config.dram_base)?;
        Ok(DonorEngine {
            config,
            hbm,
            dram,
            rng: ChaCha8Rng::seed_from_u64(seed),
            audit: DonorAudit::default(),
        })
    }

    pub fn config(&self) -> &DonorConfig {
        &self.config
    }

    pub fn audit(&self) -> &DonorAudit {
        &self.audit
    }

    fn tier(&self, tier: Tier) -> Option<&DonorTier> {
        match tier {
            Tier::DonorHbm => Some(&self.hbm),
            Tier::DonorDram => Some(&self.dram),
            _ => None,
        }
    }

    fn tier_mut(&mut self, tier: Tier) -> Option<&mut DonorTier> {
        match tier {
            Tier::DonorHbm => Some(&mut self.hbm),
            Tier::DonorDram => Some(&mut self.dram),
            _ => None,
        }
    }

    pub fn allocator(&self, tier: Tier) -> Option<&PageAllocator> {
        self.tier(tier).map(|t| &t.alloc)
    }

    pub fn free_count(&self, tier: Tier) -> u64 {
        self.allocator(tier).map_or(0, |a| a.free_count())
    }

    pub fn total_free(&self) -> u64 {
        self.hbm.alloc.free_count() + self.dram.alloc.free_count()
    }

    pub fn owner_of(&self, tier: Tier, addr: u64) -> Result<MachineId, AllocError> {
        match self.tier(tier) {
            Some(t) => t.alloc.owner_of(addr),
            None => Err(AllocError::OutOfRange(addr)),
        }
    }

    /// Pages currently owned by `mid` across both tiers.
    pub fn pages_owned_by(&self, mid: MachineId) -> u64 {
        [&self.hbm, &self.dram]
            .iter()
            .map(|t| t.alloc.owners().iter().filter(|&&o| o == mid).count() as u64)
            .sum()
    }

    /// Raw bytes of an allocated page, bypassing ownership checks.
    pub fn peek_page(&self, tier: Tier, addr: u64) -> Option<&[u8]> {
        let t = self.tier(tier)?;
        let idx = t.alloc.index_of(addr).ok()?;
        t.alloc.is_allocated_index(idx).then(|| &t.pages[t.page_range(addr)])
    }

    /// Fault-injection hook: lets a test play a malicious donor that rewrites
    /// stored bytes. Returns false if the page is not allocated.
    pub fn tamper_page(&mut self, tier: Tier, addr: u64, f: impl FnOnce(&mut [u8])) -> bool {
        let Some(t) = self.tier_mut(tier) else {
            return false;
        };
        let Ok(idx) = t.alloc.index_of(addr) else {
            return false;
        };
        if !t.alloc.is_allocated_index(idx) {
            return false;
        }
        let r = t.page_range(addr);
        f(&mut t.pages[r]);
        true
    }

    pub fn handle_store(&mut self, src: MachineId, target: Tier, page: &[u8; PAGE_SIZE]) -> Completion {
        let order = match target {
            Tier::DonorHbm => [Tier::DonorHbm, Tier::DonorDram],
            Tier::DonorDram => [Tier::DonorDram, Tier::DonorHbm],
            _ => return Completion::failed(Status::Invalid, 0),
        };
        if !src.is_assignable() {
            return Completion::failed(Status::Invalid, 0);
        }
        for tier in order {
            let rng = &mut self.rng;
            let t = match tier {
                Tier::DonorHbm => &mut self.hbm,
                _ => &mut self.dram,
            };
            match t.alloc.alloc_random(src, rng) {
                Ok(addr) => {
                    let r = t.page_range(addr);
                    t.pages[r].copy_from_slice(page);
                    self.audit.stores_ok += 1;
                    if tier != target {
                        self.audit.stores_spilled += 1;
                    }
                    return Completion::ok(tier, addr, 0);
                }
                Err(AllocError::Exhausted) => continue,
                Err(e) => unreachable!("allocation with an assignable owner failed: {e}"),
            }
        }
        self.audit.stores_exhausted += 1;
        Completion::failed(Status::Exhausted, 0)
    }

    pub fn handle_load(&mut self, src: MachineId, tier: Tier, addr: u64) -> Result<Page, Status> {
        let Some(t) = self.tier(tier) else {
            self.audit.loads_invalid += 1;
            return Err(Status::Invalid);
        };
        match t.alloc.owner_of(addr) {
            Ok(owner) if owner == MachineId::NONE => {
                self.audit.loads_invalid += 1;
                Err(Status::Invalid)
            }
            Ok(owner) if owner != src => {
                self.audit.loads_denied += 1;
                Err(Status::PermissionDenied)
            }
            Ok(_) => {
                let mut page = zero_page();
                page.copy_from_slice(&t.pages[t.page_range(addr)]);
                self.audit.loads_ok += 1;
                Ok(page)
            }
            Err(_) => {
                self.audit.loads_invalid += 1;
                Err(Status::Invalid)
            }
        }
    }

    pub fn handle_invalidate_page(&mut self, src: MachineId, tier: Tier, addr: u64) {
        let res = match self.tier_mut(tier) {
            Some(t) => t.free(addr, src),
            None => Err(AllocError::OutOfRange(addr)),
        };
        match res {
            Ok(()) => self.audit.invalidations += 1,
            Err(AllocError::PermissionDenied { .. }) => self.audit.denied_invalidations += 1,
            Err(_) => self.audit.spurious_invalidations += 1,
        }
    }

    pub fn handle_invalidate_area(&mut self, src: MachineId) {
        self.audit.area_invalidations += 1;
        if !src.is_assignable() {
            return;
        }
        for t in [&mut self.hbm, &mut self.dram] {
            let owned: Vec<u64> = t
                .alloc
                .owners()
                .iter()
                .enumerate()
                .filter(|(_, &o)| o == src)
                .map(|(i, _)| t.alloc.addr_of(i as u64))
                .collect();
            for addr in owned {
                t.free(addr, src).expect("page owned by src");
                self.audit.area_pages_freed += 1;
            }
        }
    }

    fn dispatch_command(&mut self, cmd: Command) -> Option<Frame> {
        let src = MachineId(cmd.src_mid);
        match cmd.opcode {
            Opcode::Load => {
                let reply = match self.handle_load(src, cmd.tier, cmd.remote_addr) {
                    Ok(page) => {
                        let header = Command {
                            opcode: Opcode::LoadResponse,
                            src_mid: self.config.mid,
                            dst_mid: cmd.src_mid,
                            ..cmd
                        };
                        Frame::new(encode_load_response(&PagePacket { header, page }))
                            .expect("packet encoding has a fixed size")
                    }
                    Err(status) => Frame::word(encode_completion(&Completion::failed(status, cmd.request_token))),
                };
                Some(reply)
            }
            Opcode::InvalidatePage => {
                self.handle_invalidate_page(src, cmd.tier, cmd.remote_addr);
                None
            }
            Opcode::InvalidateArea => {
                self.handle_invalidate_area(src);
                None
            }
            Opcode::Store | Opcode::StoreResponse | Opcode::LoadResponse => {
                self.audit.malformed_frames += 1;
                None
            }
        }
    }

    /// Writes the allocator state and page contents.
    ///
    /// Layout (little-endian): magic `SSDONOR\0`, u32 version (1), u8 mid,
    /// 3 zero bytes, u64 hbm_pages, u64 hbm_base, u64 dram_pages,
    /// u64 dram_base, hbm owner bytes, dram owner bytes, hbm page bytes,
    /// dram page bytes.
    pub fn write_snapshot(&self, w: &mut impl Write) -> Result<(), DonorError> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&[self.config.mid, 0, 0, 0])?;
        for t in [&self.hbm, &self.dram] {
            w.write_all(&t.alloc.capacity_pages().to_le_bytes())?;
            w.write_all(&t.alloc.base_addr().to_le_bytes())?;
        }
        for t in [&self.hbm, &self.dram] {
            let owners: Vec<u8> = t.alloc.owners().iter().map(|m| m.0).collect();
            w.write_all(&owners)?;
        }
        for t in [&self.hbm, &self.dram] {
            w.write_all(&t.pages)?;
        }
        Ok(())
    }

    pub fn read_snapshot(r: &mut impl Read, seed: u64) -> Result<Self, DonorError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(DonorError::Snapshot("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != SNAPSHOT_VERSION {
            return Err(DonorError::Snapshot(format!("unsupported version {version}")));
        }
        r.read_exact(&mut word)?;
        let mid = word[0];
        let mut geometry = [0u64; 4];
        for g in geometry.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *g = u64::from_le_bytes(b);
        }
        let [hbm_pages, hbm_base, dram_pages, dram_base] = geometry;
        let mut read_owners = |n: u64| -> Result<Vec<MachineId>, DonorError> {
            let mut b = vec![0u8; n as usize];
            r.read_exact(&mut b)?;
            Ok(b.into_iter().map(MachineId).collect())
        };
        let hbm_owners = read_owners(hbm_pages)?;
        let dram_owners = read_owners(dram_pages)?;
        let mut hbm = DonorTier {
            alloc: PageAllocator::from_owners(hbm_base, &hbm_owners)?,
            pages: vec![0u8; hbm_pages as usize * PAGE_SIZE],
        };
        let mut dram = DonorTier {
            alloc: PageAllocator::from_owners(dram_base, &dram_owners)?,
            pages: vec![0u8; dram_pages as usize * PAGE_SIZE],
        };
        r.read_exact(&mut hbm.pages)?;
        r.read_exact(&mut dram.pages)?;
        let config = DonorConfig {
            mid,
            hbm_pages,
            dram_pages,
            hbm_base,
            dram_base,
            metadata_reserve_pages: Some(hbm.alloc.reserved_pages()),
        };
        config.validate()?;
        Ok(DonorEngine {
            config,
            hbm,
            dram,
            rng: ChaCha8Rng::seed_from_u64(seed),
            audit: DonorAudit::default(),
        })
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"SSDONOR\0";
const SNAPSHOT_VERSION: u32 = 1;

impl DonorService for DonorEngine {
    fn dispatch(&mut self, frame: &Frame) -> Option<Frame> {
        self.audit.frames += 1;
        match frame.kind() {
            FrameKind::Command64 => match decode_command(frame.bytes()) {
                Ok(cmd) if cmd.dst_mid != self.config.mid => {
                    self.audit.misrouted_frames += 1;
                    None
                }
                Ok(cmd) => self.dispatch_command(cmd),
                Err(e) => {
                    debug!("dropping malformed command: {e}");
                    self.audit.malformed_frames += 1;
                    None
                }
            },
            FrameKind::Packet4160 => match decode_store_packet(frame.bytes()) {
                Ok(pkt) if pkt.header.dst_mid != self.config.mid => {
                    self.audit.misrouted_frames += 1;
                    None
                }
                Ok(pkt) => {
                    let mut c = self.handle_store(MachineId(pkt.header.src_mid), pkt.header.target_tier, &pkt.page);
                    c.request_token = pkt.header.request_token;
                    Some(Frame::word(encode_completion(&c)))
                }
                Err(e) => {
                    debug!("dropping malformed store packet: {e}");
                    self.audit.malformed_frames += 1;
                    None
                }
            },
        }
    }
}

/// Serves one connection until the peer disconnects or sends a frame the
/// transport cannot parse.
pub fn serve_connection<S>(service: Arc<Mutex<S>>, endpoint: Endpoint) -> JoinHandle<()>
where
    S: DonorService + ?Sized + 'static,
{
    thread::spawn(move || {
        let (mut tx, mut rx) = endpoint.split();
        loop {
            let frame = match rx.recv_frame(None) {
                Ok(f) => f,
                Err(TransportError::Disconnected) => break,
                Err(e) => {
                    warn!("dropping donor connection: {e}");
                    break;
                }
            };
            let reply = service.lock().unwrap().dispatch(&frame);
            if let Some(reply) = reply {
                if tx.send_frame(&reply).is_err() {
                    break;
                }
            }
        }
        tx.close();
    })
}

/// Accepts TCP connections until `stop` is raised, serving each on its own
/// thread against the shared service.
pub fn serve_tcp<S>(
    listener: TcpListener,
    service: Arc<Mutex<S>>,
    latency: LatencyModel,
    stop: Arc<AtomicBool>,
) -> io::Result<JoinHandle<()>>
where
    S: DonorService + ?Sized + 'static,
{
    listener.set_nonblocking(true)?;
    Ok(thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    debug!("donor connection from {peer}");
                    if let Err(e) = stream.set_nonblocking(false) {
                        warn!("rejecting {peer}: {e}");
                        continue;
                    }
                    match tcp_endpoint(stream, latency) {
                        Ok(ep) => {
                            serve_connection(service.clone(), ep);
                        }
                        Err(e) => warn!("rejecting {peer}: {e}"),
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    warn!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(10));
                }
            }
        }
    }))
}

/// Frame helpers shared by clients that talk to a donor directly.
pub fn store_frame(header: Command, page: Page) -> Frame {
    Frame::new(wire::encode_store_packet(&PagePacket { header, page })).expect("fixed-size packet")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{decode_completion, decode_load_response, encode_command};

    const A: MachineId = MachineId(3);
    const B: MachineId = MachineId(4);

    fn donor(hbm: u64, dram: u64) -> DonorEngine {
        let mut cfg = DonorConfig::new(100, hbm, dram);
        cfg.metadata_reserve_pages = Some(0);
        DonorEngine::new(cfg, 1).unwrap()
    }

    fn page(b: u8) -> [u8; PAGE_SIZE] {
        [b; PAGE_SIZE]
    }

    #[test]
    fn config_defaults() {
        let cfg = DonorConfig::new(1, 1024, 1024);
        assert_eq!(cfg.metadata_pages(), 1);
        assert_eq!(DonorConfig::new(1, 4096, 4096 * 3 + 1).metadata_pages(), 5);
        assert!(DonorConfig::new(0, 1, 1).validate().is_err());
        assert!(DonorConfig::new(0xFF, 1, 1).validate().is_err());
        let e = DonorEngine::new(cfg.clone(), 0).unwrap();
        assert_eq!(e.free_count(Tier::DonorHbm), 1023);
        assert_eq!(e.free_count(Tier::DonorDram), 1024);
    }

    #[test]
    fn store_lands_in_requested_tier_range() {
        let mut cfg = DonorConfig::new(100, 64, 64);
        cfg.metadata_reserve_pages = Some(4);
        let mut d = DonorEngine::new(cfg.clone(), 1).unwrap();
        for _ in 0..60 {
            let c = d.handle_store(A, Tier::DonorHbm, &page(1));
            assert_eq!(c.status, Status::Ok);
            assert_eq!(c.tier, Tier::DonorHbm);
            assert!(c.remote_addr >= 4 * 4096 && c.remote_addr < 64 * 4096);
        }
        // HBM is now full; the next store spills
        let c = d.handle_store(A, Tier::DonorHbm, &page(1));
        assert_eq!((c.status, c.tier), (Status::Ok, Tier::DonorDram));
        assert!(c.remote_addr >= cfg.dram_base);
        assert_eq!(d.audit().stores_spilled, 1);
    }

    #[test]
    fn dram_spills_into_hbm_and_both_exhaust() {
        let mut d = donor(1, 1);
        assert_eq!(d.handle_store(A, Tier::DonorDram, &page(1)).tier, Tier::DonorDram);
        assert_eq!(d.handle_store(A, Tier::DonorDram, &page(1)).tier, Tier::DonorHbm);
        assert_eq!(d.handle_store(A, Tier::DonorDram, &page(1)).status, Status::Exhausted);
        assert_eq!(d.handle_store(A, Tier::DoneeHbm, &page(1)).status, Status::Invalid);
    }

    #[test]
    fn load_checks_ownership() {
        let mut d = donor(8, 8);
        let c = d.handle_store(A, Tier::DonorHbm, &page(0xAB));
        assert_eq!(&d.handle_load(A, c.tier, c.remote_addr).unwrap()[..], &page(0xAB)[..]);
        // load keeps the page allocated
        assert_eq!(d.owner_of(c.tier, c.remote_addr).unwrap(), A);
        assert_eq!(d.handle_load(B, c.tier, c.remote_addr).unwrap_err(), Status::PermissionDenied);
        let free = (0..8).map(|i| i * 4096).find(|&a| a != c.remote_addr).unwrap();
        assert_eq!(d.handle_load(A, Tier::DonorHbm, free).unwrap_err(), Status::Invalid);
        assert_eq!(d.handle_load(A, Tier::DonorHbm, 1 << 30).unwrap_err(), Status::Invalid);
    }

    #[test]
    fn invalidations_are_audited() {
        let mut d = donor(8, 8);
        let c = d.handle_store(A, Tier::DonorHbm, &page(1));
        d.handle_invalidate_page(B, c.tier, c.remote_addr);
        assert_eq!(d.owner_of(c.tier, c.remote_addr).unwrap(), A);
        assert_eq!(d.audit().denied_invalidations, 1);
        d.handle_invalidate_page(A, c.tier, c.remote_addr);
        assert_eq!(d.owner_of(c.tier, c.remote_addr).unwrap(), MachineId::NONE);
        assert_eq!(d.audit().invalidations, 1);
        d.handle_invalidate_page(A, c.tier, c.remote_addr);
        assert_eq!(d.audit().spurious_invalidations, 1);
        assert!(d.peek_page(c.tier, c.remote_addr).is_none());
    }

    #[test]
    fn invalidate_area_frees_only_the_requester() {
        let mut d = donor(16, 16);
        let base = d.total_free();
        for _ in 0..5 {
            d.handle_store(A, Tier::DonorHbm, &page(1));
        }
        let theirs: Vec<_> = (0..3).map(|_| d.handle_store(B, Tier::DonorDram, &page(2))).collect();
        let before = d.total_free();
        d.handle_invalidate_area(A);
        assert_eq!(d.total_free(), before + 5);
        for c in &theirs {
            assert_eq!(d.owner_of(c.tier, c.remote_addr).unwrap(), B);
        }
        d.handle_invalidate_area(A);
        d.handle_invalidate_area(MachineId(77));
        assert_eq!(d.total_free(), base - 3);
    }

    #[test]
    fn dispatch_over_wire() {
        let mut d = donor(8, 8);
        let header = Command {
            src_mid: A.0,
            dst_mid: 100,
            target_tier: Tier::DonorHbm,
            request_token: 0xfeed,
            ..Command::new(Opcode::Store)
        };
        let mut p = zero_page();
        p[0] = 9;
        let reply = d.dispatch(&store_frame(header, p.clone())).unwrap();
        assert_eq!(reply.kind(), FrameKind::Command64);
        let c = decode_completion(reply.bytes()).unwrap();
        assert_eq!((c.status, c.request_token), (Status::Ok, 0xfeed));

        let load = Command {
            src_mid: A.0,
            dst_mid: 100,
            tier: c.tier,
            remote_addr: c.remote_addr,
            request_token: 0xbeef,
            ..Command::new(Opcode::Load)
        };
        let reply = d.dispatch(&Frame::word(encode_command(&load))).unwrap();
        assert_eq!(reply.bytes().len(), 4160);
        let pkt = decode_load_response(reply.bytes()).unwrap();
        assert_eq!(pkt.header.request_token, 0xbeef);
        assert_eq!(pkt.page, p);

        let mut bad = [0u8; 64];
        bad[0] = 0xEE;
        assert!(d.dispatch(&Frame::word(bad)).is_none());
        assert_eq!(d.audit().malformed_frames, 1);

        let misrouted = Command { dst_mid: 5, ..load };
        assert!(d.dispatch(&Frame::word(encode_command(&misrouted))).is_none());
        assert_eq!(d.audit().misrouted_frames, 1);

        let inv = Command {
            opcode: Opcode::InvalidatePage,
            ..load
        };
        assert!(d.dispatch(&Frame::word(encode_command(&inv))).is_none());
        assert_eq!(d.total_free(), 16);
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut cfg = DonorConfig::new(100, 32, 16);
        cfg.metadata_reserve_pages = Some(2);
        let mut d = DonorEngine::new(cfg, 9).unwrap();
        let stored: Vec<_> = (0..10u8)
            .map(|i| (i, d.handle_store(MachineId(1 + i % 3), Tier::DonorHbm, &page(i))))
            .collect();
        let mut buf = Vec::new();
        d.write_snapshot(&mut buf).unwrap();
        let mut r = DonorEngine::read_snapshot(&mut buf.as_slice(), 9).unwrap();
        assert_eq!(r.config(), d.config());
        assert_eq!(r.total_free(), d.total_free());
        for (i, c) in stored {
            let owner = MachineId(1 + i % 3);
            assert_eq!(&r.handle_load(owner, c.tier, c.remote_addr).unwrap()[..], &page(i)[..]);
        }
        buf[0] = b'X';
        assert!(DonorEngine::read_snapshot(&mut buf.as_slice(), 0).is_err());
    }
}
