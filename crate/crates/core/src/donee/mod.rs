//! Donee-side engine.
//!
//! Exposes store / load / invalidate-page / invalidate-area over a flat
//! translation table indexed by swap offset. Every page is sealed before it
//! is placed anywhere, including the local tiers, and opened (and
//! authenticated against the tag kept in the table) on load.
//!
//! Operations on the same offset run strictly in arrival order: each caller
//! takes a ticket on the entry and waits for its turn, and the entry's
//! `store_pending` / `load_pending` flags record which operation currently
//! holds it. Operations on distinct offsets run in parallel.

mod link;

pub use link::{DonorLink, LoadReply};

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant};

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{AllocError, MachineId, PageAllocator};
use crate::pagecrypt::{CryptoError, Mac, NonceBytes, PageCipher, PageKey, SwapOffset, NONCE_SIZE, TAG_SIZE};
use crate::transport::TransportError;
use crate::wire::{zero_page, Page, Status, Tier, PAGE_SIZE};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DoneeError {
    #[error("offset {0} has no stored page")]
    NotPresent(u64),
    #[error("offset {0} failed authentication; engine halted")]
    FatalIntegrity(u64),
    #[error("donor refused load of offset {offset} ({status:?}); engine halted")]
    DonorDenied { offset: u64, status: Status },
    #[error("engine is halted")]
    EngineHalted,
    #[error("no tier could take offset {0}")]
    AllTiersExhausted(u64),
    #[error("offset {0} is outside the swap space")]
    OffsetOutOfRange(u64),
    #[error("page must be {PAGE_SIZE} bytes, got {0}")]
    BadLength(usize),
    #[error("timed out waiting for offset {0}")]
    Timeout(u64),
    #[error("donor transport: {0}")]
    Transport(#[from] TransportError),
    #[error("bad donee configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Crypto(CryptoError),
}

/// Where stores go first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Placement {
    /// Local tier, then donor HBM, donor DRAM, local swap.
    #[default]
    Auto,
    /// Try this tier first, then fall back in the default order.
    Pin(Tier),
}

impl TryFrom<String> for Placement {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Placement::Auto);
        }
        Tier::from_name(&s)
            .map(Placement::Pin)
            .ok_or_else(|| format!("unknown placement {s:?}"))
    }
}

impl From<Placement> for String {
    fn from(p: Placement) -> String {
        match p {
            Placement::Auto => "auto".into(),
            Placement::Pin(t) => t.name().into(),
        }
    }
}

const DEFAULT_ORDER: [Tier; 4] = [Tier::DoneeHbm, Tier::DonorHbm, Tier::DonorDram, Tier::LocalSwap];

/// Placement order for the next store.
///
/// The local tier is skipped when it has neither free pages nor cached
/// blocks.
pub fn tier_policy(placement: Placement, local_free: u64, cached_blocks: usize) -> Vec<Tier> {
    let local_ok = local_free > 0 || cached_blocks > 0;
    let first = match placement {
        Placement::Auto => None,
        Placement::Pin(t) => Some(t),
    };
    first
        .into_iter()
        .chain(DEFAULT_ORDER.into_iter().filter(|&t| Some(t) != first))
        .filter(|&t| t != Tier::DoneeHbm || local_ok)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoneeConfig {
    pub mid: u8,
    pub donor_mid: u8,
    pub swap_offsets: u64,
    pub local_pages: u64,
    #[serde(default)]
    pub local_swap_pages: u64,
    #[serde(default = "default_cache_depth")]
    pub cache_depth: usize,
    #[serde(default)]
    pub placement: Placement,
    /// Upper bound on waiting for an offset's turn or a donor response.
    #[serde(default = "default_timeout_ms")]
    pub op_timeout_ms: u64,
}

fn default_cache_depth() -> usize {
    8
}

fn default_timeout_ms() -> u64 {
    10_000
}

impl DoneeConfig {
    pub fn new(mid: u8, donor_mid: u8, swap_offsets: u64, local_pages: u64, local_swap_pages: u64) -> Self {
        DoneeConfig {
            mid,
            donor_mid,
            swap_offsets,
            local_pages,
            local_swap_pages,
            cache_depth: default_cache_depth(),
            placement: Placement::Auto,
            op_timeout_ms: default_timeout_ms(),
        }
    }

    pub fn op_timeout(&self) -> Duration {
        Duration::from_millis(self.op_timeout_ms)
    }

    pub fn validate(&self) -> Result<(), DoneeError> {
        if self.swap_offsets == 0 {
            return Err(DoneeError::BadConfig("swap_offsets must be at least 1".into()));
        }
        if !MachineId(self.mid).is_assignable() {
            return Err(DoneeError::BadConfig(format!("mid {} is reserved", self.mid)));
        }
        if let Placement::Pin(t) = self.placement {
            if t == Tier::DoneeHbm && self.local_pages == 0 {
                return Err(DoneeError::BadConfig("pinned to an empty local tier".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranslationEntry {
    pub valid: bool,
    pub tier: Tier,
    pub remote_address: u64,
    pub store_pending: bool,
    pub load_pending: bool,
    pub mac: Mac,
    pub nonce: NonceBytes,
}

impl TranslationEntry {
    pub const EMPTY: TranslationEntry = TranslationEntry {
        valid: false,
        tier: Tier::DoneeHbm,
        remote_address: 0,
        store_pending: false,
        load_pending: false,
        mac: [0; TAG_SIZE],
        nonce: [0; NONCE_SIZE],
    };

    fn location(&self) -> Option<(Tier, u64)> {
        self.valid.then_some((self.tier, self.remote_address))
    }
}

struct SlotState {
    entry: TranslationEntry,
    next_ticket: u64,
    serving: u64,
    abandoned: Vec<u64>,
}

struct Slot {
    state: Mutex<SlotState>,
    turn: Condvar,
}

impl Slot {
    fn new() -> Self {
        Slot {
            state: Mutex::new(SlotState {
                entry: TranslationEntry::EMPTY,
                next_ticket: 0,
                serving: 0,
                abandoned: Vec::new(),
            }),
            turn: Condvar::new(),
        }
    }
}

/// Holds an offset's turn; dropping it lets the next ticket in.
struct Turn<'a> {
    slot: &'a Slot,
}

impl Turn<'_> {
    fn state(&self) -> MutexGuard<'_, SlotState> {
        self.slot.state.lock().unwrap()
    }
}

impl Drop for Turn<'_> {
    fn drop(&mut self) {
        let mut s = self.slot.state.lock().unwrap();
        s.entry.store_pending = false;
        s.entry.load_pending = false;
        s.serving += 1;
        loop {
            let serving = s.serving;
            match s.abandoned.iter().position(|&t| t == serving) {
                Some(i) => {
                    s.abandoned.swap_remove(i);
                    s.serving += 1;
                }
                None => break,
            }
        }
        drop(s);
        self.slot.turn.notify_all();
    }
}

struct PageStore {
    alloc: PageAllocator,
    bytes: Vec<u8>,
}

impl PageStore {
    fn new(capacity: u64) -> Result<Self, AllocError> {
        Ok(PageStore {
            alloc: PageAllocator::new(capacity, 0)?,
            bytes: vec![0u8; capacity as usize * PAGE_SIZE],
        })
    }

    fn range(addr: u64) -> std::ops::Range<usize> {
        addr as usize..addr as usize + PAGE_SIZE
    }

    fn write(&mut self, addr: u64, page: &[u8]) {
        self.bytes[Self::range(addr)].copy_from_slice(page);
    }

    fn read(&self, addr: u64) -> &[u8] {
        &self.bytes[Self::range(addr)]
    }
}

struct LocalTiers {
    hbm: PageStore,
    cache: VecDeque<u64>,
    swap: PageStore,
    rng: ChaCha8Rng,
}

/// Counters describing what the engine has done so far.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoneeStats {
    pub stores: u64,
    pub loads: u64,
    pub invalidations: u64,
    pub area_invalidations: u64,
    pub lost_invalidations: u64,
}

#[derive(Default)]
struct StatCounters {
    stores: AtomicU64,
    loads: AtomicU64,
    invalidations: AtomicU64,
    area_invalidations: AtomicU64,
    lost_invalidations: AtomicU64,
}

pub struct DoneeEngine {
    config: DoneeConfig,
    me: MachineId,
    table: Vec<Slot>,
    cipher: PageCipher,
    local: Mutex<LocalTiers>,
    link: Option<DonorLink>,
    area: RwLock<()>,
    halted: AtomicBool,
    stats: StatCounters,
}

impl std::fmt::Debug for DoneeEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DoneeEngine")
            .field("config", &self.config)
            .field("halted", &self.is_halted())
            .finish_non_exhaustive()
    }
}

/// Where a page sits, as decided by a successful placement.
type Location = (Tier, u64);

impl DoneeEngine {
    /// `link` may be `None` for a donee without a donor; donor tiers are
    /// then skipped.
    pub fn new(config: DoneeConfig, key: &PageKey, link: Option<DonorLink>, seed: u64) -> Result<Self, DoneeError> {
        config.validate()?;
        let alloc_err = |e: AllocError| DoneeError::BadConfig(e.to_string());
        let local = LocalTiers {
            hbm: PageStore::new(config.local_pages).map_err(alloc_err)?,
            cache: VecDeque::with_capacity(config.cache_depth),
            swap: PageStore::new(config.local_swap_pages).map_err(alloc_err)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        Ok(DoneeEngine {
            me: MachineId(config.mid),
            table: (0..config.swap_offsets).map(|_| Slot::new()).collect(),
            cipher: PageCipher::new(key).map_err(DoneeError::Crypto)?,
            local: Mutex::new(local),
            link,
            area: RwLock::new(()),
            halted: AtomicBool::new(false),
            stats: StatCounters::default(),
            config,
        })
    }

    pub fn config(&self) -> &DoneeConfig {
        &self.config
    }

    pub fn link(&self) -> Option<&DonorLink> {
        self.link.as_ref()
    }

    pub fn is_halted(&self) -> bool {
        self.halted.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> DoneeStats {
        let s = &self.stats;
        DoneeStats {
            stores: s.stores.load(Ordering::Relaxed),
            loads: s.loads.load(Ordering::Relaxed),
            invalidations: s.invalidations.load(Ordering::Relaxed),
            area_invalidations: s.area_invalidations.load(Ordering::Relaxed),
            lost_invalidations: s.lost_invalidations.load(Ordering::Relaxed),
        }
    }

    /// Snapshot of one translation entry.
    pub fn entry(&self, offset: u64) -> Option<TranslationEntry> {
        self.table.get(offset as usize).map(|s| s.state.lock().unwrap().entry)
    }

    /// Free pages in the local tier, counting cached blocks as free.
    pub fn local_free(&self) -> u64 {
        let l = self.local.lock().unwrap();
        l.hbm.alloc.free_count() + l.cache.len() as u64
    }

    pub fn local_swap_free(&self) -> u64 {
        self.local.lock().unwrap().swap.alloc.free_count()
    }

    /// Fault-injection hook over the local tiers' stored ciphertext.
    pub fn tamper_local(&self, tier: Tier, addr: u64, f: impl FnOnce(&mut [u8])) -> bool {
        let mut l = self.local.lock().unwrap();
        let store = match tier {
            Tier::DoneeHbm => &mut l.hbm,
            Tier::LocalSwap => &mut l.swap,
            _ => return false,
        };
        match store.alloc.index_of(addr) {
            Ok(idx) if store.alloc.is_allocated_index(idx) => {
                f(&mut store.bytes[PageStore::range(addr)]);
                true
            }
            _ => false,
        }
    }

    fn check_live(&self) -> Result<(), DoneeError> {
        if self.is_halted() {
            Err(DoneeError::EngineHalted)
        } else {
            Ok(())
        }
    }

    fn halt(&self) {
        self.halted.store(true, Ordering::SeqCst);
    }

    fn slot(&self, offset: u64) -> Result<&Slot, DoneeError> {
        self.table
            .get(usize::try_from(offset).unwrap_or(usize::MAX))
            .ok_or(DoneeError::OffsetOutOfRange(offset))
    }

    /// Waits for this caller's turn on `offset`, in arrival order.
    fn acquire(&self, offset: u64) -> Result<Turn<'_>, DoneeError> {
        let slot = self.slot(offset)?;
        let deadline = Instant::now() + self.config.op_timeout();
        let mut s = slot.state.lock().unwrap();
        let ticket = s.next_ticket;
        s.next_ticket += 1;
        while s.serving != ticket {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                s.abandoned.push(ticket);
                return Err(DoneeError::Timeout(offset));
            }
            s = slot.turn.wait_timeout(s, left).unwrap().0;
        }
        debug_assert!(!s.entry.store_pending && !s.entry.load_pending);
        Ok(Turn { slot })
    }

    fn take_local_block(&self) -> Option<u64> {
        let mut l = self.local.lock().unwrap();
        let l = &mut *l;
        if l.cache.is_empty() {
            while l.cache.len() < self.config.cache_depth.max(1) {
                match l.hbm.alloc.alloc_random(self.me, &mut l.rng) {
                    Ok(addr) => l.cache.push_back(addr),
                    Err(_) => break,
                }
            }
        }
        l.cache.pop_front()
    }

    fn place(&self, sealed: &Page) -> Result<Option<Location>, DoneeError> {
        let order = {
            let l = self.local.lock().unwrap();
            tier_policy(self.config.placement, l.hbm.alloc.free_count(), l.cache.len())
        };
        for tier in order {
            match tier {
                Tier::DoneeHbm => {
                    if let Some(addr) = self.take_local_block() {
                        self.local.lock().unwrap().hbm.write(addr, &sealed[..]);
                        return Ok(Some((tier, addr)));
                    }
                }
                Tier::LocalSwap => {
                    let mut l = self.local.lock().unwrap();
                    let l = &mut *l;
                    if let Ok(addr) = l.swap.alloc.alloc_random(self.me, &mut l.rng) {
                        l.swap.write(addr, &sealed[..]);
                        return Ok(Some((tier, addr)));
                    }
                }
                Tier::DonorHbm | Tier::DonorDram => {
                    let Some(link) = &self.link else { continue };
                    let c = link.store(tier, sealed)?;
                    match c.status {
                        Status::Ok if c.tier.is_donor() => return Ok(Some((c.tier, c.remote_addr))),
                        Status::Exhausted => {}
                        _ => warn!("donor answered store with {c:?}"),
                    }
                }
            }
        }
        Ok(None)
    }

    /// Releases a page wherever it lives. Donor releases are fire-and-forget.
    fn release(&self, (tier, addr): Location) {
        match tier {
            Tier::DoneeHbm | Tier::LocalSwap => {
                let mut l = self.local.lock().unwrap();
                let store = if tier == Tier::DoneeHbm { &mut l.hbm } else { &mut l.swap };
                if let Err(e) = store.alloc.free_page(addr, self.me) {
                    warn!("releasing {tier}@{addr:#x}: {e}");
                }
            }
            Tier::DonorHbm | Tier::DonorDram => {
                let sent = self.link.as_ref().map(|l| l.invalidate_page(tier, addr));
                if !matches!(sent, Some(Ok(()))) {
                    self.stats.lost_invalidations.fetch_add(1, Ordering::Relaxed);
                    warn!("could not invalidate {tier}@{addr:#x}");
                }
            }
        }
    }

    /// Seals `page` and stores it under `offset`, returning the tier that
    /// took it. A page already stored there is released only after the new
    /// copy is in place.
    pub fn store(&self, offset: u64, page: &[u8]) -> Result<Tier, DoneeError> {
        if page.len() != PAGE_SIZE {
            return Err(DoneeError::BadLength(page.len()));
        }
        self.check_live()?;
        let _area = self.area.read().unwrap();
        let turn = self.acquire(offset)?;
        self.check_live()?;
        let previous = {
            let mut s = turn.state();
            s.entry.store_pending = true;
            s.entry.location()
        };
        let sealed = self.cipher.seal(page, SwapOffset(offset)).map_err(DoneeError::Crypto)?;
        let Some((tier, addr)) = self.place(&sealed.ciphertext)? else {
            return Err(DoneeError::AllTiersExhausted(offset));
        };
        {
            let mut s = turn.state();
            s.entry = TranslationEntry {
                valid: true,
                tier,
                remote_address: addr,
                store_pending: true,
                load_pending: false,
                mac: sealed.mac,
                nonce: sealed.nonce,
            };
        }
        if let Some(old) = previous {
            self.release(old);
        }
        self.stats.stores.fetch_add(1, Ordering::Relaxed);
        Ok(tier)
    }

    /// Fetches, authenticates and decrypts the page stored under `offset`.
    /// The entry stays valid.
    pub fn load(&self, offset: u64) -> Result<Page, DoneeError> {
        self.check_live()?;
        let _area = self.area.read().unwrap();
        let turn = self.acquire(offset)?;
        self.check_live()?;
        let entry = {
            let mut s = turn.state();
            if !s.entry.valid {
                return Err(DoneeError::NotPresent(offset));
            }
            s.entry.load_pending = true;
            s.entry
        };
        let ciphertext: Page = match entry.tier {
            Tier::DoneeHbm | Tier::LocalSwap => {
                let l = self.local.lock().unwrap();
                let store = if entry.tier == Tier::DoneeHbm { &l.hbm } else { &l.swap };
                let mut p = zero_page();
                p.copy_from_slice(store.read(entry.remote_address));
                p
            }
            Tier::DonorHbm | Tier::DonorDram => {
                let link = self.link.as_ref().ok_or(TransportError::Disconnected)?;
                match link.load(entry.tier, entry.remote_address)? {
                    LoadReply::Page(p) => p,
                    LoadReply::Refused(status) => {
                        self.halt();
                        return Err(DoneeError::DonorDenied { offset, status });
                    }
                }
            }
        };
        match self
            .cipher
            .open_parts(&ciphertext[..], &entry.mac, &entry.nonce, SwapOffset(offset))
        {
            Ok(page) => {
                self.stats.loads.fetch_add(1, Ordering::Relaxed);
                Ok(page)
            }
            Err(CryptoError::IntegrityViolation) => {
                self.halt();
                Err(DoneeError::FatalIntegrity(offset))
            }
            Err(e) => Err(DoneeError::Crypto(e)),
        }
    }

    /// Drops the page stored under `offset`. A no-op for empty entries.
    pub fn invalidate_page(&self, offset: u64) -> Result<(), DoneeError> {
        self.check_live()?;
        let _area = self.area.read().unwrap();
        let turn = self.acquire(offset)?;
        self.check_live()?;
        let old = {
            let mut s = turn.state();
            let old = s.entry.location();
            s.entry = TranslationEntry::EMPTY;
            old
        };
        if let Some(loc) = old {
            self.release(loc);
            self.stats.invalidations.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    /// Drops every stored page, locally and at the donor. Waits for all
    /// in-flight operations to finish first.
    pub fn invalidate_area(&self) -> Result<(), DoneeError> {
        self.check_live()?;
        let _area = self.area.write().unwrap();
        self.check_live()?;
        if let Some(link) = &self.link {
            link.invalidate_area()?;
        }
        {
            let mut l = self.local.lock().unwrap();
            l.cache.clear();
            l.hbm.alloc.free_all(self.me);
            l.swap.alloc.free_all(self.me);
        }
        for slot in &self.table {
            slot.state.lock().unwrap().entry = TranslationEntry::EMPTY;
        }
        self.stats.area_invalidations.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Number of valid entries per tier.
    pub fn tier_occupancy(&self) -> [u64; 4] {
        let mut out = [0u64; 4];
        for slot in &self.table {
            let e = slot.state.lock().unwrap().entry;
            if e.valid {
                out[e.tier as usize] += 1;
            }
        }
        out
    }
}
