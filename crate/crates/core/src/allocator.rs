//! 4 KiB page allocator with per-page ownership.
//!
//! The bitmap is the authoritative allocation record. A dense array of free
//! page indices (with a reverse index for O(1) removal) sits next to it so a
//! uniformly random free page can be drawn in constant time regardless of
//! how full the tier is.

use rand::Rng;
use thiserror::Error;

use crate::wire::{is_page_aligned, PAGE_SIZE};

const PAGE: u64 = PAGE_SIZE as u64;
const NOT_FREE: u32 = u32::MAX;

/// 8-bit machine identifier. `0` means "no owner"; `0xFF` marks pages
/// reserved for allocator metadata. Neither can own allocations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MachineId(pub u8);

impl MachineId {
    pub const NONE: MachineId = MachineId(0);
    pub const METADATA: MachineId = MachineId(0xFF);

    pub fn is_assignable(self) -> bool {
        self != Self::NONE && self != Self::METADATA
    }
}

impl std::fmt::Display for MachineId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "mid{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocError {
    #[error("address {0:#x} is not page aligned")]
    BadAlignment(u64),
    #[error("no free pages")]
    Exhausted,
    #[error("page {0:#x} is not allocated")]
    NotAllocated(u64),
    #[error("page {addr:#x} is owned by {owner}, not {requester}")]
    PermissionDenied {
        addr: u64,
        owner: MachineId,
        requester: MachineId,
    },
    #[error("address {0:#x} is outside the tier")]
    OutOfRange(u64),
    #[error("allocator already handed out pages")]
    AlreadyActive,
    #[error("{0} cannot own pages")]
    InvalidOwner(MachineId),
    #[error("capacity {0} pages is too large")]
    TooLarge(u64),
}

#[derive(Debug, Clone)]
pub struct PageAllocator {
    base_addr: u64,
    capacity: u32,
    bitmap: Vec<u64>,
    owners: Vec<MachineId>,
    free_list: Vec<u32>,
    // position of each page in `free_list`, NOT_FREE when allocated
    free_pos: Vec<u32>,
    reserved: u32,
    active: bool,
}

impl PageAllocator {
    pub fn new(capacity_pages: u64, base_addr: u64) -> Result<Self, AllocError> {
        if !is_page_aligned(base_addr) {
            return Err(AllocError::BadAlignment(base_addr));
        }
        if capacity_pages >= NOT_FREE as u64 || base_addr.checked_add(capacity_pages * PAGE).is_none() {
            return Err(AllocError::TooLarge(capacity_pages));
        }
        let cap = capacity_pages as u32;
        Ok(PageAllocator {
            base_addr,
            capacity: cap,
            bitmap: vec![0; (cap as usize).div_ceil(64)],
            owners: vec![MachineId::NONE; cap as usize],
            free_list: (0..cap).collect(),
            free_pos: (0..cap).collect(),
            reserved: 0,
            active: false,
        })
    }

    /// Rebuilds an allocator from a per-page owner array. Pages owned by
    /// [`MachineId::METADATA`] must form a prefix.
    pub fn from_owners(base_addr: u64, owners: &[MachineId]) -> Result<Self, AllocError> {
        let mut a = Self::new(owners.len() as u64, base_addr)?;
        let reserved = owners.iter().take_while(|&&o| o == MachineId::METADATA).count();
        a.reserve_block(reserved as u64)?;
        for (i, &o) in owners.iter().enumerate().skip(reserved) {
            if o == MachineId::NONE {
                continue;
            }
            if !o.is_assignable() {
                return Err(AllocError::InvalidOwner(o));
            }
            a.take(i as u32, o);
        }
        a.active = owners.iter().skip(reserved).any(|&o| o != MachineId::NONE);
        Ok(a)
    }

    pub fn capacity_pages(&self) -> u64 {
        self.capacity as u64
    }

    pub fn base_addr(&self) -> u64 {
        self.base_addr
    }

    pub fn free_count(&self) -> u64 {
        self.free_list.len() as u64
    }

    pub fn allocated_count(&self) -> u64 {
        self.capacity as u64 - self.free_count()
    }

    pub fn reserved_pages(&self) -> u64 {
        self.reserved as u64
    }

    pub fn owners(&self) -> &[MachineId] {
        &self.owners
    }

    pub fn addr_of(&self, index: u64) -> u64 {
        self.base_addr + index * PAGE
    }

    /// Page index of `addr`, validating alignment and range.
    pub fn index_of(&self, addr: u64) -> Result<u64, AllocError> {
        if !is_page_aligned(addr) {
            return Err(AllocError::BadAlignment(addr));
        }
        if addr < self.base_addr {
            return Err(AllocError::OutOfRange(addr));
        }
        let idx = (addr - self.base_addr) / PAGE;
        if idx >= self.capacity as u64 {
            return Err(AllocError::OutOfRange(addr));
        }
        Ok(idx)
    }

    pub fn is_allocated_index(&self, idx: u64) -> bool {
        self.bitmap[(idx / 64) as usize] & (1 << (idx % 64)) != 0
    }

    fn set_bit(&mut self, idx: u32, on: bool) {
        let word = &mut self.bitmap[idx as usize / 64];
        let mask = 1u64 << (idx % 64);
        if on {
            *word |= mask;
        } else {
            *word &= !mask;
        }
    }

    fn take(&mut self, idx: u32, owner: MachineId) {
        let pos = self.free_pos[idx as usize];
        debug_assert_ne!(pos, NOT_FREE);
        self.free_list.swap_remove(pos as usize);
        if let Some(&moved) = self.free_list.get(pos as usize) {
            self.free_pos[moved as usize] = pos;
        }
        self.free_pos[idx as usize] = NOT_FREE;
        self.set_bit(idx, true);
        self.owners[idx as usize] = owner;
    }

    fn release(&mut self, idx: u32) {
        self.free_pos[idx as usize] = self.free_list.len() as u32;
        self.free_list.push(idx);
        self.set_bit(idx, false);
        self.owners[idx as usize] = MachineId::NONE;
    }

    /// Allocates a page chosen uniformly at random among the free pages.
    pub fn alloc_random<R: Rng + ?Sized>(&mut self, owner: MachineId, rng: &mut R) -> Result<u64, AllocError> {
        if !owner.is_assignable() {
            return Err(AllocError::InvalidOwner(owner));
        }
        if self.free_list.is_empty() {
            return Err(AllocError::Exhausted);
        }
        let idx = self.free_list[rng.random_range(0..self.free_list.len())];
        self.take(idx, owner);
        self.active = true;
        Ok(self.addr_of(idx as u64))
    }

    /// Allocates the free page with the lowest address.
    ///
    /// Predictable placement; only for test doubles that model a donor
    /// without access-pattern obfuscation.
    pub fn alloc_lowest(&mut self, owner: MachineId) -> Result<u64, AllocError> {
        if !owner.is_assignable() {
            return Err(AllocError::InvalidOwner(owner));
        }
        let idx = *self.free_list.iter().min().ok_or(AllocError::Exhausted)?;
        self.take(idx, owner);
        self.active = true;
        Ok(self.addr_of(idx as u64))
    }

    pub fn free_page(&mut self, addr: u64, requester: MachineId) -> Result<(), AllocError> {
        let idx = self.index_of(addr)?;
        let owner = self.owners[idx as usize];
        if owner == MachineId::NONE {
            return Err(AllocError::NotAllocated(addr));
        }
        if owner != requester || !requester.is_assignable() {
            return Err(AllocError::PermissionDenied {
                addr,
                owner,
                requester,
            });
        }
        self.release(idx as u32);
        Ok(())
    }

    pub fn owner_of(&self, addr: u64) -> Result<MachineId, AllocError> {
        let idx = self.index_of(addr)?;
        Ok(self.owners[idx as usize])
    }

    /// Frees every page owned by `owner`, returning how many were freed.
    pub fn free_all(&mut self, owner: MachineId) -> u64 {
        if !owner.is_assignable() {
            return 0;
        }
        let mut freed = 0;
        for idx in self.reserved..self.capacity {
            if self.owners[idx as usize] == owner {
                self.release(idx);
                freed += 1;
            }
        }
        freed
    }

    /// Permanently removes the first `n` pages from circulation.
    pub fn reserve_block(&mut self, n: u64) -> Result<(), AllocError> {
        if self.active || self.reserved > 0 {
            return Err(AllocError::AlreadyActive);
        }
        if n > self.capacity as u64 {
            return Err(AllocError::OutOfRange(self.addr_of(n)));
        }
        for idx in 0..n as u32 {
            self.take(idx, MachineId::METADATA);
        }
        self.reserved = n as u32;
        Ok(())
    }

    /// Checks the internal invariants; used by tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        let popcount: u64 = self.bitmap.iter().map(|w| w.count_ones() as u64).sum();
        if self.free_count() != self.capacity as u64 - popcount {
            return Err(format!("free_count {} != capacity - popcount {}", self.free_count(), popcount));
        }
        for idx in 0..self.capacity as u64 {
            let alloc = self.is_allocated_index(idx);
            let owned = self.owners[idx as usize] != MachineId::NONE;
            if alloc != owned {
                return Err(format!("page {idx}: allocated={alloc} owner={:?}", self.owners[idx as usize]));
            }
            let pos = self.free_pos[idx as usize];
            if alloc != (pos == NOT_FREE) {
                return Err(format!("page {idx}: free index out of sync"));
            }
            if !alloc && self.free_list[pos as usize] != idx as u32 {
                return Err(format!("page {idx}: free list position mismatch"));
            }
        }
        Ok(())
    }
}
