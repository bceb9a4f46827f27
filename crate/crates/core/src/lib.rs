//! Sealed far-memory swap.
//!
//! A donee engine seals 4 KiB pages with AES-GCM and places them across a
//! local tier, a remote donor's HBM and DRAM tiers, and a local swap store
//! of last resort. The donor engine allocates every stored page at a fresh
//! uniformly random location and checks page ownership on each load.

pub mod allocator;
pub mod donee;
pub mod donor;
pub mod harness;
pub mod pagecrypt;
pub mod transport;
pub mod wire;

pub use allocator::{AllocError, MachineId, PageAllocator};
pub use donee::{tier_policy, DoneeConfig, DoneeEngine, DoneeError, DonorLink, Placement, TranslationEntry};
pub use donor::{DonorAudit, DonorConfig, DonorEngine, DonorService};
pub use pagecrypt::{generate_key, PageCipher, PageKey, SealedPage, SwapOffset};
pub use transport::{loopback_pair, Endpoint, Frame, FrameKind, LatencyModel, TransportError};
pub use wire::{Command, Completion, Opcode, Page, Status, Tier, PAGE_SIZE};
