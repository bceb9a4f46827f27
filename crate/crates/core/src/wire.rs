//! Fixed-size messages exchanged between the donee and donor engines.
//!
//! Every message is either a 64-byte word or a 4160-byte packet (one header
//! word followed by the 64 words of a 4 KiB page). All integers are
//! little-endian.
//!
//! Command word layout:
//!
//! ```text
//! offset  size  field
//!      0     1  opcode          (0 Store, 1 Load, 2 InvalidatePage,
//!                                3 InvalidateArea, 4 StoreResponse,
//!                                5 LoadResponse)
//!      1     1  src_mid
//!      2     1  dst_mid
//!      3     1  tier            (0 DoneeHbm, 1 DonorHbm, 2 DonorDram)
//!      4     1  target_tier
//!   5..8     3  reserved, zero
//!  8..16     8  remote_addr
//! 16..24     8  request_token
//! 24..32     8  page_token
//! 32..64    32  reserved, zero
//! ```
//!
//! Completion word layout:
//!
//! ```text
//!      0     1  status          (0 Ok, 1 Exhausted, 2 PermissionDenied, 3 Invalid)
//!      1     1  tier
//!   2..8     6  reserved, zero
//!  8..16     8  remote_addr
//! 16..24     8  request_token
//! 24..64    40  reserved, zero
//! ```
//!
//! Decoders reject non-zero reserved bytes so that every single-byte
//! corruption of a word is detected or changes the decoded value.

use thiserror::Error;

pub const PAGE_SIZE: usize = 4096;
pub const WORD_SIZE: usize = 64;
pub const PACKET_SIZE: usize = WORD_SIZE + PAGE_SIZE;

/// A 4 KiB page buffer.
pub type Page = Box<[u8; PAGE_SIZE]>;

/// Allocates a zeroed page.
pub fn zero_page() -> Page {
    Box::new([0u8; PAGE_SIZE])
}

/// Copies `bytes` into a new page, failing unless it is exactly one page long.
pub fn page_from_slice(bytes: &[u8]) -> Result<Page, WireError> {
    if bytes.len() != PAGE_SIZE {
        return Err(WireError::BadLength {
            expected: PAGE_SIZE,
            actual: bytes.len(),
        });
    }
    let mut page = zero_page();
    page.copy_from_slice(bytes);
    Ok(page)
}

pub fn is_page_aligned(addr: u64) -> bool {
    addr.is_multiple_of(PAGE_SIZE as u64)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("unknown tier {0:#04x}")]
    UnknownTier(u8),
    #[error("unknown completion status {0:#04x}")]
    UnknownStatus(u8),
    #[error("remote address {0:#x} is not page aligned")]
    BadAlignment(u64),
    #[error("expected {expected} bytes, got {actual}")]
    BadLength { expected: usize, actual: usize },
    #[error("reserved byte at offset {0} is non-zero")]
    ReservedNonZero(usize),
    #[error("unexpected opcode {0:?} for this message type")]
    UnexpectedOpcode(Opcode),
    #[error("completion with status Ok must name a page-aligned memory tier")]
    MalformedCompletion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Store = 0,
    Load = 1,
    InvalidatePage = 2,
    InvalidateArea = 3,
    StoreResponse = 4,
    LoadResponse = 5,
}

impl Opcode {
    pub const ALL: [Opcode; 6] = [
        Opcode::Store,
        Opcode::Load,
        Opcode::InvalidatePage,
        Opcode::InvalidateArea,
        Opcode::StoreResponse,
        Opcode::LoadResponse,
    ];
}

impl TryFrom<u8> for Opcode {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        Opcode::ALL
            .get(v as usize)
            .copied()
            .ok_or(WireError::UnknownOpcode(v))
    }
}

/// Memory tier a page lives in.
///
/// `LocalSwap` is the donee's last-resort store. It only appears in
/// translation entries; decoders reject it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Tier {
    DoneeHbm = 0,
    DonorHbm = 1,
    DonorDram = 2,
    LocalSwap = 3,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::DoneeHbm, Tier::DonorHbm, Tier::DonorDram, Tier::LocalSwap];
    pub const WIRE: [Tier; 3] = [Tier::DoneeHbm, Tier::DonorHbm, Tier::DonorDram];

    pub fn is_donor(self) -> bool {
        matches!(self, Tier::DonorHbm | Tier::DonorDram)
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::DoneeHbm => "donee-hbm",
            Tier::DonorHbm => "donor-hbm",
            Tier::DonorDram => "donor-dram",
            Tier::LocalSwap => "local-swap",
        }
    }

    pub fn from_name(s: &str) -> Option<Tier> {
        Tier::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn wire_tier(v: u8) -> Result<Tier, WireError> {
    Tier::WIRE
        .get(v as usize)
        .copied()
        .ok_or(WireError::UnknownTier(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Command {
    pub opcode: Opcode,
    pub src_mid: u8,
    pub dst_mid: u8,
    pub tier: Tier,
    pub target_tier: Tier,
    pub remote_addr: u64,
    pub request_token: u64,
    pub page_token: u64,
}

impl Command {
    /// A command with every field zeroed except the opcode.
    pub fn new(opcode: Opcode) -> Self {
        Command {
            opcode,
            src_mid: 0,
            dst_mid: 0,
            tier: Tier::DoneeHbm,
            target_tier: Tier::DoneeHbm,
            remote_addr: 0,
            request_token: 0,
            page_token: 0,
        }
    }
}

fn read_u64(block: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(block[at..at + 8].try_into().unwrap())
}

fn check_reserved(block: &[u8], range: std::ops::Range<usize>) -> Result<(), WireError> {
    match block[range.clone()].iter().position(|&b| b != 0) {
        Some(i) => Err(WireError::ReservedNonZero(range.start + i)),
        None => Ok(()),
    }
}

fn check_len(bytes: &[u8], expected: usize) -> Result<(), WireError> {
    if bytes.len() != expected {
        return Err(WireError::BadLength {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

pub fn encode_command(cmd: &Command) -> [u8; WORD_SIZE] {
    let mut out = [0u8; WORD_SIZE];
    out[0] = cmd.opcode as u8;
    out[1] = cmd.src_mid;
    out[2] = cmd.dst_mid;
    out[3] = cmd.tier as u8;
    out[4] = cmd.target_tier as u8;
    out[8..16].copy_from_slice(&cmd.remote_addr.to_le_bytes());
    out[16..24].copy_from_slice(&cmd.request_token.to_le_bytes());
    out[24..32].copy_from_slice(&cmd.page_token.to_le_bytes());
    out
}

pub fn decode_command(block: &[u8]) -> Result<Command, WireError> {
    check_len(block, WORD_SIZE)?;
    let opcode = Opcode::try_from(block[0])?;
    let tier = wire_tier(block[3])?;
    let target_tier = wire_tier(block[4])?;
    check_reserved(block, 5..8)?;
    check_reserved(block, 32..64)?;
    let remote_addr = read_u64(block, 8);
    if matches!(opcode, Opcode::Load | Opcode::InvalidatePage) && !is_page_aligned(remote_addr) {
        return Err(WireError::BadAlignment(remote_addr));
    }
    Ok(Command {
        opcode,
        src_mid: block[1],
        dst_mid: block[2],
        tier,
        target_tier,
        remote_addr,
        request_token: read_u64(block, 16),
        page_token: read_u64(block, 24),
    })
}

/// A command word followed by one page. Used for stores (donee to donor)
/// and load responses (donor to donee); the header opcode tells them apart.
#[derive(Clone, PartialEq, Eq)]
pub struct PagePacket {
    pub header: Command,
    pub page: Page,
}

impl std::fmt::Debug for PagePacket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PagePacket")
            .field("header", &self.header)
            .finish_non_exhaustive()
    }
}

pub type StorePacket = PagePacket;
pub type LoadResponsePacket = PagePacket;

fn encode_packet(pkt: &PagePacket) -> Vec<u8> {
    let mut out = Vec::with_capacity(PACKET_SIZE);
    out.extend_from_slice(&encode_command(&pkt.header));
    out.extend_from_slice(&pkt.page[..]);
    out
}

fn decode_packet(bytes: &[u8], opcode: Opcode) -> Result<PagePacket, WireError> {
    check_len(bytes, PACKET_SIZE)?;
    let header = decode_command(&bytes[..WORD_SIZE])?;
    if header.opcode != opcode {
        return Err(WireError::UnexpectedOpcode(header.opcode));
    }
    Ok(PagePacket {
        header,
        page: page_from_slice(&bytes[WORD_SIZE..])?,
    })
}

pub fn encode_store_packet(pkt: &StorePacket) -> Vec<u8> {
    encode_packet(pkt)
}

pub fn decode_store_packet(bytes: &[u8]) -> Result<StorePacket, WireError> {
    decode_packet(bytes, Opcode::Store)
}

pub fn encode_load_response(pkt: &LoadResponsePacket) -> Vec<u8> {
    encode_packet(pkt)
}

pub fn decode_load_response(bytes: &[u8]) -> Result<LoadResponsePacket, WireError> {
    decode_packet(bytes, Opcode::LoadResponse)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    Exhausted = 1,
    PermissionDenied = 2,
    Invalid = 3,
}

impl TryFrom<u8> for Status {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        match v {
            0 => Ok(Status::Ok),
            1 => Ok(Status::Exhausted),
            2 => Ok(Status::PermissionDenied),
            3 => Ok(Status::Invalid),
            _ => Err(WireError::UnknownStatus(v)),
        }
    }
}

/// Result record of a store (and of a refused load).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub status: Status,
    pub tier: Tier,
    pub remote_addr: u64,
    pub request_token: u64,
}

impl Completion {
    pub fn ok(tier: Tier, remote_addr: u64, request_token: u64) -> Self {
        Completion {
            status: Status::Ok,
            tier,
            remote_addr,
            request_token,
        }
    }

    /// A non-Ok completion; tier and address are zero.
    pub fn failed(status: Status, request_token: u64) -> Self {
        Completion {
            status,
            tier: Tier::DoneeHbm,
            remote_addr: 0,
            request_token,
        }
    }
}

pub fn encode_completion(c: &Completion) -> [u8; WORD_SIZE] {
    let mut out = [0u8; WORD_SIZE];
    out[0] = c.status as u8;
    out[1] = c.tier as u8;
    out[8..16].copy_from_slice(&c.remote_addr.to_le_bytes());
    out[16..24].copy_from_slice(&c.request_token.to_le_bytes());
    out
}

pub fn decode_completion(block: &[u8]) -> Result<Completion, WireError> {
    check_len(block, WORD_SIZE)?;
    let status = Status::try_from(block[0])?;
    let tier = wire_tier(block[1])?;
    check_reserved(block, 2..8)?;
    check_reserved(block, 24..64)?;
    let remote_addr = read_u64(block, 8);
    if status == Status::Ok && !is_page_aligned(remote_addr) {
        return Err(WireError::MalformedCompletion);
    }
    Ok(Completion {
        status,
        tier,
        remote_addr,
        request_token: read_u64(block, 16),
    })
}
