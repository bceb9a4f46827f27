//! AES-128-GCM sealing of 4 KiB pages.
//!
//! A page is bound to its swap offset through the associated data (the
//! offset as 8 little-endian bytes). Only the ciphertext leaves the donee;
//! the tag and nonce stay in the translation table.
//!
//! Nonces are 96 bits: a 64-bit per-key counter followed by a 32-bit random
//! salt drawn when the cipher is created. A key never sees the same nonce
//! twice as long as fewer than 2^64 pages are sealed under it.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use aes_gcm::aead::AeadInPlace;
use aes_gcm::{Aes128Gcm, KeyInit, Nonce, Tag};
use rand::rngs::OsRng;
use rand::TryRngCore;
use thiserror::Error;

use crate::wire::{Page, PAGE_SIZE};

pub const KEY_SIZE: usize = 16;
pub const TAG_SIZE: usize = 16;
pub const NONCE_SIZE: usize = 12;

pub type Mac = [u8; TAG_SIZE];
pub type NonceBytes = [u8; NONCE_SIZE];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("page must be {PAGE_SIZE} bytes, got {0}")]
    BadLength(usize),
    #[error("page failed authentication")]
    IntegrityViolation,
    #[error("system randomness source failed: {0}")]
    RngFailure(String),
}

/// Page-granular index into the donee's swap address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SwapOffset(pub u64);

impl SwapOffset {
    pub fn associated_data(self) -> [u8; 8] {
        self.0.to_le_bytes()
    }
}

/// 128-bit page key. Never serialized; `Debug` does not print the bytes.
#[derive(Clone, PartialEq, Eq)]
pub struct PageKey([u8; KEY_SIZE]);

impl PageKey {
    pub fn from_bytes(bytes: [u8; KEY_SIZE]) -> Self {
        PageKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_SIZE] {
        &self.0
    }
}

impl fmt::Debug for PageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PageKey(..)")
    }
}

impl Drop for PageKey {
    fn drop(&mut self) {
        self.0.fill(0);
    }
}

fn os_random(buf: &mut [u8]) -> Result<(), CryptoError> {
    OsRng
        .try_fill_bytes(buf)
        .map_err(|e| CryptoError::RngFailure(e.to_string()))
}

pub fn generate_key() -> Result<PageKey, CryptoError> {
    let mut key = [0u8; KEY_SIZE];
    os_random(&mut key)?;
    Ok(PageKey(key))
}

#[derive(Clone, PartialEq, Eq)]
pub struct SealedPage {
    pub ciphertext: Page,
    pub mac: Mac,
    pub nonce: NonceBytes,
}

impl fmt::Debug for SealedPage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SealedPage")
            .field("mac", &self.mac)
            .field("nonce", &self.nonce)
            .finish_non_exhaustive()
    }
}

/// Seals and opens pages under one key. Safe to share between threads.
pub struct PageCipher {
    aead: Aes128Gcm,
    counter: AtomicU64,
    salt: [u8; 4],
}

impl PageCipher {
    pub fn new(key: &PageKey) -> Result<Self, CryptoError> {
        let mut salt = [0u8; 4];
        os_random(&mut salt)?;
        Ok(Self::with_salt(key, salt))
    }

    /// Deterministic construction for known-answer tests.
    pub fn with_salt(key: &PageKey, salt: [u8; 4]) -> Self {
        PageCipher {
            aead: Aes128Gcm::new(key.as_bytes().into()),
            counter: AtomicU64::new(0),
            salt,
        }
    }

    fn next_nonce(&self) -> NonceBytes {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let mut nonce = [0u8; NONCE_SIZE];
        nonce[..8].copy_from_slice(&n.to_le_bytes());
        nonce[8..].copy_from_slice(&self.salt);
        nonce
    }

    pub fn seal(&self, plaintext: &[u8], offset: SwapOffset) -> Result<SealedPage, CryptoError> {
        if plaintext.len() != PAGE_SIZE {
            return Err(CryptoError::BadLength(plaintext.len()));
        }
        let nonce = self.next_nonce();
        let mut ciphertext: Page = Box::new([0u8; PAGE_SIZE]);
        ciphertext.copy_from_slice(plaintext);
        let mac = self.seal_in_place(&nonce, offset, &mut ciphertext[..]);
        Ok(SealedPage {
            ciphertext,
            mac,
            nonce,
        })
    }

    /// Encrypts `buf` under an explicit nonce. Callers must never repeat a
    /// nonce under the same key.
    pub fn seal_in_place(&self, nonce: &NonceBytes, offset: SwapOffset, buf: &mut [u8]) -> Mac {
        let tag = self
            .aead
            .encrypt_in_place_detached(Nonce::from_slice(nonce), &offset.associated_data(), buf)
            .expect("page-sized buffers are within the GCM length limit");
        tag.into()
    }

    pub fn open(&self, sealed: &SealedPage, offset: SwapOffset) -> Result<Page, CryptoError> {
        self.open_parts(&sealed.ciphertext[..], &sealed.mac, &sealed.nonce, offset)
    }

    pub fn open_parts(
        &self,
        ciphertext: &[u8],
        mac: &Mac,
        nonce: &NonceBytes,
        offset: SwapOffset,
    ) -> Result<Page, CryptoError> {
        if ciphertext.len() != PAGE_SIZE {
            return Err(CryptoError::BadLength(ciphertext.len()));
        }
        let mut page: Page = Box::new([0u8; PAGE_SIZE]);
        page.copy_from_slice(ciphertext);
        self.aead
            .decrypt_in_place_detached(
                Nonce::from_slice(nonce),
                &offset.associated_data(),
                &mut page[..],
                Tag::from_slice(mac),
            )
            .map_err(|_| CryptoError::IntegrityViolation)?;
        Ok(page)
    }
}

/// One-shot seal with a fresh cipher; prefer a long-lived [`PageCipher`].
pub fn seal_page(key: &PageKey, plaintext: &[u8], offset: SwapOffset) -> Result<SealedPage, CryptoError> {
    PageCipher::new(key)?.seal(plaintext, offset)
}

pub fn open_page(key: &PageKey, sealed: &SealedPage, offset: SwapOffset) -> Result<Page, CryptoError> {
    PageCipher::with_salt(key, [0; 4]).open(sealed, offset)
}

/// Whether the CPU offers the AES and carry-less multiply instructions the
/// cipher backend uses for its fast path.
pub fn hardware_aes_available() -> bool {
    #[cfg(any(target_arch = "x86", target_arch = "x86_64"))]
    {
        std::arch::is_x86_feature_detected!("aes") && std::arch::is_x86_feature_detected!("pclmulqdq")
    }
    #[cfg(target_arch = "aarch64")]
    {
        std::arch::is_aarch64_feature_detected!("aes") && std::arch::is_aarch64_feature_detected!("pmull")
    }
    #[cfg(not(any(target_arch = "x86", target_arch = "x86_64", target_arch = "aarch64")))]
    {
        false
    }
}
