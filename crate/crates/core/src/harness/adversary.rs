//! Fault injection against an in-process donor.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trace::page_from_seed;
use super::{DonorTarget, HarnessError};
use crate::donee::{DoneeConfig, DoneeEngine, DoneeError, Placement};
use crate::donor::{DonorConfig, DonorEngine};
use crate::pagecrypt::generate_key;
use crate::transport::{Endpoint, Frame, FrameKind, LatencyModel};
use crate::wire::{decode_completion, encode_command, Command, Opcode, Status, Tier, PACKET_SIZE, WORD_SIZE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackResult {
    pub name: String,
    /// True when the system resisted the attack.
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryReport {
    pub attacks: Vec<AttackResult>,
}

impl AdversaryReport {
    pub fn pass(&self) -> bool {
        self.attacks.iter().all(|a| a.passed)
    }
}

const DONOR_MID: u8 = 100;
const VICTIM_MID: u8 = 1;
const ROGUE_MID: u8 = 66;
const TIMEOUT: Duration = Duration::from_secs(10);

struct Lab {
    donor: Arc<Mutex<DonorEngine>>,
    target: DonorTarget,
}

impl Lab {
    fn new(seed: u64) -> Result<Self, HarnessError> {
        let donor = Arc::new(Mutex::new(DonorEngine::new(DonorConfig::new(DONOR_MID, 256, 256), seed)?));
        let target = DonorTarget::loopback(donor.clone(), LatencyModel::None);
        Ok(Lab { donor, target })
    }

    /// A donee whose pages all go to donor HBM.
    fn victim(&self, mid: u8, seed: u64) -> Result<DoneeEngine, HarnessError> {
        let mut cfg = DoneeConfig::new(mid, DONOR_MID, 16, 0, 0);
        cfg.placement = Placement::Pin(Tier::DonorHbm);
        let link = self.target.link(mid, DONOR_MID, TIMEOUT)?;
        Ok(DoneeEngine::new(cfg, &generate_key()?, Some(link), seed)?)
    }

    fn raw(&self) -> Result<Endpoint, HarnessError> {
        Ok(self.target.connect()?)
    }
}

fn result(name: &str, passed: bool, detail: String) -> AttackResult {
    AttackResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// The donor flips a bit in a stored ciphertext.
fn tamper(lab: &Lab, seed: u64) -> Result<AttackResult, HarnessError> {
    let victim = lab.victim(VICTIM_MID, seed)?;
    victim.store(3, &page_from_seed(seed)[..])?;
    let e = victim.entry(3).expect("stored");
    let flipped = lab.donor.lock().unwrap().tamper_page(e.tier, e.remote_address, |p| p[1234] ^= 0x10);
    let outcome = victim.load(3);
    let after = victim.load(3);
    let passed = flipped
        && outcome == Err(DoneeError::FatalIntegrity(3))
        && victim.is_halted()
        && after == Err(DoneeError::EngineHalted);
    Ok(result(
        "tampered-page",
        passed,
        format!("load returned {:?}, then {:?}", outcome.err(), after.err()),
    ))
}

/// Another machine asks for the victim's page by address.
fn rogue_load(lab: &Lab, seed: u64) -> Result<AttackResult, HarnessError> {
    let victim = lab.victim(VICTIM_MID + 1, seed)?;
    let secret = page_from_seed(seed ^ 0x5EC);
    victim.store(0, &secret[..])?;
    let e = victim.entry(0).expect("stored");
    let mut ep = lab.raw()?;
    let cmd = Command {
        src_mid: ROGUE_MID,
        dst_mid: DONOR_MID,
        tier: e.tier,
        remote_addr: e.remote_address,
        request_token: 77,
        ..Command::new(Opcode::Load)
    };
    ep.send_frame(&Frame::word(encode_command(&cmd)))?;
    let reply = ep.recv_frame(Some(TIMEOUT))?;
    let status = match reply.kind() {
        FrameKind::Command64 => decode_completion(reply.bytes()).ok().map(|c| (c.status, c.request_token)),
        FrameKind::Packet4160 => None,
    };
    let leaked = reply.kind() == FrameKind::Packet4160;
    let still_ok = victim.load(0).map(|p| p == secret).unwrap_or(false);
    Ok(result(
        "cross-tenant-load",
        status == Some((Status::PermissionDenied, 77)) && !leaked && still_ok,
        format!(
            "rogue got {status:?} in a {}-byte reply; victim page intact: {still_ok}",
            reply.bytes().len()
        ),
    ))
}

/// Another machine tries to free the victim's page and area.
fn rogue_invalidate(lab: &Lab, seed: u64) -> Result<AttackResult, HarnessError> {
    let victim = lab.victim(VICTIM_MID + 2, seed)?;
    let secret = page_from_seed(seed ^ 0x1A7);
    victim.store(5, &secret[..])?;
    let e = victim.entry(5).expect("stored");
    let denied_before = lab.donor.lock().unwrap().audit().denied_invalidations;
    let rogue = lab.target.link(ROGUE_MID, DONOR_MID, TIMEOUT)?;
    rogue.invalidate_page(e.tier, e.remote_address)?;
    rogue.invalidate_area()?;
    // a round trip on the same connection orders the invalidations first
    let _ = rogue.load(e.tier, e.remote_address)?;
    let (owner, denied) = {
        let d = lab.donor.lock().unwrap();
        (d.owner_of(e.tier, e.remote_address).ok(), d.audit().denied_invalidations - denied_before)
    };
    let intact = victim.load(5).map(|p| p == secret).unwrap_or(false);
    Ok(result(
        "cross-tenant-invalidate",
        owner.map(|o| o.0) == Some(VICTIM_MID + 2) && denied == 1 && intact,
        format!("owner after attack {owner:?}; denied invalidations {denied}; victim page intact: {intact}"),
    ))
}

/// Random frames of both sizes. Valid opcodes are planted half the time so
/// the decoder gets past its first check.
fn fuzz(lab: &Lab, seed: u64, frames: u64) -> Result<AttackResult, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let before = lab.donor.lock().unwrap().audit().malformed_frames;
    let mut ep = lab.raw()?;
    for _ in 0..frames {
        let len = if rng.random_bool(0.5) { WORD_SIZE } else { PACKET_SIZE };
        let mut bytes = vec![0u8; len];
        rng.fill_bytes(&mut bytes);
        if rng.random_bool(0.5) {
            bytes[0] = rng.random_range(0..Opcode::ALL.len() as u8);
        }
        ep.send_frame(&Frame::new(bytes)?)?;
    }
    // the connection must still answer
    let probe = Command {
        src_mid: ROGUE_MID,
        dst_mid: DONOR_MID,
        tier: Tier::DonorHbm,
        remote_addr: 0,
        request_token: 1,
        ..Command::new(Opcode::Load)
    };
    ep.send_frame(&Frame::word(encode_command(&probe)))?;
    let alive = ep.recv_frame(Some(TIMEOUT)).is_ok();
    let malformed = lab.donor.lock().unwrap().audit().malformed_frames - before;
    let victim = lab.victim(VICTIM_MID + 3, seed)?;
    let page = page_from_seed(seed);
    let serving = victim.store(1, &page[..]).is_ok() && victim.load(1).map(|p| p == page).unwrap_or(false);
    Ok(result(
        "malformed-frames",
        alive && serving && malformed == frames,
        format!("{malformed} of {frames} frames counted malformed; connection alive: {alive}; donor serving: {serving}"),
    ))
}

/// Runs every attack against a fresh donor. `fuzz_frames` sets the size of
/// the malformed-frame barrage.
pub fn adversary_suite(seed: u64, fuzz_frames: u64) -> Result<AdversaryReport, HarnessError> {
    let lab = Lab::new(seed)?;
    Ok(AdversaryReport {
        attacks: vec![
            tamper(&lab, seed)?,
            rogue_load(&lab, seed)?,
            rogue_invalidate(&lab, seed)?,
            fuzz(&lab, seed, fuzz_frames)?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_attacks_fail() {
        let r = adversary_suite(5, 500).unwrap();
        assert_eq!(r.attacks.len(), 4);
        assert!(r.pass(), "{r:#?}");
    }
}
