//! Client end of a donee-to-donor connection.
//!
//! Requests are tagged with a fresh `request_token`; a reader thread routes
//! each response back to the waiting caller by that token, so any number of
//! callers may share one connection.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};

use crate::allocator::MachineId;
use crate::donor::store_frame;
use crate::transport::{Endpoint, Frame, FrameKind, FrameReceiver, FrameSender, TransportError};
use crate::wire::{
    decode_completion, decode_load_response, encode_command, page_from_slice, Command, Completion, Opcode, Page,
    Status, Tier, PAGE_SIZE,
};

type Waiters = Arc<Mutex<HashMap<u64, mpsc::Sender<Frame>>>>;

pub struct DonorLink {
    my_mid: MachineId,
    donor_mid: MachineId,
    tx: Mutex<Box<dyn FrameSender>>,
    waiters: Waiters,
    next_token: AtomicU64,
    timeout: Duration,
    down: Arc<AtomicBool>,
    unmatched: Arc<AtomicU64>,
}

impl std::fmt::Debug for DonorLink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DonorLink")
            .field("my_mid", &self.my_mid)
            .field("donor_mid", &self.donor_mid)
            .finish_non_exhaustive()
    }
}

fn response_token(frame: &Frame) -> Option<u64> {
    match frame.kind() {
        FrameKind::Command64 => decode_completion(frame.bytes()).ok().map(|c| c.request_token),
        FrameKind::Packet4160 => decode_load_response(frame.bytes()).ok().map(|p| p.header.request_token),
    }
}

fn route_responses(mut rx: Box<dyn FrameReceiver>, waiters: Waiters, down: Arc<AtomicBool>, unmatched: Arc<AtomicU64>) {
    loop {
        match rx.recv_frame(None) {
            Ok(frame) => {
                let waiter = response_token(&frame).and_then(|t| waiters.lock().unwrap().remove(&t));
                match waiter {
                    Some(w) => {
                        let _ = w.send(frame);
                    }
                    None => {
                        unmatched.fetch_add(1, Ordering::Relaxed);
                        debug!("dropping unmatched response {frame:?}");
                    }
                }
            }
            Err(e) => {
                if e != TransportError::Disconnected {
                    warn!("donor link failed: {e}");
                }
                break;
            }
        }
    }
    down.store(true, Ordering::SeqCst);
    // dropping the senders wakes every waiter with a disconnect
    waiters.lock().unwrap().clear();
}

/// Outcome of a load request.
pub enum LoadReply {
    Page(Page),
    Refused(Status),
}

impl DonorLink {
    pub fn new(endpoint: Endpoint, my_mid: MachineId, donor_mid: MachineId, timeout: Duration) -> Self {
        let (tx, rx) = endpoint.split();
        let waiters: Waiters = Arc::default();
        let down = Arc::new(AtomicBool::new(false));
        let unmatched = Arc::new(AtomicU64::new(0));
        {
            let (waiters, down, unmatched) = (waiters.clone(), down.clone(), unmatched.clone());
            thread::spawn(move || route_responses(rx, waiters, down, unmatched));
        }
        DonorLink {
            my_mid,
            donor_mid,
            tx: Mutex::new(tx),
            waiters,
            next_token: AtomicU64::new(1),
            timeout,
            down,
            unmatched,
        }
    }

    pub fn my_mid(&self) -> MachineId {
        self.my_mid
    }

    pub fn is_down(&self) -> bool {
        self.down.load(Ordering::SeqCst)
    }

    /// Responses that arrived after their caller gave up.
    pub fn unmatched_responses(&self) -> u64 {
        self.unmatched.load(Ordering::Relaxed)
    }

    fn header(&self, opcode: Opcode) -> Command {
        Command {
            src_mid: self.my_mid.0,
            dst_mid: self.donor_mid.0,
            ..Command::new(opcode)
        }
    }

    fn send(&self, frame: &Frame) -> Result<(), TransportError> {
        if self.is_down() {
            return Err(TransportError::Disconnected);
        }
        self.tx.lock().unwrap().send_frame(frame)
    }

    fn request(&self, token: u64, frame: Frame) -> Result<Frame, TransportError> {
        let (tx, rx) = mpsc::channel();
        self.waiters.lock().unwrap().insert(token, tx);
        if let Err(e) = self.send(&frame) {
            self.waiters.lock().unwrap().remove(&token);
            return Err(e);
        }
        match rx.recv_timeout(self.timeout) {
            Ok(f) => Ok(f),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                self.waiters.lock().unwrap().remove(&token);
                Err(TransportError::Timeout)
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(TransportError::Disconnected),
        }
    }

    fn token(&self) -> u64 {
        self.next_token.fetch_add(1, Ordering::Relaxed)
    }

    /// Ships a sealed page to the donor and waits for its completion.
    pub fn store(&self, target: Tier, ciphertext: &[u8; PAGE_SIZE]) -> Result<Completion, TransportError> {
        let token = self.token();
        let header = Command {
            target_tier: target,
            request_token: token,
            page_token: token,
            ..self.header(Opcode::Store)
        };
        let page = page_from_slice(ciphertext).expect("page-sized");
        let reply = self.request(token, store_frame(header, page))?;
        match reply.kind() {
            FrameKind::Command64 => Ok(decode_completion(reply.bytes()).expect("routed by a decodable token")),
            FrameKind::Packet4160 => Ok(Completion::failed(Status::Invalid, token)),
        }
    }

    pub fn load(&self, tier: Tier, remote_addr: u64) -> Result<LoadReply, TransportError> {
        let token = self.token();
        let cmd = Command {
            tier,
            remote_addr,
            request_token: token,
            page_token: token,
            ..self.header(Opcode::Load)
        };
        let reply = self.request(token, Frame::word(encode_command(&cmd)))?;
        Ok(match reply.kind() {
            FrameKind::Packet4160 => LoadReply::Page(decode_load_response(reply.bytes()).expect("routed").page),
            FrameKind::Command64 => {
                let status = decode_completion(reply.bytes()).expect("routed").status;
                // an Ok completion is not a valid answer to a load
                LoadReply::Refused(if status == Status::Ok { Status::Invalid } else { status })
            }
        })
    }

    /// Fire-and-forget: the donor never answers invalidations.
    pub fn invalidate_page(&self, tier: Tier, remote_addr: u64) -> Result<(), TransportError> {
        let cmd = Command {
            tier,
            remote_addr,
            ..self.header(Opcode::InvalidatePage)
        };
        self.send(&Frame::word(encode_command(&cmd)))
    }

    pub fn invalidate_area(&self) -> Result<(), TransportError> {
        self.send(&Frame::word(encode_command(&self.header(Opcode::InvalidateArea))))
    }

    /// Sends an arbitrary frame without waiting for an answer.
    pub fn send_raw(&self, frame: &Frame) -> Result<(), TransportError> {
        self.send(frame)
    }
}

impl Drop for DonorLink {
    fn drop(&mut self) {
        self.tx.lock().unwrap().close();
    }
}
