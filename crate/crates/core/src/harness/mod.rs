//! Test and measurement harness: trace replay with verification, latency
//! benches, the donor-side allocation audit, fault injection, and the donor
//! daemon with its control socket.

mod adversary;
mod audit;
mod config;
mod control;
mod deploy;
mod replay;
mod report;
mod stress;
pub mod trace;

use thiserror::Error;

pub use adversary::{adversary_suite, AdversaryReport, AttackResult};
pub use audit::{audit_obliviousness, audit_service, AuditReport, SequentialDonor};
pub use config::{HarnessConfig, PressureConfig, TransportConfig, TransportMode, ADDRESS_ENV};
pub use control::{control_request, run_donor, serve_control, DonorDaemon};
pub use deploy::{apply_pressure, DonorTarget, Deployment};
pub use replay::{bench_latency, replay, replay_parallel};
pub use report::{BenchReport, LatencyRecorder, OpCounts, Percentiles};
pub use stress::{stress_conflicting, StressConfig, StressReport};
pub use trace::{generate, page_from_seed, SwapTrace, TraceOp, TraceRecord, TraceSpec};

use crate::donee::DoneeError;
use crate::donor::DonorError;
use crate::pagecrypt::CryptoError;
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("trace: {0}")]
    Trace(String),
    #[error("verification failed at record {index}: {detail}")]
    Verification {
        index: usize,
        detail: String,
        /// Engine error behind the failure, if any.
        cause: Option<DoneeError>,
    },
    #[error("linearizability violation: {0}")]
    Linearizability(String),
    #[error(transparent)]
    Donee(#[from] DoneeError),
    #[error(transparent)]
    Donor(#[from] DonorError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
