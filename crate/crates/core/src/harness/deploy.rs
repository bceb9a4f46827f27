use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HarnessConfig, HarnessError, PressureConfig, TransportMode};
use crate::allocator::MachineId;
use crate::donee::{DoneeEngine, DonorLink};
use crate::donor::{serve_connection, DonorEngine, DonorService};
use crate::pagecrypt::generate_key;
use crate::transport::{loopback_pair, tcp_connect, Endpoint, LatencyModel, TransportError};
use crate::wire::{Status, Tier, PAGE_SIZE};

/// Where a donee's donor lives.
#[derive(Clone)]
pub enum DonorTarget {
    /// An in-process service; every connection gets its own serving thread.
    Loopback {
        service: Arc<Mutex<dyn DonorService>>,
        latency: LatencyModel,
    },
    Tcp { address: String, latency: LatencyModel },
}

impl DonorTarget {
    pub fn loopback<S: DonorService + 'static>(service: Arc<Mutex<S>>, latency: LatencyModel) -> Self {
        DonorTarget::Loopback { service, latency }
    }

    pub fn connect(&self) -> Result<Endpoint, TransportError> {
        match self {
            DonorTarget::Loopback { service, latency } => {
                let (client, server) = loopback_pair(*latency);
                serve_connection(service.clone(), server);
                Ok(client)
            }
            DonorTarget::Tcp { address, latency } => tcp_connect(address.as_str(), *latency),
        }
    }

    pub fn link(&self, my_mid: u8, donor_mid: u8, timeout: Duration) -> Result<DonorLink, TransportError> {
        Ok(DonorLink::new(self.connect()?, MachineId(my_mid), MachineId(donor_mid), timeout))
    }
}

/// Occupies donor pages on behalf of another tenant. The returned link keeps
/// the connection open; the pages stay allocated either way.
pub fn apply_pressure(
    target: &DonorTarget,
    pressure: &PressureConfig,
    donor_mid: u8,
    seed: u64,
) -> Result<DonorLink, HarnessError> {
    let link = target.link(pressure.mid, donor_mid, Duration::from_secs(10))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut page = [0u8; PAGE_SIZE];
    for (tier, n) in [(Tier::DonorHbm, pressure.hbm_pages), (Tier::DonorDram, pressure.dram_pages)] {
        for _ in 0..n {
            rng.fill_bytes(&mut page);
            let c = link.store(tier, &page)?;
            if c.status != Status::Ok || c.tier != tier {
                return Err(HarnessError::Config(format!(
                    "pressure tenant could not place {n} pages in {tier} (got {:?} in {})",
                    c.status, c.tier
                )));
            }
        }
    }
    info!(
        "pressure tenant {} holds {} donor-hbm and {} donor-dram pages",
        pressure.mid, pressure.hbm_pages, pressure.dram_pages
    );
    Ok(link)
}

/// A donee wired to a donor, built from a harness config.
pub struct Deployment {
    pub config: HarnessConfig,
    pub target: DonorTarget,
    /// Present for in-process donors.
    pub donor: Option<Arc<Mutex<DonorEngine>>>,
    pub donee: Arc<DoneeEngine>,
    _pressure: Option<DonorLink>,
}

impl Deployment {
    pub fn new(config: &HarnessConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        match config.transport.mode {
            TransportMode::Loopback => {
                let donor = Arc::new(Mutex::new(DonorEngine::new(
                    config.donor.clone(),
                    config.seed ^ 0xD0_D0_D0_D0,
                )?));
                let target = DonorTarget::loopback(donor.clone(), config.transport.latency);
                Self::with_target(config, target, Some(donor))
            }
            TransportMode::Tcp => {
                let target = DonorTarget::Tcp {
                    address: config.transport.address.clone(),
                    latency: config.transport.latency,
                };
                Self::with_target(config, target, None)
            }
        }
    }

    pub fn with_target(
        config: &HarnessConfig,
        target: DonorTarget,
        donor: Option<Arc<Mutex<DonorEngine>>>,
    ) -> Result<Self, HarnessError> {
        let pressure = match &config.pressure {
            Some(p) => Some(apply_pressure(&target, p, config.donor.mid, config.seed ^ 0x5EED)?),
            None => None,
        };
        let link = target.link(config.donee.mid, config.donee.donor_mid, config.donee.op_timeout())?;
        let key = generate_key()?;
        let donee = DoneeEngine::new(config.donee.clone(), &key, Some(link), config.seed)?;
        Ok(Deployment {
            config: config.clone(),
            target,
            donor,
            donee: Arc::new(donee),
            _pressure: pressure,
        })
    }
}
