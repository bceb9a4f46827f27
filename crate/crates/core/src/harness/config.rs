use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::donee::DoneeConfig;
use crate::donor::DonorConfig;
use crate::transport::LatencyModel;

/// Overrides `transport.address` when set.
pub const ADDRESS_ENV: &str = "SEALSWAP_ADDRESS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    #[default]
    Loopback,
    Tcp,
}

impl std::str::FromStr for TransportMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loopback" => Ok(TransportMode::Loopback),
            "tcp" => Ok(TransportMode::Tcp),
            _ => Err(HarnessError::Config(format!("unknown transport {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub mode: TransportMode,
    /// Donor data address for TCP mode.
    pub address: String,
    /// Donor control socket.
    pub control_address: String,
    pub latency: LatencyModel,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            mode: TransportMode::Loopback,
            address: "127.0.0.1:7420".into(),
            control_address: "127.0.0.1:7421".into(),
            latency: LatencyModel::None,
        }
    }
}

/// A second tenant that occupies donor pages before a run starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PressureConfig {
    pub mid: u8,
    #[serde(default)]
    pub hbm_pages: u64,
    #[serde(default)]
    pub dram_pages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    #[serde(default)]
    pub seed: u64,
    pub donee: DoneeConfig,
    pub donor: DonorConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub pressure: Option<PressureConfig>,
    /// Where the donor daemon writes its snapshot on shutdown.
    #[serde(default)]
    pub snapshot: Option<PathBuf>,
    /// Concurrent replay workers.
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl HarnessConfig {
    /// Small loopback setup used by tests and as the CLI default.
    pub fn loopback(donee: DoneeConfig, donor: DonorConfig) -> Self {
        HarnessConfig {
            seed: 0,
            donee,
            donor,
            transport: TransportConfig::default(),
            pressure: None,
            snapshot: None,
            workers: 1,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: HarnessConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the environment override.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(addr) = std::env::var(ADDRESS_ENV) {
            if !addr.is_empty() {
                self.transport.address = addr;
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.donee.validate()?;
        self.donor.validate()?;
        if self.donee.donor_mid != self.donor.mid {
            return Err(HarnessError::Config(format!(
                "donee.donor_mid {} does not match donor.mid {}",
                self.donee.donor_mid, self.donor.mid
            )));
        }
        if self.workers == 0 {
            return Err(HarnessError::Config("workers must be at least 1".into()));
        }
        if let Some(p) = &self.pressure {
            if p.mid == self.donee.mid || p.mid == 0 || p.mid == 0xFF {
                return Err(HarnessError::Config(format!("pressure.mid {} is not usable", p.mid)));
            }
        }
        Ok(())
    }
}
