//! Donor daemon and its line-oriented control socket.
//!
//! Each request is one line; each reply is one line.
//!
//! | request    | reply                                    |
//! |------------|------------------------------------------|
//! | `stats`    | JSON object with free counts and audit   |
//! | `snapshot` | `ok <path>` or `error <reason>`          |
//! | `shutdown` | `ok`, then the daemon stops              |

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use serde_json::json;

use super::{HarnessConfig, HarnessError};
use crate::donor::{serve_tcp, DonorEngine, DonorError};
use crate::wire::Tier;

fn stats_json(engine: &DonorEngine) -> String {
    json!({
        "mid": engine.config().mid,
        "free": {
            "donor-hbm": engine.free_count(Tier::DonorHbm),
            "donor-dram": engine.free_count(Tier::DonorDram),
        },
        "audit": engine.audit(),
    })
    .to_string()
}

fn write_snapshot(engine: &Mutex<DonorEngine>, path: &Path) -> Result<(), DonorError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        engine.lock().unwrap().write_snapshot(&mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn handle_control(
    stream: TcpStream,
    engine: &Mutex<DonorEngine>,
    snapshot: Option<&Path>,
    stop: &AtomicBool,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    let mut out = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let reply = match line?.trim() {
            "stats" => stats_json(&engine.lock().unwrap()),
            "snapshot" => match snapshot {
                Some(p) => match write_snapshot(engine, p) {
                    Ok(()) => format!("ok {}", p.display()),
                    Err(e) => format!("error {e}"),
                },
                None => "error no snapshot path configured".into(),
            },
            "shutdown" => {
                stop.store(true, Ordering::SeqCst);
                "ok".into()
            }
            "" => continue,
            other => format!("error unknown command {other:?}"),
        };
        writeln!(out, "{reply}")?;
    }
    Ok(())
}

/// Serves control requests until `stop` is raised.
pub fn serve_control(
    listener: TcpListener,
    engine: Arc<Mutex<DonorEngine>>,
    snapshot: Option<PathBuf>,
    stop: Arc<AtomicBool>,
) -> io::Result<JoinHandle<()>> {
    listener.set_nonblocking(true)?;
    Ok(thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    if let Err(e) = handle_control(stream, &engine, snapshot.as_deref(), &stop) {
                        warn!("control connection: {e}");
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    warn!("control accept: {e}");
                    thread::sleep(Duration::from_millis(10));
                }
            }
        }
    }))
}

/// Sends one control request and returns the reply line.
pub fn control_request(addr: impl ToSocketAddrs, request: &str) -> io::Result<String> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    writeln!(stream, "{request}")?;
    stream.shutdown(std::net::Shutdown::Write)?;
    let mut line = String::new();
    BufReader::new(stream).read_line(&mut line)?;
    Ok(line.trim_end().to_string())
}

/// A running donor: data listener, control listener, shared engine.
pub struct DonorDaemon {
    pub engine: Arc<Mutex<DonorEngine>>,
    pub data_addr: SocketAddr,
    pub control_addr: SocketAddr,
    snapshot: Option<PathBuf>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

/// Starts a donor from `cfg`. With `restore`, state is read back from the
/// configured snapshot file if one exists.
pub fn run_donor(cfg: &HarnessConfig, restore: bool) -> Result<DonorDaemon, HarnessError> {
    cfg.donor.validate()?;
    let seed = cfg.seed ^ 0xD0_D0_D0_D0;
    let engine = match (&cfg.snapshot, restore) {
        (Some(p), true) if p.exists() => {
            info!("restoring donor state from {}", p.display());
            let e = DonorEngine::read_snapshot(&mut io::BufReader::new(File::open(p)?), seed)?;
            if e.config().mid != cfg.donor.mid {
                return Err(HarnessError::Config(format!(
                    "snapshot belongs to donor {}, not {}",
                    e.config().mid,
                    cfg.donor.mid
                )));
            }
            e
        }
        _ => DonorEngine::new(cfg.donor.clone(), seed)?,
    };
    let engine = Arc::new(Mutex::new(engine));
    let stop = Arc::new(AtomicBool::new(false));
    let data = TcpListener::bind(cfg.transport.address.as_str())?;
    let control = TcpListener::bind(cfg.transport.control_address.as_str())?;
    let (data_addr, control_addr) = (data.local_addr()?, control.local_addr()?);
    let threads = vec![
        serve_tcp(data, engine.clone(), cfg.transport.latency, stop.clone())?,
        serve_control(control, engine.clone(), cfg.snapshot.clone(), stop.clone())?,
    ];
    {
        let e = engine.lock().unwrap();
        info!(
            "donor {} serving on {data_addr} (control {control_addr}); free donor-hbm {} donor-dram {}",
            cfg.donor.mid,
            e.free_count(Tier::DonorHbm),
            e.free_count(Tier::DonorDram)
        );
    }
    Ok(DonorDaemon {
        engine,
        data_addr,
        control_addr,
        snapshot: cfg.snapshot.clone(),
        stop,
        threads,
    })
}

impl DonorDaemon {
    /// Raising this flag stops the daemon.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    /// Blocks until stopped, logging free counts every `log_every`, then
    /// writes the snapshot if one is configured.
    pub fn wait(self, log_every: Duration) -> Result<(), HarnessError> {
        let mut last = Instant::now();
        while !self.stop.load(Ordering::SeqCst) {
            thread::sleep(Duration::from_millis(20));
            if last.elapsed() >= log_every {
                let e = self.engine.lock().unwrap();
                info!(
                    "free donor-hbm {} donor-dram {}",
                    e.free_count(Tier::DonorHbm),
                    e.free_count(Tier::DonorDram)
                );
                last = Instant::now();
            }
        }
        for t in self.threads {
            let _ = t.join();
        }
        if let Some(p) = &self.snapshot {
            write_snapshot(&self.engine, p)?;
            info!("snapshot written to {}", p.display());
        }
        Ok(())
    }

    pub fn shutdown(self) -> Result<(), HarnessError> {
        self.stop.store(true, Ordering::SeqCst);
        self.wait(Duration::MAX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::donee::DoneeConfig;
    use crate::donor::DonorConfig;
    use crate::harness::{Deployment, TransportMode};

    #[test]
    fn daemon_serves_controls_and_snapshots() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = HarnessConfig::loopback(DoneeConfig::new(1, 50, 8, 0, 0), DonorConfig::new(50, 32, 32));
        cfg.transport.mode = TransportMode::Tcp;
        cfg.transport.address = "127.0.0.1:0".into();
        cfg.transport.control_address = "127.0.0.1:0".into();
        cfg.snapshot = Some(dir.path().join("donor.snap"));
        let daemon = run_donor(&cfg, false).unwrap();

        let mut client = cfg.clone();
        client.transport.address = daemon.data_addr.to_string();
        let dep = Deployment::new(&client).unwrap();
        dep.donee.store(2, &[7u8; 4096]).unwrap();
        assert_eq!(dep.donee.load(2).unwrap()[..], [7u8; 4096]);

        let stats: serde_json::Value =
            serde_json::from_str(&control_request(daemon.control_addr, "stats").unwrap()).unwrap();
        assert_eq!(stats["mid"], 50);
        assert_eq!(stats["audit"]["stores_ok"], 1);
        let snap = control_request(daemon.control_addr, "snapshot").unwrap();
        assert!(snap.starts_with("ok "), "{snap}");
        assert!(control_request(daemon.control_addr, "frob").unwrap().starts_with("error"));
        assert_eq!(control_request(daemon.control_addr, "shutdown").unwrap(), "ok");
        daemon.wait(Duration::from_secs(60)).unwrap();

        let restored =
            DonorEngine::read_snapshot(&mut File::open(cfg.snapshot.as_ref().unwrap()).unwrap(), 0).unwrap();
        assert_eq!(restored.pages_owned_by(crate::allocator::MachineId(1)), 1);
    }
}
