use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use sealswap_core::harness::{
    adversary_suite, audit_obliviousness, audit_service, bench_latency, generate, replay_parallel, run_donor,
    Deployment, DonorTarget, HarnessConfig, SequentialDonor, SwapTrace, TraceSpec, TransportMode,
};
use sealswap_core::{DonorConfig, LatencyModel, Tier};

const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Parser)]
#[command(name = "sealswap", version, about = "Sealed far-memory swap between a donee and a donor")]
struct Cli {
    /// TOML config; the built-in default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config transport (loopback or tcp).
    #[arg(long, global = true)]
    transport: Option<TransportMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve donated memory over TCP until SIGINT, SIGTERM or a `shutdown`
    /// control request.
    Donor {
        /// Restore state from the configured snapshot if it exists.
        #[arg(long)]
        restore: bool,
        /// Seconds between free-count log lines.
        #[arg(long, default_value_t = 5)]
        log_every: u64,
    },
    /// Replay a trace with full verification and print a JSON report.
    Replay {
        /// Trace file (text or binary). Without one, a trace is generated.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        ops: usize,
        #[arg(long)]
        workers: Option<usize>,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Store then load a run of pages pinned to one tier.
    Bench {
        #[arg(long, default_value = "donor-hbm")]
        tier: String,
        #[arg(long, default_value_t = 1000)]
        pages: u64,
    },
    /// Check that donor page placement is uniform and unlinkable.
    Audit {
        #[arg(long, default_value_t = 2000)]
        cycles: u64,
        #[arg(long, default_value_t = 4096)]
        donor_pages: u64,
        /// Audit the lowest-free-page donor instead, which should fail.
        #[arg(long)]
        sequential: bool,
    },
    /// Run the fault-injection suite against an in-process donor.
    Adversary {
        #[arg(long, default_value_t = 10_000)]
        fuzz_frames: u64,
    },
    /// Write a synthetic trace.
    GenTrace {
        #[arg(long, default_value_t = 10_000)]
        ops: usize,
        #[arg(long, default_value_t = 512)]
        offsets: u64,
        /// Skip storing every offset up front.
        #[arg(long)]
        no_prefill: bool,
        #[arg(long, default_value_t = 0.0005)]
        area_rate: f64,
        #[arg(long)]
        binary: bool,
        /// Output path; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<HarnessConfig> {
    let mut cfg = match &cli.config {
        Some(p) => HarnessConfig::load(p)?,
        None => {
            let mut c = HarnessConfig::from_toml(DEFAULT_CONFIG)?;
            c.apply_env();
            c
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.transport {
        cfg.transport.mode = t;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn donor(cfg: &HarnessConfig, restore: bool, log_every: u64) -> Result<()> {
    let daemon = run_donor(cfg, restore)?;
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, daemon.stop_flag()).context("installing signal handler")?;
    }
    {
        let mut out = std::io::stdout().lock();
        writeln!(out, "data {}", daemon.data_addr)?;
        writeln!(out, "control {}", daemon.control_addr)?;
        out.flush()?;
    }
    daemon.wait(Duration::from_secs(log_every.max(1)))?;
    info!("donor stopped");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Donor { restore, log_every } => {
            donor(&cfg, restore, log_every)?;
            Ok(true)
        }
        Command::Replay {
            trace,
            ops,
            workers,
            report,
        } => {
            let trace = match trace {
                Some(p) => SwapTrace::parse(&std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => generate(&TraceSpec {
                    ops,
                    offsets: cfg.donee.swap_offsets,
                    seed: cfg.seed,
                    ..TraceSpec::default()
                }),
            };
            let dep = Deployment::new(&cfg)?;
            let r = replay_parallel(&trace, &dep.donee, workers.unwrap_or(cfg.workers))?;
            if let Some(p) = report {
                std::fs::write(&p, r.to_json()).with_context(|| format!("writing {}", p.display()))?;
            }
            print_json(&r)?;
            Ok(r.mismatches == 0)
        }
        Command::Bench { tier, pages } => {
            let Some(tier) = Tier::from_name(&tier) else {
                bail!("unknown tier {tier:?}");
            };
            print_json(&bench_latency(&cfg, tier, pages)?)?;
            Ok(true)
        }
        Command::Audit {
            cycles,
            donor_pages,
            sequential,
        } => {
            let donor = DonorConfig::new(cfg.donor.mid, donor_pages, 0);
            let r = if sequential {
                let bad = Arc::new(Mutex::new(SequentialDonor::new(&donor)?));
                audit_service(&DonorTarget::loopback(bad, LatencyModel::None), &donor, cycles, cfg.seed)?
            } else {
                audit_obliviousness(&donor, cycles, cfg.seed)?
            };
            print_json(&r)?;
            if !r.pass {
                warn!("audit failed: p = {:.4}, repeat rate {:.6}", r.p_value, r.repeat_rate);
            }
            Ok(r.pass)
        }
        Command::Adversary { fuzz_frames } => {
            let r = adversary_suite(cfg.seed, fuzz_frames)?;
            print_json(&r)?;
            Ok(r.pass())
        }
        Command::GenTrace {
            ops,
            offsets,
            no_prefill,
            area_rate,
            binary,
            out,
        } => {
            let trace = generate(&TraceSpec {
                ops,
                offsets,
                seed: cfg.seed,
                prefill: !no_prefill,
                area_rate,
                ..TraceSpec::default()
            });
            let bytes = if binary {
                trace.to_binary()
            } else {
                trace.to_text().into_bytes()
            };
            match out {
                Some(p) => std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::stdout().lock().write_all(&bytes)?,
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
