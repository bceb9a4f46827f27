use std::io::{BufRead, BufReader};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_sealswap");

fn sealswap(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "error").output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn gen_trace_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    for (name, binary) in [("t.txt", false), ("t.bin", true)] {
        let path = dir.path().join(name);
        let p = path.to_str().unwrap();
        let mut args = vec!["--seed", "3", "gen-trace", "--ops", "3000", "--out", p];
        if binary {
            args.push("--binary");
        }
        assert!(sealswap(&args).status.success());
        let out = sealswap(&["--seed", "3", "replay", "--trace", p, "--workers", "4"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let r = json(&out);
        assert_eq!(r["ops"]["total"], 3000);
        assert_eq!(r["mismatches"], 0);
        assert_eq!(r["workers"], 4);
    }
}

#[test]
fn replay_of_an_absent_offset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "store 1 5\nload 2\n").unwrap();
    let out = sealswap(&["replay", "--trace", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("offset 2 has no stored page"), "{err}");
}

#[test]
fn audit_exit_codes() {
    let good = sealswap(&["audit", "--cycles", "1000", "--donor-pages", "512"]);
    assert!(good.status.success());
    assert_eq!(json(&good)["pass"], true);
    let bad = sealswap(&["audit", "--cycles", "1000", "--donor-pages", "512", "--sequential"]);
    assert_eq!(bad.status.code(), Some(2));
    assert_eq!(json(&bad)["pass"], false);
    let short = sealswap(&["audit", "--cycles", "999"]);
    assert_eq!(short.status.code(), Some(1));
}

#[test]
fn adversary_and_bench_report_json() {
    let adv = sealswap(&["adversary", "--fuzz-frames", "200"]);
    assert!(adv.status.success());
    assert_eq!(json(&adv)["attacks"].as_array().unwrap().len(), 4);
    let bench = sealswap(&["bench", "--tier", "donor-dram", "--pages", "20"]);
    assert!(bench.status.success());
    assert_eq!(json(&bench)["latency_us"]["load.donor-dram"]["count"], 20);
    assert_eq!(sealswap(&["bench", "--tier", "nowhere"]).status.code(), Some(1));
}

#[test]
fn sigterm_writes_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("donor.snap");
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        format!(
            "snapshot = {snap:?}\n\n\
             [donee]\nmid = 1\ndonor_mid = 7\nswap_offsets = 4\nlocal_pages = 0\n\n\
             [donor]\nmid = 7\nhbm_pages = 16\ndram_pages = 16\n\n\
             [transport]\nmode = \"tcp\"\naddress = \"127.0.0.1:0\"\ncontrol_address = \"127.0.0.1:0\"\n"
        ),
    )
    .unwrap();
    let mut donor = Command::new(BIN)
        .args(["--config", cfg.to_str().unwrap(), "donor"])
        .env("RUST_LOG", "error")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    // keep the pipe open: the donor prints a second line
    let mut lines = BufReader::new(donor.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    assert!(first.starts_with("data "), "{first}");
    assert!(lines.next().unwrap().unwrap().starts_with("control "));
    let kill = Command::new("kill").args(["-TERM", &donor.id().to_string()]).status().unwrap();
    assert!(kill.success());
    let deadline = Instant::now() + Duration::from_secs(20);
    let status = loop {
        if let Some(s) = donor.try_wait().unwrap() {
            break s;
        }
        assert!(Instant::now() < deadline, "donor ignored SIGTERM");
        std::thread::sleep(Duration::from_millis(20));
    };
    assert!(status.success());
    assert!(snap.exists());
}
