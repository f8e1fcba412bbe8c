use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
streams_per_pol = 1
tx_layers = 2
rx_layers = 2
tx_units_per_layer = 9
rx_units_per_layer = 9
init_candidates = 4
max_epochs = 3
";

fn dpsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpsim")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn validate_config() {
    let o = dpsim(&["validate-config"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("tx_units_per_layer = 100"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "pol_conversion_ratio = 1.5\n");
    let o = dpsim(&["validate-config", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8(o.stderr).unwrap().contains("pol_conversion_ratio"));

    let missing = dir.path().join("nope.cfg");
    assert_eq!(code(&dpsim(&["validate-config", "--config", missing.to_str().unwrap()])), 1);
}

#[test]
fn usage_errors() {
    assert_eq!(code(&dpsim(&["frobnicate"])), 1);
    assert_eq!(code(&dpsim(&["convergence"])), 1);
    assert_eq!(code(&dpsim(&["--help"])), 0);
}

#[test]
fn grad_check() {
    let o = dpsim(&["grad-check", "--instances", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8(o.stdout).unwrap().contains("max relative error"));
    // A step this coarse cannot meet the tolerance.
    assert_eq!(code(&dpsim(&["grad-check", "--instances", "2", "--step", "0.5"])), 2);
}

#[test]
fn campaign_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = |threads: &str, out: &str| {
        let out = dir.path().join(out);
        let o = dpsim(&[
            "ee-vs-power", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap(), "--trials", "3",
            "--threads", threads, "--sweep", "transmit_power=10dBm,30dBm",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["ee_vs_power.csv", "ee_vs_power_summary.csv", "ee_vs_power.json"] {
            assert!(out.join(f).exists());
        }
        std::fs::read(out.join("ee_vs_power.csv")).unwrap()
    };
    let a = run("1", "a");
    let b = run("2", "b");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("experiment,stack_mode,pol_conversion_ratio,transmit_power,seed,trial,metric,value\n"));
    assert!(text.lines().nth(1).unwrap().starts_with("ee_vs_power,dual_polarized,0.2,10dBm,3,0,"));
}

#[test]
fn bad_sweeps_and_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let base = ["convergence", "--config", &cfg, "--out", out, "--trials", "1"];

    let mut args = base.to_vec();
    args.extend(["--sweep", "streams_per_pol=1,50"]);
    assert_eq!(code(&dpsim(&args)), 1);

    let mut args = base.to_vec();
    args.extend(["--sweep", "bogus"]);
    assert_eq!(code(&dpsim(&args)), 1);

    let mut args = base.to_vec();
    args.extend(["--threads", "0"]);
    assert_eq!(code(&dpsim(&args)), 1);

    let mut args = base.to_vec();
    args.extend(["--sweep", "link_distance=100,1e300"]);
    let o = dpsim(&args);
    assert_eq!(code(&o), 2);
    // The healthy point is still written.
    let csv = std::fs::read_to_string(Path::new(out).join("convergence.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("convergence,100,")));
    assert!(csv.lines().count() > 1);
}
