use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 21

[data]
frames_per_scheme_per_snr = 10
snr_grid = [-16, -6, 4, 14]

[arch]
stem_channels = 4
stage_widths = [4, 6, 8]
blocks_per_stage = 1

[backbone.hyper]
epochs = 1

[exit.hyper]
epochs = 3

[lbap.hyper]
epochs = 4
batch_size = 32
"#;

fn beacon(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_beacon"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn stages_run_one_at_a_time_and_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ok(&beacon(d, &["gen-data"])).contains("400 frames"));
    ok(&beacon(d, &["train-backbone"]));
    ok(&beacon(d, &["--exit-point", "2", "train-exit"]));
    ok(&beacon(d, &["--exit-point", "2", "train-lbap"]));
    let sweep = ok(&beacon(d, &["--exit-point", "2", "--criterion", "entropy", "sweep"]));
    assert_eq!(sweep.lines().count(), 21);
    for cmd in ["bins", "budget", "min-cost", "invocation", "snr-report", "calibration"] {
        ok(&beacon(d, &["--exit-point", "2", cmd]));
    }
    let out = d.join("out");
    for f in [
        "dataset.bin",
        "backbone.ck",
        "model_rs2.ck",
        "model_rs2.manifest",
        "lbap_rs2.ck",
        "tradeoff_rs2.csv",
        "bins_rs2.csv",
        "budget_rs2.csv",
        "min_cost_rs2.csv",
        "invocation_rs2.csv",
        "snr_rs2.csv",
        "calibration.csv",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"tradeoff_rs2.csv\""));
    assert!(manifest.contains("\"EE-RS2\""));
    let bins = fs::read_to_string(out.join("bins_rs2.csv")).unwrap();
    assert!(bins.lines().next().unwrap().starts_with("# config_hash: "));
}

#[test]
fn config_errors_have_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[data]\nframes = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_beacon"))
        .args(["--config", bad.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));

    let o = Command::new(env!("CARGO_BIN_EXE_beacon"))
        .args(["--config", dir.path().join("absent.toml").to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn reusing_an_output_directory_with_another_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&beacon(d, &["gen-data"]));
    let o = beacon(d, &["--seed", "22", "gen-data"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn print_config_applies_the_master_seed() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&beacon(dir.path(), &["--seed", "3", "print-config"]));
    assert!(text.contains("seed = 3"));
    assert!(text.contains("frames_per_scheme_per_snr = 10"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&beacon(dir.path(), &["gradcheck", "--instances", "1"]));
    assert!(text.lines().all(|l| l.starts_with("[PASS]")), "{text}");
}
