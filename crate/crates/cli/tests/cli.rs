use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[physical]
bandwidth_mhz = 20.0
carrier_ghz = 2.0
tau_c = 200
tau_p = 2
tau_u = 0
noise_ul_dbm = -94.0
noise_dl_dbm = -94.0
eta_mw = 100.0
rho_max_mw = 200.0
height_m = 10.0
sigma_sf_db = 4.0
delta_sf_m = 9.0
lambda = 0.04

[scenario]
grid_side = 2
area_side_m = 500.0
jitter_fraction = 0.5
antennas = 2

[dataset]
num_ues = 3
train_locations = 4
test_locations = 6

[policy]
hidden = 6
head_widths = [8]

[training]
epochs = 3
batch_size = 4
learning_rate = 1e-3
baseline_variance_reduction = true
checkpoint_every = 2
"#;

fn cellfree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellfree"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

#[test]
fn missing_config_names_the_path() {
    let out = cellfree(&["baseline", "--config", "/no/such/config.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/config.toml"), "{err}");
}

#[test]
fn unknown_subcommand_fails() {
    assert!(!cellfree(&["plot"]).status.success());
}

#[test]
fn malformed_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "seed = \"x\"\n").unwrap();
    let out = cellfree(&["dataset", "--config", s(&path), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn baseline_writes_report_and_map() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = cellfree(&["baseline", "--config", s(&cfg), "--out", s(&out_dir), "--map", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mean SE sum") && stdout.contains("mean connections"));
    let report = fs::read_to_string(out_dir.join("baseline_report.csv")).unwrap();
    let mut lines = report.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "location,method,se_sum,connections,objective,se_ue0,se_ue1,se_ue2");
    assert_eq!(lines.count(), 6);
    let map = fs::read_to_string(out_dir.join("baseline_map_1.txt")).unwrap();
    assert_eq!(map.lines().filter(|l| l.starts_with("AP ")).count(), 4);
    assert_eq!(map.lines().filter(|l| l.starts_with("UE ")).count(), 3);

    let bad = cellfree(&["baseline", "--config", s(&cfg), "--out", s(&out_dir), "--map", "6"]);
    assert!(!bad.status.success());
}

#[test]
fn train_and_eval_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut files = Vec::new();
    for run in 0..2 {
        let out_dir = dir.path().join(format!("run{run}"));
        let t = cellfree(&["train", "--config", s(&cfg), "--out", s(&out_dir)]);
        assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
        let ckpt = out_dir.join("checkpoint.json");
        let e = cellfree(&["eval", "--config", s(&cfg), "--out", s(&out_dir), "--checkpoint", s(&ckpt), "--map", "0"]);
        assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
        files.push(
            ["history.csv", "checkpoint.json", "checkpoint_epoch0002.json", "policy_report.csv", "policy_map_0.txt"]
                .map(|f| fs::read(out_dir.join(f)).unwrap()),
        );
    }
    assert_eq!(files[0], files[1]);

    let other = dir.path().join("seed9");
    let t = cellfree(&["train", "--config", s(&cfg), "--out", s(&other), "--seed", "9"]);
    assert!(t.status.success());
    assert_ne!(fs::read(other.join("checkpoint.json")).unwrap(), files[0][1]);
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    assert!(cellfree(&["train", "--config", s(&cfg), "--out", s(&out_dir)]).status.success());
    let wider = dir.path().join("wider.toml");
    fs::write(&wider, TINY.replace("grid_side = 2", "grid_side = 3")).unwrap();
    let ckpt = out_dir.join("checkpoint.json");
    let out = cellfree(&["eval", "--config", s(&wider), "--out", s(&out_dir), "--checkpoint", s(&ckpt)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    let missing = cellfree(&["eval", "--config", s(&cfg), "--checkpoint", "/no/ckpt.json"]);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/no/ckpt.json"));
}

#[test]
fn validate_reports_both_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = cellfree(&["validate", "--config", s(&cfg), "--trials", "20000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max MC relative error"));
    assert!(stdout.contains("max gradient relative error"));
}

#[test]
fn dataset_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = cellfree(&["dataset", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("dataset.json")).unwrap();
    assert!(text.contains("\"train\"") && text.contains("\"test\""));
}
