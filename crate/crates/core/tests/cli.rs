//! End-to-end tests of the command-line harness: exit-code contract,
//! catalog listing, and byte-level determinism of emitted tables.

use std::path::Path;
use std::process::{Command, Output};

fn bsdelab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bsdelab"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bsdelab()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const TRIVIAL_CONFIG: &str = r#"{
  "study": "bsde-convergence",
  "tstar": 1.0,
  "clock": {"steps": 2, "delta": 0.25},
  "factors": 1,
  "branching": "full-binary",
  "kernel": {"family": "constant", "level": 1.0},
  "maturities": [0.5],
  "beta": 4.0,
  "driver": {"family": "zero"},
  "claim": {"family": "constant", "value": 2.0}
}"#;

#[test]
fn trivial_config_exits_zero_with_zero_distances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "trivial.json", TRIVIAL_CONFIG);
    let out = run_in(dir.path(), &["run", &cfg, "--out", "result"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("result/bsde_convergence.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "n,norm_Y,norm_H,norm_N,s_beta_total,gamma,bound_slack"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "1");
    assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn beta_three_rejected_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let body = TRIVIAL_CONFIG.replace("\"beta\": 4.0", "\"beta\": 3.0");
    let cfg = write_config(dir.path(), "beta3.json", &body);
    let out = run_in(dir.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("beta > 3"), "stderr: {stderr}");

    let out = run_in(dir.path(), &["validate", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn schema_violation_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let body = TRIVIAL_CONFIG.replace("\"maturities\": [0.5]", "\"maturities\": [0.5, 2.0]");
    let cfg = write_config(dir.path(), "bad_maturity.json", &body);
    let out = run_in(dir.path(), &["validate", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("maturities"));
}

#[test]
fn node_cap_exit_three_with_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cap.json", TRIVIAL_CONFIG);
    let out = run_in(dir.path(), &["run", &cfg, "--cap", "3"]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("7"), "computed node count missing: {stderr}");
}

#[test]
fn config_output_field_sets_default_directory() {
    let dir = tempfile::tempdir().unwrap();
    let body = TRIVIAL_CONFIG.replace(
        "\"claim\": {\"family\": \"constant\", \"value\": 2.0}",
        "\"claim\": {\"family\": \"constant\", \"value\": 2.0},\n  \"output\": \"from_config\"",
    );
    let cfg = write_config(dir.path(), "with_output.json", &body);
    let out = run_in(dir.path(), &["run", &cfg]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("from_config/bsde_convergence.csv").exists());
    // The flag still wins over the config field.
    let out = run_in(dir.path(), &["run", &cfg, "--out", "flagged"]);
    assert!(out.status.success());
    assert!(dir.path().join("flagged/bsde_convergence.csv").exists());
}

#[test]
fn unattainable_claim_in_hedging_study_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{
      "study": "hedging-convergence",
      "tstar": 1.0,
      "clock": {"steps": 2, "delta": 0.2},
      "factors": 2,
      "branching": "full-binary",
      "kernel": {"family": "constant", "level": 1.0},
      "maturities": [0.5, 1.0],
      "beta": 4.0,
      "market": {"lambda": {"family": "zero"}},
      "claim": {"family": "unspanned-factor", "factor": 2}
    }"#;
    let cfg = write_config(dir.path(), "unattainable.json", body);
    let out = run_in(dir.path(), &["run", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not attainable"));
}

#[test]
fn families_catalog_is_stable_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_in(dir.path(), &["families"]);
    assert!(first.status.success());
    let text = String::from_utf8(first.stdout).unwrap();
    for name in [
        "constant",
        "rank1-linear",
        "exp-distance",
        "time-modulated",
        "attainable-forward",
        "unspanned-factor",
        "constant-dirac",
        "step-varying",
    ] {
        assert!(text.contains(name), "missing {name} in catalog");
    }
    let second = run_in(dir.path(), &["families"]);
    assert_eq!(text, String::from_utf8(second.stdout).unwrap());
}

#[test]
fn validate_accepts_shipped_configs() {
    let dir = tempfile::tempdir().unwrap();
    let configs_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(configs_dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().map(|e| e == "json").unwrap_or(false) {
            let out = run_in(dir.path(), &["validate", path.to_str().unwrap()]);
            assert!(
                out.status.success(),
                "{} failed validation: {}",
                path.display(),
                String::from_utf8_lossy(&out.stderr)
            );
        }
    }
}

#[test]
fn reference_config_rerun_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let reference = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    let cfg = reference.to_str().unwrap();
    let a = run_in(dir.path(), &["run", cfg, "--out", "a"]);
    assert!(a.status.success(), "stderr: {}", String::from_utf8_lossy(&a.stderr));
    let b = run_in(dir.path(), &["run", cfg, "--out", "b", "--threads", "1"]);
    assert!(b.status.success());
    let csv_a = std::fs::read(dir.path().join("a/bsde_convergence.csv")).unwrap();
    let csv_b = std::fs::read(dir.path().join("b/bsde_convergence.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "CSV outputs differ between reruns");
}

#[test]
fn csv_uses_lf_and_seventeen_significant_digits() {
    let dir = tempfile::tempdir().unwrap();
    let reference = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    let out = run_in(dir.path(), &["run", reference.to_str().unwrap(), "--out", "fmt"]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(dir.path().join("fmt/bsde_convergence.csv")).unwrap();
    assert!(!csv.contains('\r'), "CRLF found in CSV");
    // A mantissa with 16 fractional digits => 17 significant digits.
    let sample = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(5)
        .unwrap()
        .to_string();
    let mantissa = sample.split('e').next().unwrap();
    let frac = mantissa.split('.').nth(1).unwrap();
    assert_eq!(frac.len(), 16, "sample {sample}");
}
