use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use friedrichs_core::config::{QList, RunConfig};

fn friedrichs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_friedrichs")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn info_reports_the_toy_system() {
    let out = friedrichs(&["info"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["particle_count"], 7);
    assert_eq!(v["transfer_count"], 3);
    assert_eq!(v["patches"]["patches"].as_array().unwrap().len(), 6);
}

#[test]
fn odd_patch_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { m: 5, ..RunConfig::toy() };
    std::fs::write(dir.path().join("c.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = friedrichs(&["--config", dir.path().join("c.json").to_str().unwrap(), "info"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = friedrichs(&["--config", "/nonexistent/friedrichs.json", "info"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_q_list_writes_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { q_list: QList::Momenta(vec![]), ..RunConfig::toy() };
    let path = write_config(dir.path(), &cfg);
    let csv = dir.path().join("out.csv");
    let out =
        friedrichs(&["--config", path.to_str().unwrap(), "--format", "csv", "--out", csv.to_str().unwrap(), "nq"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(&csv).unwrap(), b"");
    let json = dir.path().join("out.json");
    let out = friedrichs(&["--config", path.to_str().unwrap(), "--out", json.to_str().unwrap(), "nq"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&json).unwrap().trim(), "[]");
}

#[test]
fn odd_exact_order_is_rejected() {
    let out = friedrichs(&["nq", "--method", "exact-truncated", "--order", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_method_is_rejected() {
    let out = friedrichs(&["nq", "--method", "perturbative"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nq_csv_columns_and_oracle_rows() {
    let out =
        friedrichs(&["--format", "csv", "nq", "--method", "oracle", "--method", "exact-truncated", "--order", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("qx,qy,qz,side,method,n_max,value"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][..5], ["0", "0", "2", "outside", "oracle"]);
    assert_eq!(rows[1][4..6], ["exact-truncated", "2"]);
    assert_eq!(rows[3][3], "inside");
    for r in &rows {
        let v: f64 = r[6].parse().unwrap();
        assert!(v > 0.0 && v < 1.0);
    }
}

#[test]
fn export_patches_lists_claimed_points() {
    let out = friedrichs(&["--format", "csv", "export-patches"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("qx,qy,qz,patch,role\n"));
    assert!(text.lines().any(|l| l == "0,0,1,B3,hole"), "{text}");
}

#[test]
fn sabotaged_sign_fails_verification() {
    let out = friedrichs(&["--format", "csv", "verify", "--sabotage-sign"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("FAIL  2")), "{text}");
}
