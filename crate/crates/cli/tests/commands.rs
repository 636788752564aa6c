use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn treemix(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treemix")).args(args).arg("--out-dir").arg(out).output().unwrap()
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn build_reports_levels_and_regions() {
    let dir = tempfile::tempdir().unwrap();
    let out = treemix(&["build", "--k", "2"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["levels"], serde_json::json!([[1, 4], [2, 16]]));
    assert_eq!(summary["mass"], 4096);
    let csv = std::fs::read_to_string(dir.path().join("regions.csv")).unwrap();
    assert!(csv.starts_with("name,requested_size,actual_size,root_position,depth\n"));
    let manifest = json_file(&dir.path().join("build.manifest.json"));
    assert_eq!(manifest["command"], "build");
    assert_eq!(manifest["outputs"], serde_json::json!(["regions.csv", "summary.json"]));
}

#[test]
fn perfect_mode_reports_requested_and_actual_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = treemix(&["build", "--k", "2", "--alpha", "2", "--mode", "perfect"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    // N = 16^2 = 256; trees of 256, 64 and 16 requested, rounded down to 2^d - 1.
    let sizes: Vec<(u64, u64)> = summary["regions"]
        .as_array()
        .unwrap()
        .iter()
        .skip(1)
        .map(|r| (r["requested_size"].as_u64().unwrap(), r["actual_size"].as_u64().unwrap()))
        .collect();
    assert_eq!(sizes, vec![(256, 255), (64, 63), (16, 15)]);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["build", "--k", "0"][..],
        &["build"],
        &["mc", "--k", "2", "--replicates", "0", "--seed", "1"],
        &["mc", "--k", "2"],
        &["couple", "--k", "1"],
        &["tmix", "--k", "1", "--eps", "1.5"],
        &["build", "--k", "1", "--mode", "ragged"],
        &["bogus"],
    ] {
        let out = treemix(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn tmix_prints_integer_then_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = treemix(&["tmix", "--k", "1", "--eps", "0.25"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let (first, rest) = text.split_once('\n').unwrap();
    let t: u64 = first.parse().unwrap();
    let v: Value = serde_json::from_str(rest).unwrap();
    assert_eq!(v["tmix"], t);
    assert!(v["distance_at_tmix"].as_f64().unwrap() <= 0.25);
}

#[test]
fn config_file_merges_with_flags() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# family\nk = 3\nmode = exact_size\n").unwrap();
    let out = treemix(&["build", "--config", conf.to_str().unwrap(), "--k", "1"], &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["spec"]["k"], 1);
    assert_eq!(v["mode"], "exact_size");
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_treemix"))
        .args(["build", "--k", "1"])
        .env("TREEMIX_OUT_DIR", dir.path())
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn every_csv_has_a_header() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["profile", "--k", "1", "--points", "20"][..],
        &["hitting", "--k", "1"],
        &["spectral", "--k", "1", "--poincare", "--trials", "50"],
        &["mc", "--k", "1", "--seed", "3", "--replicates", "200"],
        &["couple", "--k", "1", "--seed", "3", "--replicates", "200"],
        &["verify", "--k", "1", "--replicates", "2000", "--trials", "50"],
        &["sweep", "--ks", "1,2", "--eps", "0.25"],
    ] {
        let out = treemix(args, dir.path());
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut seen = Vec::new();
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "csv") {
            let text = std::fs::read_to_string(&path).unwrap();
            let header = text.lines().next().unwrap();
            assert!(header.chars().next().unwrap().is_ascii_alphabetic(), "{}: {header}", path.display());
            seen.push(path.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    seen.sort();
    let expected = [
        "coupling_samples.csv",
        "coupling_tail.csv",
        "cutoff.csv",
        "hitting.csv",
        "mc_samples.csv",
        "poincare_trees.csv",
        "profile.csv",
        "verify_checks.csv",
    ];
    assert_eq!(seen, expected);
}

#[test]
fn mc_matches_exact_mean_and_hitting_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let out = treemix(&["mc", "--k", "1", "--seed", "5", "--replicates", "4000"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v = json_file(&dir.path().join("mc_summary.json"));
    assert!(v["mean_z"].as_f64().unwrap().abs() < 4.0);
    assert_eq!(v["stats"]["truncations"], 0);
    let out = treemix(&["hitting", "--k", "1", "--start", "path:4"], &dir.path().join("h"));
    let h: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(h["starts"][0]["mean"], v["exact"]["mean"]);
}

#[test]
fn verify_and_sweep_succeed_on_small_members() {
    let dir = tempfile::tempdir().unwrap();
    let out = treemix(&["verify", "--k", "1", "--replicates", "5000", "--trials", "100"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json_file(&dir.path().join("verify.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["manifest"], "verify.manifest.json");
}

#[test]
fn sweep_failure_is_reported_per_k_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    // Exact-size trees of the k = 3 member are neither perfect nor dense-sized.
    let out = treemix(&["sweep", "--ks", "1,3", "--mode", "exact_size", "--eps", "0.25"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let v = json_file(&dir.path().join("cutoff.json"));
    let failed: Vec<u64> = v["failures"].as_array().unwrap().iter().map(|f| f[0].as_u64().unwrap()).collect();
    assert!(failed.contains(&3));
}
