use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rrsynth_core::pipeline::{verify_artifacts, REPORT_FILE};
use rrsynth_core::RunReport;

fn rrsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrsynth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rrsynth(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn report(dir: &Path) -> RunReport {
    serde_json::from_str(&fs::read_to_string(dir.join(REPORT_FILE)).unwrap()).unwrap()
}

const SMALL: &[&str] = &["--m-draws", "40", "--s-draws", "60"];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(SMALL).chain(extra).copied().collect()
}

#[test]
fn run_writes_a_verified_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let stdout = ok(&with(&["run"], &["--out", out]));
    assert!(stdout.contains("avg_0.6_1.2"));
    let r = report(dir.path());
    assert_eq!(r.variants.len(), 6);
    assert!(verify_artifacts(dir.path(), &r.artifacts).is_empty());
    for f in [
        "weights.csv",
        "lambdas.csv",
        "accounts_weighted.csv",
        "synthetic_trunc_0.4_1.8.csv",
        "utility_avg_0.4_1.8.json",
    ] {
        assert!(r.artifacts.iter().any(|a| a.file == f), "{f} missing from manifest");
    }
    fs::write(dir.path().join("weights.csv"), "tampered").unwrap();
    assert_eq!(
        verify_artifacts(dir.path(), &r.artifacts),
        vec!["weights.csv".to_string()]
    );
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&with(&["run", "--seed", "5"], &["--out", out]));
    let first = fs::read(dir.path().join(REPORT_FILE)).unwrap();
    ok(&with(&["run", "--seed", "5"], &["--out", out]));
    assert_eq!(first, fs::read(dir.path().join(REPORT_FILE)).unwrap());
}

#[test]
fn unweighted_only_has_no_weight_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&with(&["run", "--standard", "unweighted"], &["--out", out]));
    let r = report(dir.path());
    assert!(r.weights.is_none() && r.lambdas.is_empty());
    assert!(!dir.path().join("weights.csv").exists());
    assert!(!dir.path().join("lambdas.csv").exists());
}

#[test]
fn stage_labelled_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let bad_range = rrsynth(&with(&["run", "--range", "1.2,1.8"], &["--out", out]));
    assert!(!bad_range.status.success());
    assert!(String::from_utf8_lossy(&bad_range.stderr).contains("config: invalid range"));

    let too_high = rrsynth(&with(
        &["account", "--standard", "weighted", "--target-epsilon", "1000"],
        &["--out", out],
    ));
    assert!(!too_high.status.success());
    assert!(String::from_utf8_lossy(&too_high.stderr).contains("calibration: target above uncalibrated budget"));

    let missing = rrsynth(&with(&["fit", "--input", "/nonexistent/x.csv"], &["--out", out]));
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error: load:"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# small run\nstandards = weighted, truncated\nranges = 0.5,1.5\nm_draws = 30\nseed = 2\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    ok(&[
        "account",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    let r = report(&out);
    assert_eq!(r.config.seed, 3);
    assert_eq!(r.config.m_draws, 30);
    let labels: Vec<_> = r.variants.iter().map(|v| v.label.as_str()).collect();
    assert_eq!(labels, ["weighted", "trunc_0.5_1.5"]);
    assert!(!out.join("synthetic_weighted.csv").exists());
}

#[test]
fn simulated_csv_round_trips_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--seed", "4", "--out", sim.to_str().unwrap()]);
    let data = sim.join("data.csv");
    // The simulated predictor must be declared; transforms are never inferred.
    let cfg = dir.path().join("csv.cfg");
    fs::write(&cfg, format!("input = {}\npredictors = z\n", data.display())).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&with(&["account", "--seed", "4"], &["--out", a.to_str().unwrap()]));
    ok(&with(
        &["account", "--seed", "4", "--config", cfg.to_str().unwrap()],
        &["--out", b.to_str().unwrap()],
    ));
    let eps = |d: &Path| report(d).variants.iter().map(|v| v.account.epsilon).collect::<Vec<_>>();
    assert_eq!(eps(&a), eps(&b));
}

#[test]
fn utility_against_external_synthetic_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&with(&["synthesize", "--standard", "weighted"], &["--out", out]));
    let syn = dir.path().join("synthetic_weighted.csv");
    let stdout = ok(&with(
        &["utility", "--synthetic", syn.to_str().unwrap()],
        &["--out", out],
    ));
    let m: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let mx = m["max_ecdf"].as_f64().unwrap();
    assert!(mx > 0.0 && mx < 0.2);
}

#[test]
fn experiment_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&[
        "experiment",
        "ordering",
        "--replicates",
        "2",
        "--m-draws",
        "20",
        "--s-draws",
        "30",
        "--out",
        out,
    ]);
    assert!(dir.path().join("experiment_ordering.json").exists());
    let rows = fs::read_to_string(dir.path().join("replicates_ordering.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 6);
}
