//! End-to-end tests of the `abp` binary: pipelines, file formats, exit
//! codes, reproducibility, and manifest replay.

use std::path::Path;
use std::process::{Command, Output};

fn abp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abp"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn num(v: &serde_json::Value, key: &str) -> f64 {
    v[key].as_f64().unwrap()
}

#[test]
fn optimal_pipeline_merge_at_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = abp(
        dir.path(),
        &[
            "optimal", "--x", "-1,1", "--m", "0.5,0.5", "--xi", "0", "--t", "10",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = read_json(&dir.path().join("optimal_summary.json"));
    assert!(num(&summary, "rateq").abs() < 1e-13);
    assert!((num(&summary, "l_she") - 1.0 / 6.0).abs() < 1e-12);
    let tree = read_json(&dir.path().join("merge_tree.json"));
    let events = tree["events"].as_array().unwrap();
    assert_eq!(events.len(), 1);
    assert!((events[0]["time"].as_f64().unwrap() - 4.0).abs() < 1e-12);
    let csv = std::fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
    assert!(csv.starts_with("s,x_1,x_2\n"));
}

#[test]
fn optimal_one_point_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = abp(
        dir.path(),
        &["optimal", "--x", "0", "--m", "1", "--xi", "0", "--t", "1"],
    );
    assert!(out.status.success());
    let summary = read_json(&dir.path().join("optimal_summary.json"));
    assert!((num(&summary, "l_she") - 1.0 / 24.0).abs() < 1e-14);
}

#[test]
fn optimal_rejects_unordered_positions() {
    let dir = tempfile::tempdir().unwrap();
    let out = abp(
        dir.path(),
        &[
            "optimal", "--x", "1,0", "--m", "0.5,0.5", "--xi", "0", "--t", "1",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("strictly increasing"), "{err}");
}

#[test]
fn shape_tent_and_inversion() {
    let dir = tempfile::tempdir().unwrap();
    let out = abp(
        dir.path(),
        &[
            "shape",
            "--t",
            "1",
            "--x",
            "0",
            "--h",
            "0.5",
            "--samples",
            "201",
        ],
    );
    assert!(out.status.success());
    let summary = read_json(&dir.path().join("shape_summary.json"));
    assert!((num(&summary, "i_kpz") - 2.0 / 3.0).abs() < 1e-12);

    let dir2 = tempfile::tempdir().unwrap();
    let out = abp(dir2.path(), &["shape", "--t", "1", "--x", "0", "--m", "2"]);
    assert!(out.status.success());
    let summary = read_json(&dir2.path().join("shape_summary.json"));
    assert!((summary["h"][0].as_f64().unwrap() - 0.5).abs() < 1e-9);

    let dir3 = tempfile::tempdir().unwrap();
    let out = abp(dir3.path(), &["shape", "--t", "1", "--x", "0", "--h", "-1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shape_writes_shocks_and_evolutions() {
    let dir = tempfile::tempdir().unwrap();
    let out = abp(
        dir.path(),
        &[
            "shape", "--t", "2", "--x", "-1,1", "--m", "1,1", "--times", "0.5,1.5",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("shocks.csv").exists());
    assert!(dir.path().join("shape_at_0.json").exists());
    assert!(dir.path().join("shape_at_1.json").exists());
    let evolved = read_json(&dir.path().join("shape_at_0.json"));
    assert!((evolved["t"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn shape_non_concave_still_evaluates() {
    // A v-kink at the middle node: valid shape, no shock tracking.
    let dir = tempfile::tempdir().unwrap();
    let out = abp(
        dir.path(),
        &["shape", "--t", "1", "--x", "-1,0,1", "--h", "0.5,0,0.5"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = read_json(&dir.path().join("shape_summary.json"));
    assert_eq!(summary["concave"], serde_json::Value::Bool(false));
    assert!(summary["gradient"][1].as_f64().unwrap() < 0.0, "v-kink");
    assert!(!dir.path().join("shocks.csv").exists());
}

#[test]
fn duality_tolerance_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = abp(dir.path(), &["duality", "--t", "1", "--x", "0", "--m", "2"]);
    assert!(out.status.success());
    let summary = read_json(&dir.path().join("duality.json"));
    assert!(num(&summary, "residual") <= 1e-12);
    assert!((num(&summary, "l_from_clusters") - 1.0 / 3.0).abs() < 1e-12);

    let dir2 = tempfile::tempdir().unwrap();
    let out = abp(
        dir2.path(),
        &["duality", "--t", "1", "--x", "0", "--m", "2", "--tol", "0"],
    );
    assert_eq!(out.status.code(), Some(3), "float residual is nonzero");
}

#[test]
fn simulate_deterministic_gap_closure() {
    let dir = tempfile::tempdir().unwrap();
    let out = abp(
        dir.path(),
        &[
            "simulate",
            "--n",
            "2",
            "--t-scale",
            "1",
            "--noise-scale",
            "0",
            "--x",
            "0,1",
            "--m",
            "0.5,0.5",
            "--t",
            "1",
            "--seed",
            "5",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let dt = 1e-3 / 2.0;
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let (t, x1, x2) = (cols[0], cols[1], cols[2]);
        let expected_gap = (2.0 - t).max(0.0);
        assert!(
            ((x2 - x1) - expected_gap).abs() <= 10.0 * dt,
            "gap at t={t}: {} vs {expected_gap}",
            x2 - x1
        );
    }
}

#[test]
fn simulate_seeded_runs_have_identical_digests() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let args = [
        "simulate",
        "--n",
        "8",
        "--t-scale",
        "0.5",
        "--replicas",
        "3",
        "--seed",
        "9",
    ];
    assert!(abp(dir_a.path(), &args).status.success());
    assert!(abp(dir_b.path(), &args).status.success());
    let ma = read_json(&dir_a.path().join("simulate_manifest.json"));
    let mb = read_json(&dir_b.path().join("simulate_manifest.json"));
    assert_eq!(ma["outputs"], mb["outputs"], "bit-identical outputs");
}

#[test]
fn simulate_rejects_zero_dt() {
    let dir = tempfile::tempdir().unwrap();
    let out = abp(
        dir.path(),
        &["simulate", "--n", "4", "--t-scale", "1", "--dt", "0"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rate_mom_lyapunov_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out = abp(
        dir.path(),
        &[
            "optimal", "--x", "-1,1", "--m", "0.5,0.5", "--xi", "0", "--t", "10",
        ],
    );
    assert!(out.status.success());
    let dev = dir.path().join("deviation.json");
    let dev_arg = dev.to_str().unwrap();

    let out = abp(dir.path(), &["rate", "--deviation", dev_arg]);
    assert!(out.status.success());
    let rate = read_json(&dir.path().join("rate.json"));
    assert!(num(&rate, "total").abs() < 1e-12);

    let out = abp(
        dir.path(),
        &["mom", "--deviation", dev_arg, "--interval", "0,10"],
    );
    assert!(out.status.success());
    let mom = read_json(&dir.path().join("mom.json"));
    assert!((num(&mom, "total") - 1.0 / 6.0).abs() < 1e-12);

    let out = abp(
        dir.path(),
        &[
            "lyapunov", "--x", "-1,1", "--m", "0.5,0.5", "--xi", "0", "--t", "10",
        ],
    );
    assert!(out.status.success());
    let lyap = read_json(&dir.path().join("lyapunov.json"));
    assert_eq!(num(&lyap, "total"), num(&mom, "total"));
}

#[test]
fn replay_reproduces_digests() {
    let dir = tempfile::tempdir().unwrap();
    let out = abp(
        dir.path(),
        &[
            "simulate",
            "--n",
            "8",
            "--t-scale",
            "0.2",
            "--replicas",
            "2",
            "--seed",
            "31",
        ],
    );
    assert!(out.status.success());
    let replay_dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("simulate_manifest.json");
    let out = abp(
        replay_dir.path(),
        &["replay", "--manifest", manifest.to_str().unwrap()],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("replay verified"), "{stdout}");
}

#[test]
fn config_file_defaults_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "x = 0\nm = 1\nxi = 0\nt = 2\n").unwrap();
    // Config alone: horizon 2.
    let out = abp(dir.path(), &["optimal", "--config", cfg.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = read_json(&dir.path().join("optimal_summary.json"));
    assert!((num(&summary, "l_she") - 2.0 / 24.0).abs() < 1e-14);
    // Flag overrides config: horizon 1.
    let out = abp(
        dir.path(),
        &["optimal", "--config", cfg.to_str().unwrap(), "--t", "1"],
    );
    assert!(out.status.success());
    let summary = read_json(&dir.path().join("optimal_summary.json"));
    assert!((num(&summary, "l_she") - 1.0 / 24.0).abs() < 1e-14);
}
