use std::path::Path;
use std::process::{Command, Output};

fn heatsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatsc")).args(args).output().expect("run heatsc")
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

#[test]
fn malformed_panel_is_an_input_error_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("panel.csv");
    std::fs::write(&panel, "unit_id,date,outcome,heat\nA,2020-06-01,1.0,30\nA,2020-06-02,oops,31\n").unwrap();
    let out = heatsc(&["detect", "--panel", &p(&panel), "--out", &p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn missing_input_file_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = heatsc(&["pool", "--inputs", &p(&dir.path().join("absent.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pool_reads_episode_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rr.csv");
    std::fs::write(&input, "log_rr,variance\n0.1,0.01\n0.1,0.01\n0.1,0.01\n").unwrap();
    let out = heatsc(&["pool", "--inputs", &p(&input)]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["rr"].as_f64().unwrap() - 0.1f64.exp()).abs() < 1e-12);
    assert_eq!(v["k"], 3);
}

#[test]
fn simulate_fit_evaluate_chain() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let fits = dir.path().join("fits");
    let out = heatsc(&["--seed", "3", "simulate", "--scenario", "sd", "--reps", "1", "--out", &p(&sim)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["centroids.csv", "adjacency.csv", "rep_0000_panel.csv", "rep_0000_truth.csv", "manifest.json"] {
        assert!(sim.join(name).exists(), "{name}");
    }

    let pool_args = [
        "--panel",
        &p(&sim.join("rep_0000_panel.csv")),
        "--episodes",
        &p(&sim.join("rep_0000_focal.csv")),
        "--centroids",
        &p(&sim.join("centroids.csv")),
        "--adjacency",
        &p(&sim.join("adjacency.csv")),
        "--pre",
        "20",
    ]
    .map(String::from);
    for method in ["sc-ols", "bsc"] {
        let mut args = vec!["fit".to_string(), "--method".into(), method.into()];
        args.extend(pool_args.iter().cloned());
        args.extend(["--chains", "2", "--iters", "300", "--warmup", "100", "--out", &p(&fits)].map(String::from));
        let out = Command::new(env!("CARGO_BIN_EXE_heatsc")).args(&args).output().unwrap();
        assert!(matches!(out.status.code(), Some(0 | 1)), "{method}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let table = dir.path().join("eval").join("table.csv");
    let out = heatsc(&["evaluate", "--fits", &p(&fits), "--truth", &p(&sim), "--out", &p(&table)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert!(lines[0].starts_with("scenario,method,abs_avg_bias"));
    assert!(lines[1..].iter().all(|l| l.starts_with("Spatial depend. - No Spillover,")));
    assert!(dir.path().join("eval").join("table.manifest.json").exists());
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, "reps = 2\ngrid_rows = 4\ngrid_cols = 4\n").unwrap();
    let sim = dir.path().join("sim");
    let out = heatsc(&["--config", &p(&cfg), "simulate", "--reps", "1", "--out", &p(&sim)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sim.join("rep_0000_panel.csv").exists());
    assert!(!sim.join("rep_0001_panel.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sim.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["reps"], 1);
    assert_eq!(manifest["config"]["grid_rows"], 4);
    let centroids = std::fs::read_to_string(sim.join("centroids.csv")).unwrap();
    assert_eq!(centroids.lines().count(), 17);
}
