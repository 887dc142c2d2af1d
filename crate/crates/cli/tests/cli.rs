use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn halk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halk"))
        .args(args)
        .current_dir(workspace_root())
        .output()
        .expect("binary runs")
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data/toy3.csv")
        .to_string_lossy()
        .into_owned()
}

fn settled(dir: &Path) -> f64 {
    let text = fs::read_to_string(dir.join("model_orders.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let tail = &rows[rows.len() - rows.len() / 5..];
    let agents = tail[0].len();
    (0..agents)
        .map(|i| tail.iter().map(|r| r[i]).sum::<f64>() / tail.len() as f64)
        .fold(0.0, f64::max)
}

#[test]
fn short_field_run_writes_requested_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = halk(&["simulate-field", "--T", "10", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,global_loss,avg_loss,max_violation,avg_violation,mean_violation_pos,total_model_order,max_model_order,dual_norm"
    );
    assert_eq!(lines.count(), 10);
    for f in ["model_orders.csv", "bandwidths.csv", "manifest.toml"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 1"));
    assert!(manifest.contains("version = "));
    assert!(manifest.contains("[config]"));
    // no temporaries left behind
    assert_eq!(fs::read_dir(&out).unwrap().count(), 4);
}

#[test]
fn default_field_run_has_1500_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = halk(&["simulate-field", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1501);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (p, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let o = halk(&["simulate-field", "--T", "40", "--seed", seed, "--out", p.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |p: &Path| fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn serial_schedule_matches_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = halk(&["simulate-field", "--T", "40", "--out", a.to_str().unwrap(), "--set", "schedule=serial"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = halk(&["simulate-field", "--T", "40", "--out", b.to_str().unwrap(), "--set", "schedule=parallel"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn missing_data_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = halk(&["run-data", "--data", "no/such/file.csv", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn unknown_baseline_is_a_usage_error() {
    let o = halk(&["baseline", "linear"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("possible values"));
}

#[test]
fn help_exits_cleanly() {
    let o = halk(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("simulate-field"));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "eta = 0.01\nbandwith = 0.1\n").unwrap();
    let o = halk(&["simulate-field", "--config", cfg.to_str().unwrap(), "--T", "5"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bandwith"));
    fs::write(&cfg, "eta = -1.0\n").unwrap();
    let o = halk(&["simulate-field", "--config", cfg.to_str().unwrap(), "--T", "5"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn toy_csv_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let o = halk(&[
        "run-data",
        "--data",
        &toy(),
        "--T",
        "50",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "connect_radius=2.0",
        "--set",
        "gamma_rule=\"exp_distance\"",
        "--set",
        "bandwidth=0.3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 51);
    let orders = fs::read_to_string(out.join("model_orders.csv")).unwrap();
    assert!(orders.starts_with("t,agent0,agent1,agent2\n"));
}

#[test]
fn sequential_stream_stops_at_shortest_node() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seq");
    let o = halk(&[
        "run-data",
        "--data",
        &toy(),
        "--T",
        "50",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "connect_radius=2.0",
        "--set",
        "stream_mode=sequential",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("early_stop"));
}

#[test]
fn baselines_complete() {
    let dir = tempfile::tempdir().unwrap();
    for method in ["penalty", "rbf", "centralized"] {
        let out = dir.path().join(method);
        let o = halk(&["baseline", method, "--T", "30", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{method}: {}", stderr(&o));
        let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 31, "{method}");
        let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
        assert!(manifest.contains(&format!("command = \"baseline-{method}\"")));
    }
    let manifest = fs::read_to_string(dir.path().join("penalty/manifest.toml")).unwrap();
    assert!(manifest.contains("penalty_c = 0.08"));
    let manifest = fs::read_to_string(dir.path().join("centralized/manifest.toml")).unwrap();
    assert!(manifest.contains("epsilon = 1e-7") || manifest.contains("epsilon = 0.0000001"));
}

#[test]
fn check_bounds_reports_each_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = halk(&["simulate-field", "--T", "60", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = out.join("metrics.csv");
    let o = halk(&["check-bounds", "--T", "60", "--metrics", metrics.to_str().unwrap()]);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    for name in ["finite", "dual_nonnegative", "average_feasibility", "model_order_envelope", "rate_regression"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing from\n{text}");
    }
    assert!(text.lines().any(|l| l.starts_with("finite") && l.contains("PASS")));
    assert!(matches!(code(&o), 0 | 2));

    let o = halk(&["check-bounds", "--metrics", "missing.csv"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn larger_parsimony_settles_lower_on_ocean_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let lo = dir.path().join("p04");
    let hi = dir.path().join("p40");
    for (p, out) in [("0.4", &lo), ("40.0", &hi)] {
        let o = halk(&[
            "run-data",
            "--config",
            "configs/ocean.toml",
            "--out",
            out.to_str().unwrap(),
            "--set",
            &format!("parsimony={p}"),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (a, b) = (settled(&lo), settled(&hi));
    assert!(b < a, "P=40 settled at {b}, P=0.4 at {a}");
}
