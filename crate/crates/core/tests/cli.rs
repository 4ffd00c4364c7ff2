use std::process::{Command, Output};

use gridmarket::scenario::Scenario;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridmarket"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn validate_accepts_bundled_scenario() {
    let out = cli(&["validate", "--scenario", "ieee15.toml"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("15 buses"));
}

#[test]
fn validate_names_the_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let good = Scenario::ieee15().to_toml_string();
    let bad = good.replacen("alpha = 0.78", "alpha = -0.78", 1);
    assert_ne!(good, bad);
    std::fs::write(&path, bad).unwrap();
    let out = cli(&["validate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("bus 2") && err.contains("alpha"), "{err}");
}

#[test]
fn missing_file_is_an_input_error() {
    let out = cli(&["validate", "--scenario", "/nonexistent/grid.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_gamma_is_an_input_error() {
    let out = cli(&["run", "--scenario", "ieee15.toml", "--gamma", "-1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_writes_artifacts_and_oracle_column() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "run",
        "--scenario",
        "ieee15_case2.toml",
        "--scheme",
        "ups",
        "--oracle",
        "--trace",
        "--threads",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let summary = text(&out.stdout);
    assert!(summary.contains("oracle"), "{summary}");
    let welfare = summary
        .lines()
        .find(|l| l.starts_with("social_welfare"))
        .expect("welfare row");
    let cols: Vec<f64> = welfare
        .split_whitespace()
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert!((cols[1] - 6.762).abs() < 0.01, "{welfare}");
    for f in [
        "rounds.csv",
        "trades.csv",
        "physical.csv",
        "prices.csv",
        "trace_matching.csv",
        "trace_opf.csv",
        "welfare.svg",
        "line_flows.svg",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let rounds = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 2);
}

#[test]
fn oracle_subcommand_reports_case2_dps_welfare() {
    let out = cli(&[
        "oracle",
        "--scenario",
        "ieee15_case2.toml",
        "--scheme",
        "dps",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let s = text(&out.stdout);
    let line = s.lines().find(|l| l.starts_with("social_welfare")).unwrap();
    let v: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((v - 6.825).abs() < 0.005, "{v}");
}
