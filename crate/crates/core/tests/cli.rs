use std::path::Path;
use std::process::Command;

use hyperctl::cli::{self, RunConfig};

const EXAMPLE_ONE: &str = r#"{
    "n": 2, "m": 1,
    "speeds": [{"type": "constant", "value": -1}, {"type": "constant", "value": 1}],
    "M": [[0, 0], [0, 0]],
    "Q0": [[1]], "Q1": [[1]],
    "omega": [[0.25, 0.75]],
    "grid": {"cells": 100, "cflFactor": 0.9}
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("hyperctl").chain(args.iter().copied());
    let code = cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn mintime_example_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex1.json", EXAMPLE_ONE);
    let (code, out, _) = run(&["--config", &cfg, "mintime"]);
    assert_eq!(code, 0);
    assert_eq!(
        out,
        "T_inf=0.5\nlo,hi,case,value\n0,0.25,tau_minus,0.5\n0.75,1,tau_plus,0.5\n"
    );
}

#[test]
fn mintime_singular_coupling_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = EXAMPLE_ONE.replace(r#""Q0": [[1]]"#, r#""Q0": [[0]]"#);
    let cfg = write_config(dir.path(), "sing.json", &text);
    let (code, out, err) = run(&["--config", &cfg, "mintime"]);
    assert_eq!(code, 3);
    assert!(out.starts_with("T_inf=inf\n"), "{out}");
    assert!(err.starts_with("ERROR:"), "{err}");
}

#[test]
fn synthesize_below_threshold_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex1.json", EXAMPLE_ONE);
    let out_dir = dir.path().join("out");
    let (code, _, err) = run(&[
        "--config",
        &cfg,
        "synthesize",
        "--T",
        "0.4",
        "--y0",
        "zero",
        "--y1",
        "bump",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 4);
    assert!(err.contains("T_inf=0.5"), "{err}");
    assert!(!out_dir.exists());
}

#[test]
fn synthesize_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex1.json", EXAMPLE_ONE);
    let out_dir = dir.path().join("out");
    let (code, out, err) = run(&[
        "--config",
        &cfg,
        "synthesize",
        "--T",
        "0.6",
        "--y0",
        "sin:1",
        "--y1",
        "bump",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let error: f64 = out
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("achieved_error="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(error < 0.05, "achieved error {error}");

    let control = std::fs::read_to_string(out_dir.join("control.csv")).unwrap();
    let mut lines = control.lines();
    assert_eq!(lines.next(), Some("t,x,u1,u2"));
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        if !(f[1] > 0.25 && f[1] < 0.75) {
            assert_eq!((f[2], f[3]), (0.0, 0.0), "control off omega at x = {}", f[1]);
        }
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["omega_hat"].as_array().is_some_and(|a| !a.is_empty()));
    assert!(summary["residuals"].as_array().is_some_and(|a| a.len() == 2));
    let state = std::fs::read_to_string(out_dir.join("final_state.csv")).unwrap();
    assert_eq!(state.lines().count(), 101);
}

#[test]
fn canon_identity() {
    let (code, out, _) = run(&["canon", "--matrix", "[[1,0],[0,1]]"]);
    assert_eq!(code, 0);
    assert_eq!(
        out,
        "input,matrix\ncanonical\n1,0\n0,1\npivots\n1,1\n2,2\nL\n1,0\n0,1\nU\n1,0\n0,1\n"
    );
}

#[test]
fn canon_from_config_reverses_q1() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{
        "n": 4, "m": 2,
        "speeds": [{"type": "constant", "value": -2}, {"type": "constant", "value": -1},
                   {"type": "constant", "value": 1}, {"type": "constant", "value": 2}],
        "Q0": [[1, 0], [0, 1]], "Q1": [[1, 2], [3, 4]],
        "omega": [[0.4, 0.6]]
    }"#;
    let cfg = write_config(dir.path(), "four.json", text);
    let (code, out, _) = run(&["--config", &cfg, "canon", "--which", "Q1"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("input,Q1_reversed\ncanonical\n"), "{out}");
    assert!(out.contains("pivots\n1,1\n2,2\n"), "{out}");
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("reversed omega", EXAMPLE_ONE.replace("[[0.25, 0.75]]", "[[0.75, 0.25]]")),
        ("Q0 shape", EXAMPLE_ONE.replace(r#""Q0": [[1]]"#, r#""Q0": [[1, 1]]"#)),
        ("unknown key", EXAMPLE_ONE.replace(r#""m": 1"#, r#""m": 1, "extra": true"#)),
        ("bad speed sign", EXAMPLE_ONE.replace(r#""value": -1"#, r#""value": 1"#)),
        ("truncated", EXAMPLE_ONE[..40].to_string()),
    ];
    for (name, text) in cases {
        let cfg = write_config(dir.path(), "bad.json", &text);
        let (code, _, err) = run(&["--config", &cfg, "mintime"]);
        assert_eq!(code, 2, "{name}: {err}");
        assert!(err.starts_with("ERROR:"), "{name}: {err}");
    }
    let (code, _, _) = run(&["--config", "/nonexistent/cfg.json", "mintime"]);
    assert_eq!(code, 2);
    let (code, _, _) = run(&["mintime"]);
    assert_eq!(code, 2);
}

#[test]
fn parse_config_minimal() {
    let cfg = RunConfig::from_json(EXAMPLE_ONE).unwrap();
    assert_eq!(cfg.grid.cells, 100);
    assert_eq!(cfg.cfl, 0.9);
    assert_eq!(cfg.spec.m, 1);
}

#[test]
fn simulate_round_trips_state_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex1.json", EXAMPLE_ONE);
    let first = dir.path().join("a.csv");
    let (code, _, err) = run(&[
        "--config",
        &cfg,
        "simulate",
        "--T",
        "0.2",
        "--y0",
        "sin:1",
        "--u",
        "const:2:0.5",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let (code, out, _) = run(&["--config", &cfg, "simulate", "--T", "0.0001", "--y0", first.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().next(), Some("x,y1,y2"));
    assert_eq!(out.lines().count(), 101);

    let (code, _, _) = run(&["--config", &cfg, "simulate", "--T", "0.2", "--u", "const:3:1"]);
    assert_eq!(code, 2);
}

#[test]
fn outputs_are_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex1.json", EXAMPLE_ONE);
    let commands: [&[&str]; 4] = [
        &["--config", &cfg, "simulate", "--T", "0.3", "--y0", "bump", "--u", "const:1:1"],
        &["--config", &cfg, "gramian", "--tmin", "0.3", "--tmax", "0.7", "--steps", "3"],
        &["--config", &cfg, "omegahat", "--eps", "0.05"],
        &["--config", &cfg, "mintime"],
    ];
    for args in commands {
        let (c1, a, _) = run(args);
        let (c2, b, _) = run(args);
        assert_eq!((c1, c2), (0, 0), "{args:?}");
        assert_eq!(a, b, "{args:?}");
        assert!(!a.contains('\r'));
    }
}

#[test]
fn gramian_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex1.json", EXAMPLE_ONE);
    let (code, out, err) = run(&["--config", &cfg, "gramian", "--tmin", "0.3", "--tmax", "0.7", "--steps", "5"]);
    assert_eq!(code, 0);
    let rows: Vec<Vec<f64>> = out
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(out.lines().next(), Some("T,sigma_min"));
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][0], 0.3);
    assert_eq!(rows[4][0], 0.7);
    assert!(rows[4][1] > 1e3 * rows[0][1]);
    assert!(err.starts_with("threshold="), "{err}");
}

#[test]
fn necessity_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{
        "n": 2, "m": 1,
        "speeds": [{"type": "constant", "value": -1}, {"type": "constant", "value": 1}],
        "M": "neg_speed_derivative",
        "Q0": [[0]], "Q1": [[1]],
        "omega": [[0.4, 0.6]],
        "grid": {"cells": 200}
    }"#;
    let cfg = write_config(dir.path(), "nec.json", text);
    let (code, out, err) = run(&["--config", &cfg, "necessity", "--nu-list", "1,2,4", "--T", "2"]);
    assert_eq!(code, 0, "{err}");
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("nu,ratio"));
    let ratios: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ratios.len(), 3);
    assert!(ratios.windows(2).all(|w| w[1] > w[0]), "{ratios:?}");
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ex1.json", EXAMPLE_ONE);
    let bin = env!("CARGO_BIN_EXE_hyperctl");
    let ok = Command::new(bin).args(["--config", &cfg, "mintime"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("T_inf=0.5"));
    let below = Command::new(bin)
        .args(["--config", &cfg, "synthesize", "--T", "0.4", "--y0", "zero", "--y1", "zero", "--out"])
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(below.status.code(), Some(4));
    let usage = Command::new(bin).arg("frobnicate").output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}
