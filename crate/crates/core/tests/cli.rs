use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_stgnrde");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_synth(dir: &Path) -> std::path::PathBuf {
    ok(&["synth", "--nodes", "4", "--timesteps", "160", "--seed", "3", "--out", s(dir)]);
    dir.join("values.csv")
}

/// Fast training flags layered over the synth preset.
const QUICK: &[&str] = &["--epochs", "2", "--set", "hidden=6", "--set", "batch_size=16"];

#[test]
fn synth_is_reproducible_and_validates_nodes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--nodes", "8", "--timesteps", "600", "--seed", "1", "--out", s(d)]);
    }
    for f in ["values.csv", "adjacency.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let out = run(&["synth", "--nodes", "1", "--timesteps", "10", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn logsig_columns_follow_basis_size() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path());
    let out = tmp.path().join("ls.csv");
    for (depth, cols) in [("1", 2), ("2", 3), ("3", 5)] {
        ok(&["logsig", "--data", s(&data), "--depth", depth, "--subpath", "2", "--out", s(&out)]);
        let text = std::fs::read_to_string(&out).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 2 + cols, "depth {depth}: {header}");
    }
    let bad = run(&["logsig", "--data", s(&data), "--depth", "0", "--subpath", "2", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn logsig_of_constant_data_is_time_only() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("c.csv");
    std::fs::write(&data, "2.5,2.5\n".repeat(20)).unwrap();
    let out = tmp.path().join("ls.csv");
    ok(&["logsig", "--data", s(&data), "--depth", "2", "--subpath", "3", "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        // Lyndon order [data, time, [data,time]]: only the time increment survives.
        assert!(cols[0].abs() < 1e-12 && cols[2].abs() < 1e-12 && cols[1] > 0.0, "{line}");
    }
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path());
    let run_dir = tmp.path().join("run");
    let mut args = vec!["train", "--preset", "synth", "--data", s(&data), "--out", s(&run_dir)];
    args.extend_from_slice(QUICK);
    ok(&args);
    for f in ["checkpoint.bin", "history.csv", "metrics.json", "resolved.conf"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("metrics.json")).unwrap()).unwrap();
    let ck = run_dir.join("checkpoint.bin");
    for part in ["val", "test"] {
        let printed: Value = serde_json::from_str(&ok(&["eval", "--checkpoint", s(&ck), "--split", part])).unwrap();
        for key in ["mae", "rmse", "mape"] {
            assert_eq!(printed[key], metrics[part][key], "{part} {key}");
        }
    }

    let pred = tmp.path().join("pred.csv");
    ok(&["predict", "--checkpoint", s(&ck), "--out", s(&pred)]);
    let text = std::fs::read_to_string(&pred).unwrap();
    // 160 steps, 12 in, 12 out: 137 windows, chronological 6:2:2.
    let test = &stgnrde::data::SplitPlan::default().split(137).unwrap()[0].test;
    assert_eq!(text.lines().next().unwrap(), "window,node,horizon,value");
    assert_eq!(text.lines().count() - 1, test.len() * 4 * 12);

    // A config written by train reproduces the run.
    let again = tmp.path().join("again");
    ok(&["train", "--config", s(&run_dir.join("resolved.conf")), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(run_dir.join("history.csv")).unwrap(),
        std::fs::read(again.join("history.csv")).unwrap()
    );
}

#[test]
fn blocked_cv_reports_four_folds_with_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path());
    let out = tmp.path().join("cv");
    let mut args = vec!["train", "--preset", "synth", "--data", s(&data), "--cv", "blocked", "--out", s(&out)];
    args.extend_from_slice(&["--epochs", "1", "--set", "hidden=4"]);
    ok(&args);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["folds"].as_array().unwrap().len(), 4);
    assert!(m["mean"]["mae"].is_f64() && m["std"]["mae"].is_f64());
    for k in 0..4 {
        assert!(out.join(format!("fold_{k}/checkpoint.bin")).exists());
    }
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path());

    let ck = tmp.path().join("bad.bin");
    std::fs::write(&ck, b"NOTMAGIC\0\0\0\0\0\0\0\0").unwrap();
    let out = run(&["eval", "--checkpoint", s(&ck)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let conf = tmp.path().join("bad.conf");
    std::fs::write(&conf, "hidden = 8\nmystery_key = 1\n").unwrap();
    let out = run(&["train", "--config", s(&conf), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery_key"));

    let ragged = tmp.path().join("ragged.csv");
    std::fs::write(&ragged, "1,2\n3\n").unwrap();
    let out = run(&["logsig", "--data", s(&ragged), "--depth", "2", "--subpath", "2", "--out", s(&tmp.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn verify_solver_suite_prints_orders() {
    let text = ok(&["verify", "--suite", "solver"]);
    assert!(text.contains("Euler order") && text.contains("RK4 order"));
    assert!(text.contains("0 failed"));
}

#[test]
fn inputs_are_not_modified() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_synth(tmp.path());
    let before = std::fs::read(&data).unwrap();
    let out = tmp.path().join("ls.csv");
    ok(&["logsig", "--data", s(&data), "--depth", "2", "--subpath", "2", "--out", s(&out)]);
    assert_eq!(before, std::fs::read(&data).unwrap());
}
