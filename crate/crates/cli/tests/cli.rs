use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mechinfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mechinfer"))
        .args(args)
        .env("MECHINFER_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = mechinfer(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1, "summary is one line: {stdout}");
    serde_json::from_str(&stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn missing_flag_is_a_usage_error() {
    let out = mechinfer(&["gen-data", "--model", "mmk", "--n", "10", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn bad_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    for args in [
        vec!["gen-data", "--model", "lotka", "--n", "3", "--seed", "1", "--out", p(&data)],
        vec!["evaluate", "--model", "mmk", "--method", "sgd", "--test", p(&data)],
        vec!["evaluate", "--model", "mmk", "--method", "bfgs", "--starts", "0", "--test", p(&data)],
        vec!["evaluate", "--model", "mmk", "--method", "deep-inference", "--test", p(&data)],
        vec!["landscape", "--model", "mmk", "--seed", "1", "--grid", "1", "--out", p(&data)],
    ] {
        let out = mechinfer(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        let flag = ["--model", "--method", "--starts", "--infnet", "--grid"]
            .into_iter()
            .find(|f| args.contains(f) && err.contains(f));
        assert!(flag.is_some(), "{args:?}: {err}");
    }
}

#[test]
fn missing_input_is_a_runtime_error() {
    let out = mechinfer(&["evaluate", "--model", "mmk", "--method", "oracle", "--test", "/nonexistent/t.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/t.jsonl"));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for path in [&a, &b] {
        let summary = ok_json(&["gen-data", "--model", "mmk", "--n", "1000", "--seed", "7", "--out", p(path)]);
        assert_eq!(summary["n"], 1000);
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 1000);
    assert_eq!(bytes, std::fs::read(&b).unwrap());
}

#[test]
fn fit_and_evaluate_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("test.jsonl");
    ok_json(&["gen-data", "--model", "mmk", "--n", "20", "--seed", "3", "--out", p(&data)]);
    let fits: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("fit{i}.csv"));
            ok_json(&["fit", "--model", "mmk", "--test", p(&data), "--starts", "2", "--seed", "5", "--out", p(&out)]);
            std::fs::read(out).unwrap()
        })
        .collect();
    assert_eq!(fits[0], fits[1]);
    assert_eq!(String::from_utf8_lossy(&fits[0]).lines().count(), 20);

    let reports: Vec<Value> = (0..2)
        .map(|i| {
            let out = dir.path().join(format!("eval{i}.csv"));
            let r = ok_json(&[
                "evaluate", "--model", "mmk", "--method", "bfgs", "--starts", "2", "--test", p(&data), "--seed", "5",
                "--out", p(&out),
            ]);
            assert_eq!(std::fs::read(&out).unwrap(), fits[0]);
            r
        })
        .collect();
    for key in ["r2", "r2_std_err", "r2_truth", "config_hash", "iterations", "method"] {
        assert_eq!(reports[0][key], reports[1][key], "{key}");
    }
    assert_eq!(reports[0]["method"], "bfgs-2");
    assert!(reports[0]["mean_time"].as_f64().unwrap() > 0.0);
}

#[test]
fn landscape_writes_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("slice.csv");
    let summary = ok_json(&["landscape", "--model", "mmk", "--seed", "4", "--grid", "8", "--out", p(&out)]);
    assert_eq!(summary["grid"], 8);
    let text = std::fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("alpha,beta,loss"));
    assert_eq!(lines.count(), 64);
}

#[test]
fn training_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let f = |name: &str| dir.path().join(name);
    let (train, test) = (f("train.jsonl"), f("test.jsonl"));
    let (proxy, infnet, tuned, log) = (f("proxy.bin"), f("infnet.bin"), f("tuned.bin"), f("log.csv"));
    ok_json(&["gen-data", "--model", "mmk", "--n", "400", "--seed", "1", "--out", p(&train)]);
    ok_json(&["gen-data", "--model", "mmk", "--n", "30", "--seed", "2", "--out", p(&test)]);
    let s = ok_json(&[
        "train-proxy", "--model", "mmk", "--train", p(&train), "--out", p(&proxy), "--epochs", "2", "--log", p(&log),
    ]);
    assert!(s["val_mse"].as_f64().unwrap().is_finite());
    let proxy_bytes = std::fs::read(&proxy).unwrap();
    ok_json(&[
        "train-infnet", "--model", "mmk", "--train", p(&train), "--proxy", p(&proxy), "--out", p(&infnet), "--epochs",
        "2", "--log", p(&log),
    ]);
    assert_eq!(std::fs::read(&proxy).unwrap(), proxy_bytes);
    let csv = std::fs::read_to_string(&log).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,train_loss,val_loss,wall_time"));
    assert_eq!(csv.lines().count(), 5);

    let out = mechinfer(&["evaluate", "--model", "mmk", "--method", "deep-inference-mm", "--test", p(&test), "--infnet", p(&infnet)]);
    assert_eq!(out.status.code(), Some(2), "an untuned network is not a deep-inference-mm artifact");

    let s = ok_json(&[
        "fine-tune", "--model", "mmk", "--train", p(&train), "--infnet", p(&infnet), "--out", p(&tuned), "--steps", "3",
    ]);
    assert!(s["best_val_r2"].as_f64().unwrap() >= s["initial_val_r2"].as_f64().unwrap());

    let infnet_bytes = std::fs::read(&infnet).unwrap();
    for method in ["deep-inference", "deep-inference-bfgs"] {
        let r = ok_json(&["evaluate", "--model", "mmk", "--method", method, "--test", p(&test), "--infnet", p(&infnet)]);
        assert_eq!(r["n_records"], 30);
        assert!(r["r2"].as_f64().unwrap() <= 1.0);
    }
    assert_eq!(std::fs::read(&infnet).unwrap(), infnet_bytes);

    let out = mechinfer(&["evaluate", "--model", "ecoli", "--method", "deep-inference", "--test", p(&test), "--infnet", p(&infnet)]);
    assert_eq!(out.status.code(), Some(2));
}
