use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keytoken-lab"))
        .args(args)
        .env_remove("KEYTOKEN_LAB_THREADS")
        .output()
        .unwrap()
}

fn lab_ok(args: &[&str]) {
    let out = lab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Runs a failing command and returns the parsed stderr error object.
fn lab_err(args: &[&str]) -> (i32, Value) {
    let out = lab(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("JSON error line");
    (out.status.code().unwrap(), serde_json::from_str::<Value>(line).unwrap()["error"].clone())
}

fn write_config(dir: &Path, name: &str, value: Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(&value).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn naive_predict_config() -> Value {
    serde_json::json!({
        "params": {
            "model": {
                "e_key": 0.01,
                "non_key": { "type": "constant", "e0": 0.0 },
                "growth": { "type": "linear_fraction", "phi": 1.0 }
            },
            "n_values": [1, 10, 100, 1000]
        }
    })
}

#[test]
fn predict_naive_row() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", naive_predict_config());
    let out = tmp.path().join("out");
    lab_ok(&["predict", "--config", s(&config), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("predict.csv")).unwrap();
    let row = csv.lines().find(|l| l.starts_with("100,")).unwrap();
    let p: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!((p - 0.36603).abs() < 1e-5);
    let report = read_json(&out.join("predict.json"));
    assert_eq!(report["decay_class"], "pure_exponential");
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "predict");
    assert_eq!(manifest["config"]["params"]["naive_e"], 0.01);
    assert!(manifest["config"].get("out").is_none());
}

#[test]
fn predict_plateau_has_constant_tail() {
    let tmp = tempfile::tempdir().unwrap();
    lab_ok(&["predict", "--config", s(&configs().join("predict.json")), "--out", s(tmp.path()), "--format", "json"]);
    assert!(!tmp.path().join("predict.csv").exists());
    let report = read_json(&tmp.path().join("predict.json"));
    assert_eq!(report["decay_class"], "plateau_constant");
    let tail: Vec<f64> = report["points"].as_array().unwrap()[3..].iter().map(|p| p["p_two_rate"].as_f64().unwrap()).collect();
    assert!(tail.iter().all(|&p| (p - 0.95f64.powi(20)).abs() < 1e-12));
}

#[test]
fn validation_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");

    let mut empty = naive_predict_config();
    empty["params"]["n_values"] = serde_json::json!([]);
    let config = write_config(tmp.path(), "empty.json", empty);
    let (code, err) = lab_err(&["predict", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code, 2);
    assert_eq!(err["kind"], "config");
    assert_eq!(err["field"], "params.n_values");

    let mut bad = naive_predict_config();
    bad["params"]["model"]["e_key"] = serde_json::json!(1.5);
    let config = write_config(tmp.path(), "bad.json", bad);
    let (_, err) = lab_err(&["predict", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(err["field"], "params.model.e_key");

    let mut typo = naive_predict_config();
    typo["params"]["n_valuez"] = serde_json::json!([1]);
    let config = write_config(tmp.path(), "typo.json", typo);
    let (_, err) = lab_err(&["predict", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(err["field"], "params.n_valuez");

    let mut wrong_type = naive_predict_config();
    wrong_type["params"]["model"]["growth"]["phi"] = serde_json::json!("one");
    let config = write_config(tmp.path(), "type.json", wrong_type);
    let (_, err) = lab_err(&["predict", "--config", s(&config), "--out", s(&out)]);
    // Internally tagged enums report the enum's own path.
    assert_eq!(err["field"], "params.model.growth");
    assert!(err["message"].as_str().unwrap().contains("\"one\""));

    assert!(!out.exists());
}

#[test]
fn failed_write_removes_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.json", naive_predict_config());
    let out = tmp.path().join("out");
    // A directory where the JSON report should go makes the second write fail.
    fs::create_dir_all(out.join("predict.json")).unwrap();
    let (code, err) = lab_err(&["predict", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code, 3);
    assert_eq!(err["kind"], "io");
    assert!(!out.join("predict.csv").exists());
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn simulate_matches_closed_form_and_replays() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("a");
    lab_ok(&["simulate", "--config", s(&configs().join("simulate.json")), "--out", s(&first), "--trials", "5000"]);
    let report = read_json(&first.join("simulate.json"));
    assert!(report["batch"]["z_score"].as_f64().unwrap().abs() < 3.0);
    for point in report["staircase"].as_array().unwrap() {
        let (rate, analytic) = (point["rate"].as_f64().unwrap(), point["analytic"].as_f64().unwrap());
        let se = (analytic * (1.0 - analytic) / point["trials"].as_f64().unwrap()).sqrt();
        assert!((rate - analytic).abs() <= 3.0 * se, "{point}");
    }
    let header = fs::read_to_string(first.join("clustering.csv")).unwrap();
    assert!(header.starts_with(
        "persistence,trials,lag1_autocorrelation,mean_error_run_length,independent_baseline_run_length,"
    ));
    let manifest = read_json(&first.join("manifest.json"));
    assert_eq!(manifest["config"]["params"]["trials"], 5000);

    let second = tmp.path().join("b");
    lab_ok(&["simulate", "--config", s(&first.join("manifest.json")), "--out", s(&second)]);
    for name in ["batch.csv", "positions.csv", "staircase.csv", "clustering.csv", "intervention.csv", "simulate.json"] {
        assert_eq!(fs::read(first.join(name)).unwrap(), fs::read(second.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_flag_changes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let config = configs().join("simulate.json");
    lab_ok(&["simulate", "--config", s(&config), "--out", s(&a), "--trials", "2000", "--format", "csv"]);
    lab_ok(&["simulate", "--config", s(&config), "--out", s(&b), "--trials", "2000", "--format", "csv", "--seed", "43"]);
    assert_ne!(fs::read(a.join("batch.csv")).unwrap(), fs::read(b.join("batch.csv")).unwrap());
    assert_eq!(read_json(&b.join("manifest.json"))["config"]["seed"], 43);
}

#[test]
fn manifest_of_another_command_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    lab_ok(&["predict", "--config", s(&configs().join("predict.json")), "--out", s(tmp.path())]);
    let (_, err) = lab_err(&["simulate", "--config", s(&tmp.path().join("manifest.json")), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(err["field"], "command");
}

#[test]
fn ensemble_tables() {
    let tmp = tempfile::tempdir().unwrap();
    lab_ok(&["ensemble", "--config", s(&configs().join("ensemble.json")), "--out", s(tmp.path()), "--trials", "4000"]);
    let report = read_json(&tmp.path().join("ensemble.json"));
    let analytic = report["analytic"].as_array().unwrap();
    for row in analytic.iter().filter(|r| r["m"] == 1) {
        assert_eq!(row["effective_key_error"], row["single_key_error"]);
    }
    let rhos: Vec<f64> = report["limits"].as_array().unwrap().iter().map(|r| r["rho"].as_f64().unwrap()).collect();
    for rho in [0.0, 0.5, 0.999] {
        assert!(rhos.contains(&rho));
    }
    for row in report["simulated"].as_array().unwrap() {
        assert!(row["z_score"].as_f64().unwrap().abs() < 3.5, "{row}");
    }
    let comparison = fs::read_to_string(tmp.path().join("rule_comparison.csv")).unwrap();
    assert!(comparison.starts_with("m,majority_vote,oracle_any_correct,"));
}

#[test]
fn analyze_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    lab_ok(&["analyze", "--config", s(&configs().join("analyze.json")), "--out", s(tmp.path())]);
    let report = read_json(&tmp.path().join("analyze.json"));
    assert_eq!(report["key_fraction"]["key_fraction"], 0.09);
    assert_eq!(report["key_fraction"]["deviation"], 0.0);
    let long = report["perplexity"]["long_ppl"].as_f64().unwrap();
    assert!((long - 1.25f64.exp()).abs() < 1e-9);
    // Default top-k is 1% of the document: the single largest mass.
    assert_eq!(report["documents"][0]["attention_top_k"], 1);
    assert!((report["documents"][0]["attention_concentration"].as_f64().unwrap() - 0.08).abs() < 1e-12);
    let tokens = fs::read_to_string(tmp.path().join("tokens.csv")).unwrap();
    assert_eq!(tokens.lines().count(), 101);
    assert!(tokens.contains("fixture-0,5,2.5,true"));
}

#[test]
fn analyze_reports_the_bad_line() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("bad.jsonl");
    fs::write(
        &corpus,
        "{\"meta\":{\"log_base\":\"e\"}}\n\
         {\"doc_id\":\"a\",\"index\":0,\"logprob_long\":-1,\"logprob_short\":-2}\n\
         {\"doc_id\":\"a\",\"index\":1,\"logprob_long\":-1}\n",
    )
    .unwrap();
    let config = write_config(tmp.path(), "c.json", serde_json::json!({ "params": { "corpus": "bad.jsonl" } }));
    let out = tmp.path().join("out");
    let (code, err) = lab_err(&["analyze", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code, 2);
    assert_eq!(err["kind"], "input");
    assert!(err["message"].as_str().unwrap().contains("line 3"), "{err}");
    assert!(!out.exists());
}

#[test]
fn fit_ranks_plateau_data() {
    let tmp = tempfile::tempdir().unwrap();
    lab_ok(&["fit", "--config", s(&configs().join("fit.json")), "--out", s(tmp.path())]);
    let report = read_json(&tmp.path().join("fits.json"));
    assert_eq!(report["ranked"][0]["family"], "two_rate_bounded");
    assert_eq!(report["ranked"].as_array().unwrap().len(), 4);
    let ranking = fs::read_to_string(tmp.path().join("ranking.csv")).unwrap();
    assert!(ranking.lines().nth(1).unwrap().starts_with("1,two_rate_bounded,"));
}

#[test]
fn fit_rejects_degenerate_data() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("obs.csv"), "n,trials,successes\n10,50,50\n20,50,50\n30,50,50\n").unwrap();
    let config = write_config(tmp.path(), "c.json", serde_json::json!({ "params": { "observations": "obs.csv" } }));
    let (code, err) = lab_err(&["fit", "--config", s(&config), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(code, 2);
    assert!(err["message"].as_str().unwrap().contains("degenerate"));
}

#[test]
fn thread_count_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let config = configs().join("ensemble.json");
    let run = |threads: &str, out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_keytoken-lab"))
            .args(["ensemble", "--config", s(&config), "--out", s(out), "--trials", "2000"])
            .env("KEYTOKEN_LAB_THREADS", threads)
            .status()
            .unwrap();
        assert!(status.success());
    };
    run("1", &tmp.path().join("one"));
    run("3", &tmp.path().join("three"));
    for name in ["ensemble_simulated.csv", "ensemble.json", "manifest.json"] {
        assert_eq!(fs::read(tmp.path().join("one").join(name)).unwrap(), fs::read(tmp.path().join("three").join(name)).unwrap());
    }
}

#[test]
fn missing_config_is_an_error() {
    let (code, err) = lab_err(&["predict"]);
    assert_eq!(code, 2);
    assert_eq!(err["field"], "--config");
}
