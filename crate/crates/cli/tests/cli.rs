use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/toy")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn evdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evdet")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn evaluate_identical_files() {
    let out = evdet(&["evaluate", "--pred", &toy("train.jsonl"), "--gold", &toy("train.jsonl")]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("F1 1.0000"));
}

#[test]
fn evaluate_summarizes_several_runs() {
    let out = evdet(&[
        "evaluate", "--pred", &toy("train.jsonl"), "--pred", &toy("train.jsonl"), "--gold", &toy("train.jsonl"), "--json",
    ]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["summary"]["runs"], 2);
}

#[test]
fn sample_split_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let train = dir.path().join(format!("{tag}_train.jsonl"));
        let test = dir.path().join(format!("{tag}_test.jsonl"));
        let out = evdet(&[
            "sample-split", "--input", &toy("train.jsonl"), "--ontology", &toy("ontology.json"), "--k", "1",
            "--train-out", &s(&train), "--test-out", &s(&test), "--seed", "4",
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        (std::fs::read(train).unwrap(), std::fs::read(test).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn train_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    let out = evdet(&["train", "--config", &toy("toy.cfg"), "--output", &s(&ckpt)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let f1: f64 = stdout(&out)
        .lines()
        .find_map(|l| l.strip_prefix("train mention F1 "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(f1 >= 0.95, "{f1}");

    let pred = dir.path().join("pred.jsonl");
    let out = evdet(&["predict", "--model", &s(&ckpt), "--input", &toy("train.jsonl"), "--output", &s(&pred)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = evdet(&["evaluate", "--pred", &s(&pred), "--gold", &toy("train.jsonl"), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["f1"].as_f64().unwrap() >= 0.95);
}

#[test]
fn missing_input_is_a_validation_error() {
    let out = evdet(&["evaluate", "--pred", "/nonexistent/pred.jsonl", "--gold", &toy("train.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/nonexistent/pred.jsonl"));
}

#[test]
fn unknown_flag_is_a_validation_error() {
    let out = evdet(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_is_a_runtime_error() {
    let out = evdet(&["train", "--config", &toy("toy.cfg"), "--learning-rate", "1e300"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epoch 0 batch"), "{}", stderr(&out));
}

#[test]
fn pretrained_encoders_are_rejected() {
    let out = evdet(&["train", "--config", &toy("toy.cfg"), "--encoder", "bert-base-uncased"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bert-base-uncased"));
}
