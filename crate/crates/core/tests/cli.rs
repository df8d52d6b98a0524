//! End-to-end tests of the command-line interface.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ipfusion"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(path: &Path, contents: &str) {
    fs::write(path, contents).unwrap();
}

const SYNTH_SMALL: &str = r#"{"n": 10, "channels": 3, "vocab_size": 30}"#;

fn run_config(dir: &Path) -> String {
    format!(
        r#"{{
  "data": {{"synthetic": {{"seed": 7, "config": {{"n": 60, "channels": 3, "vocab_size": 30}}}}}},
  "modalities": ["text-only"],
  "hours": [48.0],
  "seeds": [1],
  "train": {{"max_epochs": 2, "batch_size": 16}},
  "embed_dim": 8, "pred_hidden": 4, "text_proj": 4, "ref_points": 6,
  "featurizer": {{"vocab_cap": 30}},
  "out_dir": "{}"
}}"#,
        dir.join("out").display()
    )
}

#[test]
fn synthesize_writes_labels_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("synth.json");
    write(&config, SYNTH_SMALL);
    let out_a = dir.path().join("a.events");
    let out_b = dir.path().join("b.events");
    for out in [&out_a, &out_b] {
        let r = run(&[
            "synthesize",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "3",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let a = fs::read(&out_a).unwrap();
    assert_eq!(a, fs::read(&out_b).unwrap(), "same seed must be byte-identical");
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("LABEL|")).count(), 10);
}

#[test]
fn synthesize_rejects_empty_population() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("synth.json");
    write(&config, r#"{"n": 0, "channels": 3, "vocab_size": 30}"#);
    let r = run(&[
        "synthesize",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("x.events").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn train_then_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    write(&config, &run_config(dir.path()));
    let r = run(&["train", "--config", config.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let model = dir.path().join("out/model.json");
    assert!(model.exists());
    let history = fs::read_to_string(dir.path().join("out/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_auc\n"));

    // data file to score
    let synth = dir.path().join("synth.json");
    write(&synth, r#"{"n": 30, "channels": 3, "vocab_size": 30}"#);
    let events = dir.path().join("eval.events");
    let r = run(&[
        "synthesize",
        "--config",
        synth.to_str().unwrap(),
        "--out",
        events.to_str().unwrap(),
        "--seed",
        "21",
    ]);
    assert!(r.status.success());

    let eval = |_tag: &str| -> String {
        let r = run(&[
            "evaluate",
            "--model",
            model.to_str().unwrap(),
            "--data",
            events.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        String::from_utf8(r.stdout).unwrap()
    };
    let first = eval("first");
    assert!(first.starts_with("auc="), "unexpected output {first}");
    let auc: f64 = first.trim().trim_start_matches("auc=").parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(first, eval("second"), "evaluation must be deterministic");
}

#[test]
fn evaluate_missing_checkpoint_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let events = dir.path().join("eval.events");
    write(&events, "TS|a|ch00|1.0|0.5\nLABEL|a|1\n");
    let r = run(&[
        "evaluate",
        "--model",
        dir.path().join("absent.json").to_str().unwrap(),
        "--data",
        events.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn evaluate_single_class_data_is_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    write(&config, &run_config(dir.path()));
    let r = run(&["train", "--config", config.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let events = dir.path().join("single.events");
    write(
        &events,
        "ADMIT|a|chest pain observed\nTS|a|ch00|1.0|0.5\nLABEL|a|1\n\
         ADMIT|b|stable condition\nTS|b|ch01|2.0|0.1\nLABEL|b|1\n",
    );
    let r = run(&[
        "evaluate",
        "--model",
        dir.path().join("out/model.json").to_str().unwrap(),
        "--data",
        events.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn experiment_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    write(&config, &run_config(dir.path()));
    let out = dir.path().join("exp");
    let r = run(&[
        "experiment",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 2, "one data row expected");
    assert!(results.starts_with("modality,hours,seed,auc\n"));
    let plot = fs::read_to_string(out.join("plotdata_text.csv")).unwrap();
    assert!(plot.starts_with("hours,mean,ci_lo,ci_hi\n"));
    assert!(out.join("aggregate.json").exists());
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let r = run(&["frobnicate"]);
    assert_eq!(r.status.code(), Some(1));
}
