mod common;

use std::path::Path;

use common::{cli, cli_ok, prepared, s, write_config, Behavior, FakeEndpoint};
use patchhint::manifest::RunManifest;
use patchhint::training::read_shots_csv;

fn error_json(stderr: &str) -> serde_json::Value {
    let lines: Vec<&str> = stderr.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stderr:?}");
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert!(v["error"]["kind"].is_string() && v["error"]["message"].is_string(), "{v}");
    v
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn synth_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    cli_ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    cli_ok(&["synth", "--config", s(&cfg), "--out", s(&b)]);
    cli_ok(&["synth", "--config", s(&cfg), "--out", s(&c), "--seed", "99"]);
    let read = |d: &Path| std::fs::read(d.join("runs.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let m = RunManifest::read(&c.join("manifest_synth.json")).unwrap();
    assert_eq!(m.seeds["synth.seed"], 99);
    assert!(m.output("runs.csv").is_some());
}

#[test]
fn ok_summary_is_json_on_stdout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = cli_ok(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    let v: serde_json::Value = serde_json::from_str(out.stdout.trim()).unwrap();
    assert_eq!(v["ok"]["command"], "synth");
}

#[test]
fn fewshot_zero_shots_and_explain_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, "");
    let (runs, ckpt) = prepared(dir, &cfg);
    assert!(dir.join("pre/history.csv").exists());

    let few = dir.join("few0");
    cli_ok(&["fewshot", "--config", s(&cfg), "--data", s(&runs), "--checkpoint", s(&ckpt), "--out", s(&few), "--shots", "0"]);
    let rows = read_shots_csv(&few.join("shots.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].shot_index, 0);
    assert_eq!(rows[0].provenance.as_str(), "none");

    let ex = dir.join("explain");
    cli_ok(&["explain", "--config", s(&cfg), "--data", s(&runs), "--checkpoint", s(&ckpt), "--out", s(&ex), "--k", "5"]);
    for f in ["attention.csv", "attention.png", "saliency.csv", "saliency.png", "insight.json"] {
        assert!(ex.join("insight").join(f).exists(), "missing insight/{f}");
    }
    let samples = files_in(&ex.join("samples"));
    assert_eq!(samples.iter().filter(|n| n.starts_with("attention_") && n.ends_with(".csv")).count(), 5);
    assert_eq!(samples.iter().filter(|n| n.starts_with("saliency_") && n.ends_with(".png")).count(), 5);
    assert_eq!(files_in(&ex.join("diff")).len(), 20);
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ex.join("insight/insight.json")).unwrap()).unwrap();
    assert_eq!(doc["sample_ids"].as_array().unwrap().len(), 5);

    let ev = dir.join("eval");
    cli_ok(&["eval", "--config", s(&cfg), "--data", s(&runs), "--checkpoint", s(&ckpt), "--out", s(&ev)]);
    assert!(ev.join("report.json").exists() && ev.join("report.csv").exists());
    let bench = dir.join("bench");
    cli_ok(&["bench", "--config", s(&cfg), "--data", s(&runs), "--checkpoint", s(&ckpt), "--out", s(&bench)]);
    let report = std::fs::read_to_string(bench.join("report.csv")).unwrap();
    assert!(report.contains("preston") && report.contains("model"), "{report}");
}

#[test]
fn heuristic_provider_never_calls_the_endpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let poisoned = FakeEndpoint::start(vec![Behavior::Close]);
    let cfg = write_config(dir, &format!("[llm]\nbase_url = \"{}\"\n", poisoned.url));
    let (runs, ckpt) = prepared(dir, &cfg);
    let few = dir.join("few");
    cli_ok(&["fewshot", "--config", s(&cfg), "--data", s(&runs), "--checkpoint", s(&ckpt), "--out", s(&few), "--shots", "2"]);
    assert_eq!(poisoned.hits(), 0);
    let rows = read_shots_csv(&few.join("shots.csv")).unwrap();
    assert!(rows[1..].iter().all(|r| r.provenance.as_str() == "heuristic"));
    assert!(!few.join("transcripts.jsonl").exists());
}

#[test]
fn bad_config_gives_one_json_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[model]\nno_such_field = 1\n");
    let out = cli(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.code, 1);
    assert!(out.stdout.is_empty());
    error_json(&out.stderr);

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nd_model = 10\nn_heads = 3\n").unwrap();
    let out = cli(&["synth", "--config", s(&bad), "--out", s(&tmp.path().join("y"))]);
    assert_ne!(out.code, 0);
    assert_eq!(error_json(&out.stderr)["error"]["kind"], "config");
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(&["pretrain", "--data", "/nonexistent/runs.csv", "--out", s(tmp.path())]);
    assert_eq!(out.code, 1);
    error_json(&out.stderr);
}

#[test]
fn usage_errors_exit_2() {
    let out = cli(&["fewshot", "--out", "/tmp/nowhere"]);
    assert_eq!(out.code, 2);
    assert_eq!(error_json(&out.stderr)["error"]["kind"], "usage");
    let out = cli(&["frobnicate"]);
    assert_eq!(out.code, 2);
}
