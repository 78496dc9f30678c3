//! End-to-end checks of the `duforge` executable.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

const HAZE: &str = r#"{"type":"haze","params":{"A":0.8,"t":0.5}}"#;

fn duforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duforge"))
        .args(args)
        .env_remove("DUFORGE_SEED")
        .output()
        .expect("spawn duforge")
}

fn ok(args: &[&str]) -> String {
    let out = duforge(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path, per_type: usize) -> std::path::PathBuf {
    let config = dir.join("config.json");
    let body = json!({"source": {"procedural": {"width": 64, "height": 64}}, "count_per_type": per_type});
    fs::write(&config, body.to_string()).unwrap();
    let out = dir.join("ds");
    ok(&["build-dataset", "--config", p(&config), "--out", p(&out)]);
    out.join("manifest.jsonl")
}

fn field(stdout: &str, name: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{name}=")))
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("{name} missing from {stdout}"))
}

#[test]
fn degrade_then_restore_is_an_exact_inverse() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 1);
    let clean = manifest.parent().unwrap().join("clean/s000000.png");
    let (hazy, back) = (dir.path().join("h.png"), dir.path().join("r.png"));
    ok(&["degrade", "--in", p(&clean), "--spec", HAZE, "--out", p(&hazy)]);
    let out = ok(&["restore", "--in", p(&hazy), "--spec", HAZE, "--out", p(&back), "--reference", p(&clean)]);
    assert!(field(&out, "psnr") >= 45.0, "{out}");
}

#[test]
fn spec_files_and_inline_specs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, HAZE).unwrap();
    let a = ok(&["tokenize", "--spec", HAZE, "--delta", "0.01"]);
    let b = ok(&["tokenize", "--spec", p(&spec), "--delta", "0.01"]);
    assert_eq!(a, b);
    assert!(a.starts_with("T:haze"));
    let doc: Value = serde_json::from_str(&ok(&["detokenize", "--tokens", a.trim(), "--delta", "0.01"])).unwrap();
    assert_eq!(doc["type"], "haze");
    assert!((doc["params"]["t"].as_f64().unwrap() - 0.5).abs() <= 0.01);
}

#[test]
fn estimate_emits_prediction_and_cues() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 1);
    let img = dir.path().join("frame.png");
    fs::copy(manifest.parent().unwrap().join("degraded/s000000.png"), &img).unwrap();
    let pred: Value = serde_json::from_str(&ok(&["estimate", "--in", p(&img), "--emit-cues"])).unwrap();
    assert!(pred["spec"]["type"].is_string());
    assert!(pred["confidence"].as_f64().unwrap() >= 0.0);
    assert!(dir.path().join("frame_fft.png").exists());
    assert!(dir.path().join("frame_edge.png").exists());

    let cues = dir.path().join("cues");
    ok(&["cues", "--in", p(&img), "--out-dir", p(&cues)]);
    assert!(cues.join("frame_fft.png").exists() && cues.join("frame_edge.png").exists());
}

#[test]
fn estimate_and_eval_over_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 2);
    let preds = dir.path().join("pred.jsonl");
    fs::write(&preds, ok(&["estimate", "--manifest", p(&manifest)])).unwrap();
    let csv = dir.path().join("eval.csv");
    let out = ok(&["eval", "--pred", p(&preds), "--manifest", p(&manifest), "--out-csv", p(&csv)]);
    assert!(field(&out, "j_acc") <= field(&out, "t_acc"));
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("id,true_type,pred_type"));
}

#[test]
fn sensitivity_correlation_is_negative() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 3);
    let csv = dir.path().join("s.csv");
    let out = ok(&[
        "sensitivity", "--manifest", p(&manifest), "--param", "t", "--errors", "0,0.1,0.2", "--out-csv", p(&csv),
    ]);
    assert!(field(&out, "pearson_psnr") < 0.0, "{out}");
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn verify_bounds_table_holds() {
    let out = ok(&["verify-bounds", "--delta", "0.01", "--epsilon", "0.02"]);
    let row = out.lines().nth(1).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    assert!(cols[2].parse::<f64>().unwrap() <= 0.2);
    assert_eq!(cols[7], "true");
}

#[test]
fn seed_override_changes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, r#"{"source":{"procedural":{"width":32,"height":32}},"count_per_type":1}"#).unwrap();
    let build = |name: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_duforge"));
        cmd.args(["build-dataset", "--config", p(&config), "--out", p(&out)]).env_remove("DUFORGE_SEED");
        if let Some(s) = seed {
            cmd.env("DUFORGE_SEED", s);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(out.join("manifest.jsonl")).unwrap()
    };
    assert_eq!(build("a", None), build("b", None));
    assert_ne!(build("a", None), build("c", Some("17")));
}

#[test]
fn reward_server_answers_over_stdio() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 1);
    let mut child = Command::new(env!("CARGO_BIN_EXE_duforge"))
        .args(["reward-serve", "--stdio", "--manifest", p(&manifest)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        writeln!(stdin, r#"{{"request_id":1,"sample_id":"s000000","prediction":{{"type":"blur","params":{{"sigma":1}}}}}}"#).unwrap();
        writeln!(stdin, "not json").unwrap();
    }
    let out = child.wait_with_output().unwrap();
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["request_id"], 1);
    assert_eq!(lines[0]["total"], -1.0);
    assert_eq!(lines[1]["code"], "malformed");
}

#[test]
fn usage_errors_exit_2_and_failures_exit_1() {
    assert_eq!(duforge(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(duforge(&["degrade", "--bogus"]).status.code(), Some(2));
    let missing = duforge(&["degrade", "--in", "/nonexistent.png", "--spec", HAZE, "--out", "/tmp/x.png"]);
    assert_eq!(missing.status.code(), Some(1));
    let bad_spec = duforge(&["tokenize", "--spec", r#"{"type":"haze","params":{"A":2}}"#, "--delta", "0.01"]);
    assert_eq!(bad_spec.status.code(), Some(1));
}
