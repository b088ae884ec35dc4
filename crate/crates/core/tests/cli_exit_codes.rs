use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn reference() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json")
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlvr-lab")).args(args).output().expect("spawn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn reference_value() -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(reference()).unwrap()).unwrap()
}

#[test]
fn missing_section_is_config_error_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = reference_value();
    v.as_object_mut().unwrap().remove("vocab");
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("vocab"), "{}", stderr(&o));
}

#[test]
fn out_of_range_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = reference_value();
    v["train"]["rollout_top_p"] = serde_json::json!(1.5);
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.rollout_top_p"), "{}", stderr(&o));
}

#[test]
fn unknown_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = reference_value();
    v["decode"]["beam"] = serde_json::json!(4);
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, v.to_string()).unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("decode"), "{}", stderr(&o));
}

#[test]
fn fully_degenerate_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = reference();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(cli(&["--config", cfg, "--out", out, "pretrain"]).status.code(), Some(0));
    // Near-zero nucleus makes every rollout greedy, so each group is all-equal.
    let mut v = reference_value();
    v["train"]["rollout_top_p"] = serde_json::json!(1e-9);
    v["train"]["steps"] = serde_json::json!(3);
    let degenerate = dir.path().join("d.json");
    fs::write(&degenerate, v.to_string()).unwrap();
    let o = cli(&["--config", degenerate.to_str().unwrap(), "--out", out, "train"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn malformed_trace_reports_line_and_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = reference();
    let cfg = cfg.to_str().unwrap();
    for cmd in ["pretrain", "train", "eval"] {
        assert_eq!(cli(&["--config", cfg, "--out", out, cmd]).status.code(), Some(0), "{cmd}");
    }
    let good = fs::read_to_string(dir.path().join("traces_rl_only.jsonl")).unwrap();
    let mut lines: Vec<&str> = good.lines().take(4).collect();
    lines.push("{\"pos\": oops}");
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n")).unwrap();
    let o = cli(&["--config", cfg, "--out", out, "analyze", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
    let msg = stderr(&o);
    assert!(msg.contains("bad.jsonl") && msg.contains("line 5"), "{msg}");
}

#[test]
fn verify_passes_without_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["--out", dir.path().to_str().unwrap(), "verify", "--instances", "100"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["violations"], 0);
}
