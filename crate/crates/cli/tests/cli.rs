use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic").canonicalize().unwrap()
}

/// The fixture config rewritten to point at the bundled inputs, with a work
/// directory inside a temp dir.
fn config(dir: &TempDir, edit: impl Fn(String) -> String) -> PathBuf {
    let fx = fixture();
    let text = fs::read_to_string(fx.join("config.toml")).unwrap();
    let text = text
        .replace("\"questions.jsonl\"", &format!("{:?}", fx.join("questions.jsonl")))
        .replace("\"transcripts/", &format!("\"{}/transcripts/", fx.display()));
    let path = dir.path().join("config.toml");
    fs::write(&path, edit(text)).unwrap();
    path
}

fn foresight(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foresight"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env_remove("FORESIGHT_CHAT_API_KEY")
        .env_remove("FORESIGHT_NEWS_API_KEY")
        .output()
        .unwrap()
}

fn ok(args: &[&str], config: &Path) -> String {
    let out = foresight(args, config);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

#[test]
fn missing_api_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir, |t| {
        t.replacen(
            "[chat]\nmode = \"replay\"",
            "[chat]\nmode = \"http\"\nbase_url = \"http://127.0.0.1:9\"",
            1,
        )
    });
    ok(&["ingest"], &cfg);
    let out = foresight(&["fetch-news"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["kind"], "missing_api_key");
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir, |t| t.replace("concurrency = 8", "concurrency = 8\nfrobnicate = 1"));
    let out = foresight(&["ingest"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["kind"], "config");

    let cfg = config(&dir, |t| t.replace("test_start = \"2024-12-25\"", "test_start = \"2024-12-01\""));
    let out = foresight(&["ingest"], &cfg);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifact_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir, |t| t);
    let out = foresight(&["rank"], &cfg);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "missing_artifact");
}

#[test]
fn offline_run_through_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir, |t| t);
    let report: Value = serde_json::from_str(&ok(&["ingest"], &cfg)).unwrap();
    assert_eq!(report["accepted"], 200);
    ok(&["fetch-news"], &cfg);
    let sp: Value = serde_json::from_str(&ok(&["selfplay"], &cfg)).unwrap();
    assert_eq!(sp["kept"], 130);

    for mode in ["true_outcome", "randomized"] {
        let m: Value = serde_json::from_str(&ok(&["rank", "--label-mode", mode], &cfg)).unwrap();
        assert_eq!(m["count"], 130);
        let d: Value = serde_json::from_str(&ok(&["emit-dpo", "--label-mode", mode], &cfg)).unwrap();
        assert_eq!(d["count"], 130);
        ok(&["train-toy", "--label-mode", mode], &cfg);
        let policy = dir.path().join("work/toy").join(mode).join("policy.json");
        ok(&["forecast", "--tag", mode, "--policy", policy.to_str().unwrap()], &cfg);
    }
    let init = dir.path().join("work/toy/true_outcome/reference.json");
    ok(&["forecast", "--tag", "init", "--policy", init.to_str().unwrap()], &cfg);
    ok(&["forecast", "--tag", "base", "--chat"], &cfg);

    let text = ok(&["evaluate", "--tags", "init,true_outcome,randomized"], &cfg);
    for tag in ["init", "true_outcome", "randomized"] {
        assert!(text.contains(tag), "{text}");
    }
    let all = ok(&["evaluate"], &cfg);
    assert!(all.contains("base"), "{all}");
    assert!(dir.path().join("work/eval").is_dir());
}

#[test]
fn unknown_label_mode_is_rejected_by_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir, |t| t);
    let out = foresight(&["rank", "--label-mode", "sideways"], &cfg);
    assert_eq!(out.status.code(), Some(2));
}
