use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn paincast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paincast"))
        .current_dir(dir)
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = paincast(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn help_lists_every_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let help = ok(tmp.path(), &["--help"]);
    for flag in [
        "--config", "--seed", "--run-name", "--output-dir", "--cohort", "--kb-dir", "--lexicon", "--rules",
        "--template", "--horizons", "--k-folds", "--models", "--alpha", "--beta", "--threshold", "--llm",
        "--base-url", "--llm-model", "--n-patients", "--verbose",
    ] {
        assert!(help.contains(flag), "{flag} missing from --help");
    }
    for cmd in ["ingest", "synth", "train", "evaluate", "rag-index", "predict", "fuse", "report"] {
        assert!(help.contains(cmd), "{cmd} missing from --help");
    }
}

#[test]
fn unknown_flag_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = paincast(tmp.path(), &["synth", "--seed", "1", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

#[test]
fn seed_is_required() {
    let tmp = tempfile::tempdir().unwrap();
    let out = paincast(tmp.path(), &["synth"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn missing_upstream_artifact_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let out = paincast(tmp.path(), &["train", "--seed", "4"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cohort.jsonl") && err.contains("synth"), "{err}");
}

#[test]
fn synth_train_report_on_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--seed", "8"]);
    ok(tmp.path(), &["train", "--seed", "8"]);
    let table = ok(tmp.path(), &["report", "--seed", "8"]);
    assert!(table.contains("| Horizon | Metric | ML Only | LLM Only | ML+LLM |"));
    let csv = fs::read_to_string(tmp.path().join("runs/run-8/report/table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(tmp.path().join("runs/run-8/manifest.json").exists());
    assert!(tmp.path().join("runs/run-8/timestamps.json").exists());
}

#[test]
fn mock_fuse_calls_match_the_band_and_flags_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "seed = 1\nhorizons = [\"48h\"]\n\n[[models]]\nkind = \"logistic\"\n\n[synth]\nn_patients = 120\n\n[llm]\nmock = true\nscore_all = false\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    for step in ["synth", "train", "predict", "fuse"] {
        ok(tmp.path(), &[step, "--config", c, "--seed", "2", "--alpha", "0.2", "--beta", "0.6"]);
    }
    let run = tmp.path().join("runs/run-2");
    assert!(!tmp.path().join("runs/run-1").exists());
    let audit = fs::read_to_string(run.join("fusion/48h.csv")).unwrap();
    let in_band = audit.lines().skip(1).filter(|l| l.split(',').nth(2) == Some("1")).count();
    let calls = fs::read_to_string(run.join("fusion/48h_llm.jsonl")).unwrap().lines().count();
    assert!(in_band > 0);
    assert_eq!(calls, in_band);
}

#[test]
fn credential_comes_from_the_environment_and_is_not_printed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_paincast"))
        .current_dir(tmp.path())
        .args(["show-config", "--seed", "3"])
        .env("PAINCAST_API_KEY", "sk-do-not-print")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("seed = 3"));
    assert!(!text.contains("sk-do-not-print"));
}
