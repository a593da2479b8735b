use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn omni(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omni")).args(args).output().expect("spawn omni")
}

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn fixture(rel: &str) -> String {
    manifest_dir().join("tests/fixtures").join(rel).to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// Compares against a golden file; `OMNI_BLESS=1` rewrites it.
fn check_golden(path: &Path, actual: &str) {
    if std::env::var_os("OMNI_BLESS").is_some() {
        fs::write(path, actual).unwrap();
    }
    let want = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, want, "output differs from {}", path.display());
}

const SUBCOMMANDS: &[&[&str]] = &[
    &[],
    &["tokenize"],
    &["tokenize", "train"],
    &["tokenize", "rate"],
    &["rate"],
    &["dedup"],
    &["dedup", "exact"],
    &["dedup", "fuzzy"],
    &["code", "toposort"],
    &["vision", "plan"],
    &["vision", "encode"],
    &["audio", "tokens"],
    &["pack"],
    &["infer"],
    &["infer-omni"],
    &["init"],
    &["stages", "list"],
    &["stages", "lr"],
    &["bench"],
    &["search-chat"],
];

#[test]
fn help_exits_zero_everywhere() {
    for path in SUBCOMMANDS {
        let mut args = path.to_vec();
        args.push("--help");
        let o = omni(&args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        assert!(stdout(&o).contains("Usage:"), "{args:?}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    for path in SUBCOMMANDS {
        let mut args = path.to_vec();
        args.push("--definitely-not-a-flag");
        let o = omni(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("--definitely-not-a-flag"), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn missing_input_is_a_module_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.jsonl");
    let o = omni(&["dedup", "exact", "--in", "/nonexistent/corpus.jsonl", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: "), "{}", stderr(&o));

    let o = omni(&["stages", "lr", "--stage", "no-such-stage", "--total", "10"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn json_output_is_enveloped() {
    let o = omni(&["--json", "code", "toposort", "--graph", &fixture("graph.json")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["command"], "code toposort");
    let order: Vec<&str> = v["result"]["order"].as_array().unwrap().iter().map(|s| s.as_str().unwrap()).collect();
    assert_eq!(order, ["utils.py", "models.py", "app.py", "cli.py"]);
}

#[test]
fn dedup_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let count = |p: &Path| fs::read_to_string(p).unwrap().lines().count();
    let exact = dir.path().join("exact.jsonl");
    let o = omni(&["dedup", "exact", "--in", &fixture("corpus.jsonl"), "--out", exact.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(count(&exact), 4);

    let fuzzy = dir.path().join("fuzzy.jsonl");
    let o = omni(&[
        "dedup",
        "fuzzy",
        "--in",
        &fixture("corpus.jsonl"),
        "--out",
        fuzzy.to_str().unwrap(),
        "--jaccard",
        "0.7",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(count(&fuzzy), 3);
}

#[test]
fn vision_plan_budgets() {
    for (size, tokens) in [("448x448", 64), ("4000x500", 576), ("1024x1024", 320)] {
        let o = omni(&["--json", "vision", "plan", "--size", size]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(v["result"]["tokens"], tokens, "{size}");
    }
}

#[test]
fn infer_omni_golden() {
    let o = omni(&["--json", "infer-omni", "--ckpt", "toy:0", "--manifest", &fixture("omni/manifest.jsonl")]);
    assert!(o.status.success(), "{}", stderr(&o));
    check_golden(&manifest_dir().join("tests/golden/infer_omni.json"), &stdout(&o));
}

#[test]
fn search_chat_matches_core_golden() {
    let core_tests = manifest_dir().join("../core/tests");
    let script = core_tests.join("fixtures/search_script.json");
    let dir = tempfile::tempdir().unwrap();
    let saved = dir.path().join("transcript.json");
    let o = omni(&[
        "search-chat",
        "--query",
        "What is the capital of France?",
        "--backend",
        "scripted",
        "--script",
        script.to_str().unwrap(),
        "--transcript",
        saved.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "The capital of France is Paris.");
    let golden = fs::read_to_string(core_tests.join("golden/search_transcript.json")).unwrap();
    assert_eq!(fs::read_to_string(&saved).unwrap(), golden);
}

#[test]
fn scripted_backend_requires_script() {
    let o = omni(&["search-chat", "--query", "hi?", "--backend", "scripted"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--script"));
}

#[test]
fn cli_reference_is_current() {
    let mut doc = String::from("# `omni` command reference\n\nGenerated from `--help`; refresh with `OMNI_BLESS=1 cargo test -p omni-cli`.\n");
    for path in SUBCOMMANDS {
        let mut args = path.to_vec();
        args.push("--help");
        let help = stdout(&omni(&args));
        let title = if path.is_empty() { "omni".to_string() } else { format!("omni {}", path.join(" ")) };
        doc.push_str(&format!("\n## `{title}`\n\n```text\n{}\n```\n", help.trim_end()));
    }
    check_golden(&manifest_dir().join("../../docs/CLI.md"), &doc);
}
