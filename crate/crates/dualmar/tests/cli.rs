//! The `dualmar` binary: summaries on stdout, error records and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn dualmar(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualmar"))
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .env_remove("DUALMAR_THREADS")
        .output()
        .unwrap()
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error record on stderr");
    serde_json::from_str::<Value>(last).unwrap()["error"].clone()
}

const RESPONSE: &str = "\
[Heart Failure, IS_CAUSED_BY, Narrowed Arteries]
[Heart Failure, HAS_SYMPTOM, Fatigue]
[Heart Failure, HAS_SYMPTOM, Shortness Of Breath]
";

#[test]
fn harvest_to_embedding_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let specs = d.join("specs.jsonl");
    let spec = json!({
        "category": "disease",
        "term": "Heart Failure",
        "topics": "Overview",
        "text": "Heart failure is often caused by narrowed arteries and brings fatigue.",
    });
    std::fs::write(&specs, format!("{spec}\n")).unwrap();

    let render = dualmar(d, &["harvest-render", "--specs", specs.to_str().unwrap()]);
    assert!(render.status.success());
    let prompts: Vec<Value> = String::from_utf8(render.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // x passes of y + 1 reads each, under the default x = 2, y = 1
    assert_eq!(prompts.len(), 4);
    let transcript: String = prompts
        .iter()
        .map(|p| format!("{}\n", json!({"prompt_hash": p["prompt_hash"], "pass": p["pass"], "response": RESPONSE})))
        .collect();
    let tpath = d.join("transcript.jsonl");
    std::fs::write(&tpath, transcript).unwrap();

    let parse = dualmar(
        d,
        &["harvest-parse", "--specs", specs.to_str().unwrap(), "--transcript", tpath.to_str().unwrap()],
    );
    assert!(parse.status.success(), "{}", String::from_utf8_lossy(&parse.stderr));
    let summary: Value = serde_json::from_slice(&parse.stdout).unwrap();
    assert_eq!(summary["triples"], 3);

    let generated = d.join("harvest/generated.tsv");
    let norm = dualmar(d, &["kg-normalize", "--generated", generated.to_str().unwrap()]);
    assert!(norm.status.success(), "{}", String::from_utf8_lossy(&norm.stderr));
    let stats = dualmar(d, &["kg-stats"]);
    let stats: Value = serde_json::from_slice(&stats.stdout).unwrap();
    assert_eq!(stats["triples"], 3);

    let kge = ["--k", "4", "--steps", "50", "--negatives", "2", "--batch-size", "2", "--test-frac", "0"];
    let train = dualmar(d, &[&["kge-train"][..], &kge].concat());
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    // the eval stage re-derives the config and must see the same flags
    let stale = dualmar(d, &["kge-eval", "--k", "4"]);
    assert_eq!(stale.status.code(), Some(4));
    assert_eq!(error_record(&stale)["kind"], "StaleArtifact");

    // every log line on stderr is a JSON object
    for line in String::from_utf8_lossy(&train.stderr).lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["msg"].is_string() && v["level"].is_string());
    }
}

#[test]
fn failures_print_a_record_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualmar(dir.path(), &["finetune"]);
    assert_eq!(out.status.code(), Some(3));
    let rec = error_record(&out);
    assert_eq!(rec["kind"], "CheckpointMissing");
    assert_eq!(rec["command"], "finetune");

    let out = dualmar(dir.path(), &["graph-build"]);
    assert_eq!(error_record(&out)["kind"], "MissingInput");

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"graph": {"phi": 0.5, "colour": 1}}"#).unwrap();
    let out = dualmar(dir.path(), &["--config", cfg.to_str().unwrap(), "data-synth"]);
    assert_eq!(out.status.code(), Some(6));
}

#[test]
fn thread_cap_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dualmar"))
        .arg("--out-dir")
        .arg(dir.path())
        .arg("gradcheck")
        .env("DUALMAR_THREADS", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_eq!(error_record(&out)["kind"], "Config");
}

#[test]
fn gradcheck_reports_every_primitive() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualmar(dir.path(), &["gradcheck", "--instances", "20"]);
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() >= 10);
    for l in &lines {
        assert!(l["max_rel_err"].as_f64().unwrap() <= 1e-4, "{l}");
    }
}
