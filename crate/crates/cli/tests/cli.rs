use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const PROFILE: &str = r#"{"size":300,"forget_size":12,"dup_rate":0.5,"canaries":3,"canary_bits":10,
"cohorts":3,"cohort_size":6,"retain_eval":40,"seed":7,"tau_h":3,"tau_sim":0.8}"#;

fn unlearn(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unlearn"))
        .arg("-w")
        .arg(ws)
        .args(args)
        .env_remove("UNLEARN_WAL_KEY")
        .env_remove("UNLEARN_MANIFEST_KEY")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
    })
}

fn trained(dir: &Path) {
    let prof = dir.join("profile.json");
    fs::write(&prof, PROFILE).unwrap();
    assert_eq!(code(&unlearn(dir, &["gen-corpus", "--profile", prof.to_str().unwrap()])), 0);
    let o = unlearn(dir, &["train", "--steps", "28", "--warmup", "4", "--checkpoint-every", "5", "--window", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn cohort_ids(dir: &Path, cohort: usize) -> String {
    let split: Value = serde_json::from_slice(&fs::read(dir.join("corpus/split.json")).unwrap()).unwrap();
    let ids: Vec<String> = split["cohorts"][cohort][1].as_array().unwrap().iter().map(|v| v.to_string()).collect();
    ids.join(",")
}

#[test]
fn budget_prints_full_checkpoint_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = unlearn(dir.path(), &["budget"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let row = text.lines().find(|l| l.starts_with("full_checkpoint")).unwrap();
    assert!(row.ends_with("≈ 13.0 GB"), "{row}");
    let o = unlearn(dir.path(), &["budget", "--per-step-bytes", "406456", "--json"]);
    let v = stdout_json(&o);
    let stored = v["rows"].as_array().unwrap().iter().find(|r| r["artifact"] == "ring_stored").unwrap();
    assert_eq!(stored["bytes"], 4_552_307);
}

#[test]
fn gen_corpus_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        assert_eq!(code(&unlearn(d, &["gen-corpus", "--size", "400", "--seed", "3"])), 0);
    }
    for f in ["base.jsonl", "controls.jsonl", "cohorts.jsonl", "split.json"] {
        assert_eq!(fs::read(a.path().join("corpus").join(f)).unwrap(), fs::read(b.path().join("corpus").join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    unlearn(c.path(), &["gen-corpus", "--size", "400", "--seed", "4"]);
    assert_ne!(fs::read(a.path().join("corpus/base.jsonl")).unwrap(), fs::read(c.path().join("corpus/base.jsonl")).unwrap());
}

#[test]
fn replay_revert_and_cohort_forget() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    trained(ws);

    let v = stdout_json(&unlearn(ws, &["replay"]));
    assert_eq!(v["status"], "PASS");
    assert_eq!(v["matches_live_state"], true);

    let o = unlearn(ws, &["replay", "--ids", "10055"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["matches_live_state"], false);

    let v = stdout_json(&unlearn(ws, &["revert", "-u", "3"]));
    assert_eq!(v["reverted_to"], 25);
    assert_eq!(v["equals_saved_checkpoint"], true);
    assert_eq!(v["forward_replay_restores"], true);
    assert_eq!(code(&unlearn(ws, &["revert", "-u", "9"])), 3);

    let ids = cohort_ids(ws, 0);
    let o = unlearn(ws, &["forget", "--ids", &ids, "--request-id", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["path"], "ADAPTER_DELETE");
    assert_eq!(v["outcome"], "PASS");
    let report = v["artifacts"]["audit_report"].as_str().unwrap();
    assert!(ws.join("reports").join(format!("audit-report-{}.json", &report[..12])).exists());

    let o = unlearn(ws, &["forget", "--ids", "99", "--request-id", "2"]);
    assert_eq!(code(&o), 3);
    assert_eq!(stdout_json(&o)["outcome"], "REFUSED");

    let v = stdout_json(&unlearn(ws, &["verify-wal"]));
    assert_eq!(v["manifest_chain"]["entries"], 2);
    assert_eq!(code(&unlearn(ws, &["verify-wal", "--manifest-key", "other"])), 2);
}

#[test]
fn hot_path_failure_escalates_and_tamper_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    trained(ws);
    let o = unlearn(ws, &["forget", "--ids", "10055", "--request-id", "5", "--urgent", "--fail-hot-path-audit"]);
    let v = stdout_json(&o);
    let appended = v["entries_appended"].as_array().unwrap();
    assert_eq!(appended[0]["path"], "HOT_PATH");
    assert_eq!(appended[0]["outcome"], "ESCALATED");
    assert_eq!(appended[1]["path"], "EXACT_REPLAY");
    assert_eq!(appended[1]["escalated_from"], appended[0]["seq"]);
    assert_eq!(v["path"], "EXACT_REPLAY");

    let log = ws.join("manifest.log");
    let mut bytes = fs::read(&log).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&log, bytes).unwrap();
    assert_eq!(code(&unlearn(ws, &["verify-wal"])), 2);
    assert_eq!(code(&unlearn(ws, &["forget", "--ids", "10068", "--request-id", "6"])), 2);
}

#[test]
fn integrity_and_precondition_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    assert_eq!(code(&unlearn(ws, &["replay"])), 3);
    trained(ws);
    assert_eq!(code(&unlearn(ws, &["replay", "--wal-key", "wrong"])), 2);
    assert_eq!(code(&unlearn(ws, &["ci-gate"])), 0);
    let o = unlearn(ws, &["ci-gate", "--truncate-wal"]);
    assert_eq!(code(&o), 2);
    assert_eq!(stdout_json(&o)["failed_stage"], 3);
    assert!(matches!(code(&unlearn(ws, &["audit"])), 0 | 1));
}
