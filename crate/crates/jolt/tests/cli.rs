use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use jolt::corpus::{generate_corpus, CorpusConfig};
use jolt::formats::{read_json, read_jsonl, CorpusRecord};
use jolt::logging::replay_losses;

fn jolt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jolt")).args(args).output().unwrap()
}

fn corpus(dir: &Path) -> Vec<CorpusRecord> {
    let cfg = CorpusConfig { num_databases: 2, examples_per_db: 6, seed: 4, ..CorpusConfig::default() };
    generate_corpus(&cfg, dir).unwrap().train
}

fn schema_file(dir: &Path, r: &CorpusRecord) -> String {
    dir.join("schema").join(format!("{}.json", r.db_id)).display().to_string()
}

#[test]
fn exit_codes() {
    assert_eq!(jolt(&["--help"]).status.code(), Some(0));
    assert_eq!(jolt(&["train", "--out", "x"]).status.code(), Some(2));
    assert_eq!(jolt(&["no-such-command"]).status.code(), Some(2));
    let missing = jolt(&["extract-gt", "--sql", "SELECT 1", "--schema", "/nonexistent/schema.json"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}

#[test]
fn extract_gt_prints_links() {
    let dir = tempfile::tempdir().unwrap();
    let recs = corpus(dir.path());
    for r in recs.iter().take(4) {
        let out = jolt(&["extract-gt", "--sql", &r.sql, "--schema", &schema_file(dir.path(), r)]);
        assert_eq!(out.status.code(), Some(0));
        let links: Vec<String> = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(links, r.link);
    }
    let r = &recs[0];
    let bad = jolt(&["extract-gt", "--sql", "SELECT nope FROM nowhere", "--schema", &schema_file(dir.path(), r)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn serialize_and_encode() {
    let dir = tempfile::tempdir().unwrap();
    let recs = corpus(dir.path());
    let r = &recs[0];
    let spans = dir.path().join("spans.json");
    let out = jolt(&["serialize", "--schema", &schema_file(dir.path(), r), "--spans", spans.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(r.text.contains(&text));
    assert!(spans.exists());

    let out = jolt(&["encode", "--schema", &schema_file(dir.path(), r), "--question", &r.question, "--sql", &r.sql]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let n = v["tokens"].as_array().unwrap().len();
    assert_eq!(v["segments"]["query"][1].as_u64().unwrap() as usize, n);
    assert_eq!(v["segments"]["query"], serde_json::to_value(r.query_span).unwrap());
}

#[test]
fn mask_viz_ascii() {
    let dir = tempfile::tempdir().unwrap();
    let recs = corpus(dir.path());
    let r = recs.iter().find(|r| r.label.iter().any(|&l| l == 0)).unwrap();
    let columns: Vec<String> =
        r.schema.tables.iter().flat_map(|t| t.columns.iter().map(move |c| format!("{}.{}", t.name, c.name))).collect();
    let noisy = columns.iter().zip(&r.label).find(|(_, &l)| l == 0).unwrap().0;
    let gt = &r.link[0];
    let file = dir.path().join("mask.txt");
    let schema = schema_file(dir.path(), r);
    let args = ["mask-viz", "--schema", &schema, "--question", &r.question, "--sql", &r.sql, "--noisy"];
    let out = jolt(&[&args[..], &[noisy.as_str(), "--out", file.to_str().unwrap()]].concat());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let n = r.query_span.end;
    assert_eq!(fs::read_to_string(&file).unwrap().lines().count(), n + 1);

    let out = jolt(&[&args[..], &[gt.as_str()]].concat());
    assert_eq!(out.status.code(), Some(1));
    let out = jolt(&[&args[..], &["ghost.column"]].concat());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_infer_eval_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let c = root.join("corpus");
    let ck = root.join("ck");
    let s = |p: &Path| p.display().to_string();
    let cfg = root.join("run.json");
    fs::write(&cfg, r#"{"model": {"dim": 16, "layers": 1, "heads": 2}, "corpus": {"num_databases": 2, "examples_per_db": 6}}"#).unwrap();

    assert_eq!(jolt::cli::dispatch(["jolt", "gen-corpus", "--config", &s(&cfg), "--out", &s(&c), "--seed", "2"]), 0);
    let train: Vec<CorpusRecord> = read_jsonl(&c.join("train.jsonl")).unwrap();
    assert_eq!(
        jolt::cli::dispatch(["jolt", "train", "--corpus", &s(&c.join("train.jsonl")), "--config", &s(&cfg), "--out", &s(&ck), "--epochs", "2"]),
        0
    );
    let losses = replay_losses(&ck.join("train.log.jsonl")).unwrap();
    assert_eq!(losses.len(), 2 * train.len());
    assert!(losses.iter().all(|(a, b)| a.is_finite() && b.is_finite() && *a >= 0.0 && *b >= 0.0));

    let r = &train[0];
    let out = jolt(&["infer", "--ckpt", &s(&ck), "--question", &r.question, "--schema", &schema_file(&c, r)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.get("sql").is_some());

    let ev = root.join("ev");
    let code = jolt::cli::dispatch([
        "jolt", "eval", "--ckpt", &s(&ck), "--dev", &s(&c.join("dev.jsonl")), "--dbs", &s(&c.join("dbs")), "--out", &s(&ev), "--sweep",
    ]);
    assert_eq!(code, 0);
    let m: serde_json::Value = read_json(&ev.join("metrics.json")).unwrap();
    let ex = m["execution"]["ex"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ex));
    assert!(ev.join("sweep.csv").exists());
}
