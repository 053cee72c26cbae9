use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use jolt::corpus::{corpus_stats, db_path, generate_corpus, CorpusConfig};
use jolt::db::{execute, open_readonly, read_schema, DEFAULT_TIMEOUT};
use jolt::formats::{read_json, read_jsonl, vocab_from_records, CorpusRecord};
use jolt_core::schema::SchemaDocument;
use jolt_core::sql::links_for;

fn small(seed: u64) -> CorpusConfig {
    CorpusConfig { num_databases: 3, examples_per_db: 12, seed, ..CorpusConfig::default() }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "schema", "dbs"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_corpus(&small(7), a.path()).unwrap();
    generate_corpus(&small(7), b.path()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.len() >= 2 + 3 + 3);
    assert_eq!(fa, fb);
}

#[test]
fn seed_changes_the_corpus() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_corpus(&small(7), a.path()).unwrap();
    generate_corpus(&small(8), b.path()).unwrap();
    assert_ne!(fs::read(a.path().join("train.jsonl")).unwrap(), fs::read(b.path().join("train.jsonl")).unwrap());
}

#[test]
fn records_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_corpus(&small(3), dir.path()).unwrap();
    let train: Vec<CorpusRecord> = read_jsonl(&dir.path().join("train.jsonl")).unwrap();
    let dev: Vec<CorpusRecord> = read_jsonl(&dir.path().join("dev.jsonl")).unwrap();
    assert_eq!(train, c.train);
    assert_eq!(dev, c.dev);
    assert!(!dev.is_empty());

    let all: Vec<&CorpusRecord> = train.iter().chain(&dev).collect();
    let ids: BTreeSet<u64> = all.iter().map(|r| r.id).collect();
    assert_eq!(ids.len(), all.len());
    let vocab = vocab_from_records(&train);
    for r in &all {
        let conn = open_readonly(&db_path(&dir.path().join("dbs"), &r.db_id)).unwrap();
        let rows = execute(&conn, &r.sql, DEFAULT_TIMEOUT).unwrap_or_else(|e| panic!("{}: {e:?}", r.sql));
        assert!(!rows.is_empty(), "{}", r.sql);

        let on_disk: SchemaDocument = read_json(&dir.path().join("schema").join(format!("{}.json", r.db_id))).unwrap();
        assert_eq!(on_disk, r.schema);
        assert_eq!(read_schema(&conn, 2).unwrap(), r.schema);

        let links: Vec<String> = links_for(&r.sql, &r.schema).unwrap().iter().map(ToString::to_string).collect();
        assert!(!links.is_empty(), "{}", r.sql);
        assert_eq!(links, r.link);
        let columns: Vec<String> =
            r.schema.tables.iter().flat_map(|t| t.columns.iter().map(move |c| format!("{}.{}", t.name, c.name))).collect();
        assert_eq!(r.label.len(), columns.len());
        for (name, &l) in columns.iter().zip(&r.label) {
            assert_eq!(l != 0, r.link.contains(name), "{name} in {}", r.sql);
        }
        assert!(r.text.ends_with(&r.sql));
        r.to_example(&vocab, 512).unwrap();
    }
}

#[test]
fn tampered_record_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_corpus(&small(3), dir.path()).unwrap();
    let mut r = c.train[0].clone();
    let vocab = vocab_from_records(&c.train);
    let i = r.label.iter().position(|&l| l == 0).unwrap();
    r.label[i] = 1;
    assert!(r.to_example(&vocab, 512).is_err());
}

#[test]
fn default_config_sizes() {
    let cfg = CorpusConfig::default();
    assert_eq!(cfg.num_databases, 20);
    assert_eq!(cfg.tables_per_db, [2, 3]);
    assert_eq!(cfg.columns_per_table, [4, 8]);
    assert_eq!(cfg.rows_per_table, [20, 50]);
    let per_db_train = (cfg.examples_per_db as f64 * cfg.train_fraction).round() as usize;
    assert_eq!(per_db_train * cfg.num_databases, 500);
    assert_eq!((cfg.examples_per_db - per_db_train) * cfg.num_databases, 100);
}

#[test]
fn invalid_configs() {
    for cfg in [
        CorpusConfig { tables_per_db: [3, 2], ..CorpusConfig::default() },
        CorpusConfig { columns_per_table: [3, 6], ..CorpusConfig::default() },
        CorpusConfig { train_fraction: 1.0, ..CorpusConfig::default() },
        CorpusConfig { templates: vec![], ..CorpusConfig::default() },
        CorpusConfig { num_databases: 0, ..CorpusConfig::default() },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

#[test]
fn stats() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_corpus(&small(5), dir.path()).unwrap();
    let s = corpus_stats(&c.train);
    let cols: usize = c.train.iter().map(|r| r.schema.tables.iter().map(|t| t.columns.len()).sum::<usize>()).sum();
    let pos: usize = c.train.iter().map(|r| r.link.len()).sum();
    assert_eq!(s.examples, c.train.len());
    assert!((s.avg_columns - cols as f64 / c.train.len() as f64).abs() < 1e-12);
    assert!((s.positive_rate - pos as f64 / cols as f64).abs() < 1e-12);

    let e = corpus_stats(&[]);
    assert_eq!((e.examples, e.avg_columns, e.positive_rate), (0, 0.0, 0.0));
}
