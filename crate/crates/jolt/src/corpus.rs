//! Seeded generator of small relational databases and templated
//! (question, gold SQL) pairs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use jolt_core::pipeline::{build_prompt, build_training_example, PipelineError};
use jolt_core::schema::{distinct_examples, Column, SchemaDocument, SqlValue, Table};
use jolt_core::tokenizer::{detokenize_sql, split_words, Vocab};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use crate::db::{execute, read_schema, DEFAULT_TIMEOUT};
use crate::error::{Error, IoContext, Result};
use crate::formats::{write_json, write_jsonl, CorpusRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Projection,
    Filter,
    Count,
    GroupBy,
    Join,
    OrderLimit,
}

pub const ALL_TEMPLATES: [Template; 6] =
    [Template::Projection, Template::Filter, Template::Count, Template::GroupBy, Template::Join, Template::OrderLimit];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub num_databases: usize,
    /// Inclusive `[min, max]`.
    pub tables_per_db: [usize; 2],
    /// Inclusive, counting the key columns.
    pub columns_per_table: [usize; 2],
    pub rows_per_table: [usize; 2],
    pub templates: Vec<Template>,
    pub examples_per_db: usize,
    /// Share of each database's examples that go to train.
    pub train_fraction: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_databases: 20,
            tables_per_db: [2, 3],
            columns_per_table: [4, 8],
            rows_per_table: [20, 50],
            templates: ALL_TEMPLATES.to_vec(),
            examples_per_db: 30,
            train_fraction: 25.0 / 30.0,
            max_len: 512,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        for (name, r) in [("tables_per_db", self.tables_per_db), ("columns_per_table", self.columns_per_table), ("rows_per_table", self.rows_per_table)] {
            if r[0] > r[1] || r[0] == 0 {
                return bad(&format!("{name} must be a non-empty positive range"));
            }
        }
        if self.tables_per_db[1] > TABLE_NAMES.len() {
            return bad("too many tables per database");
        }
        if self.columns_per_table[0] < 4 {
            // key columns plus one text and one integer attribute
            return bad("columns_per_table must start at 4 or more");
        }
        if self.columns_per_table[1] > 2 + TEXT_ATTRS.len() + INT_ATTRS.len() {
            return bad("columns_per_table exceeds the attribute pool");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.num_databases == 0 || self.examples_per_db == 0 {
            return bad("num_databases and examples_per_db must be positive");
        }
        if self.templates.is_empty() {
            return bad("no templates enabled");
        }
        if self.tables_per_db[0] < 2 && self.templates.iter().all(|t| *t == Template::Join) {
            return bad("join-only corpora need two tables per database");
        }
        Ok(())
    }
}

const TABLE_NAMES: [&str; 30] = [
    "singer", "concert", "stadium", "album", "band", "book", "author", "library", "student", "course", "teacher", "school",
    "airport", "flight", "airline", "hotel", "guest", "museum", "painting", "club", "player", "team", "shop", "product",
    "employee", "department", "movie", "director", "festival", "restaurant",
];

const TEXT_ATTRS: [(&str, &[&str]); 10] = [
    ("name", &["Alice", "Bruno", "Chen", "Dara", "Elena", "Farid", "Greta", "Hiro", "Ines", "Jonas", "Kofi", "Lena"]),
    ("city", &["Oslo", "Rome", "Paris", "Lima", "Cairo", "Tokyo", "Dublin", "Quito"]),
    ("country", &["Norway", "Italy", "France", "Peru", "Egypt", "Japan", "Ireland", "Chile"]),
    ("genre", &["rock", "jazz", "pop", "folk", "blues", "metal", "soul", "reggae"]),
    ("color", &["red", "blue", "green", "black", "white", "yellow", "purple", "orange"]),
    ("status", &["active", "closed", "pending", "retired", "open", "paused"]),
    ("category", &["gold", "silver", "bronze", "basic", "premium", "standard"]),
    ("title", &["Dawn", "Echo", "Harbor", "Lantern", "Meadow", "Orbit", "Quartz", "River", "Summit", "Willow"]),
    ("language", &["English", "Spanish", "French", "German", "Hindi", "Arabic", "Swahili", "Korean"]),
    ("brand", &["Acme", "Zenith", "Nova", "Apex", "Vertex", "Orion", "Pulse", "Atlas"]),
];

/// `(name, min, max, step)`
const INT_ATTRS: [(&str, i64, i64, i64); 10] = [
    ("age", 18, 70, 1),
    ("year", 1990, 2020, 1),
    ("price", 5, 95, 5),
    ("capacity", 100, 2000, 100),
    ("salary", 30, 90, 1),
    ("rating", 1, 10, 1),
    ("population", 10, 500, 10),
    ("pages", 50, 500, 10),
    ("duration", 60, 240, 5),
    ("score", 0, 100, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Id,
    ForeignKey(usize),
    Text(usize),
    Int(usize),
}

#[derive(Debug, Clone)]
struct TableSpec {
    name: String,
    columns: Vec<(String, Kind)>,
    parent: Option<usize>,
    rows: Vec<Vec<SqlValue>>,
}

impl TableSpec {
    fn attrs(&self, text: bool) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|c| matches!((c.1, text), (Kind::Text(_), true) | (Kind::Int(_), false)))
            .map(|c| c.0.as_str())
            .collect()
    }

    fn all_attrs(&self) -> Vec<&str> {
        self.columns.iter().filter(|c| matches!(c.1, Kind::Text(_) | Kind::Int(_))).map(|c| c.0.as_str()).collect()
    }

    fn values(&self, column: &str) -> Vec<&SqlValue> {
        let i = self.columns.iter().position(|c| c.0 == column).expect("known column");
        self.rows.iter().map(|r| &r[i]).collect()
    }
}

#[derive(Debug, Clone)]
struct DbSpec {
    id: String,
    tables: Vec<TableSpec>,
}

fn range<R: Rng>(rng: &mut R, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

fn gen_db<R: Rng>(rng: &mut R, index: usize, cfg: &CorpusConfig) -> DbSpec {
    let n_tables = range(rng, cfg.tables_per_db);
    let names: Vec<&str> = TABLE_NAMES.choose_multiple(rng, n_tables).copied().collect();
    let mut tables: Vec<TableSpec> = Vec::with_capacity(n_tables);
    for (ti, &name) in names.iter().enumerate() {
        let parent = if ti == 0 { None } else { Some(rng.random_range(0..ti)) };
        let n_cols = range(rng, cfg.columns_per_table);
        let n_attrs = n_cols - 1 - usize::from(parent.is_some());
        let mut texts: Vec<usize> = (0..TEXT_ATTRS.len()).collect();
        let mut ints: Vec<usize> = (0..INT_ATTRS.len()).collect();
        texts.shuffle(rng);
        ints.shuffle(rng);
        // at least one attribute of each type
        let lo = n_attrs.saturating_sub(INT_ATTRS.len()).max(1);
        let hi = (n_attrs - 1).min(TEXT_ATTRS.len());
        let n_text = rng.random_range(lo..=hi);
        let mut attrs: Vec<Kind> = texts[..n_text].iter().map(|&i| Kind::Text(i)).chain(ints[..n_attrs - n_text].iter().map(|&i| Kind::Int(i))).collect();
        attrs.shuffle(rng);
        let mut columns = vec![("id".to_string(), Kind::Id)];
        if let Some(p) = parent {
            columns.push((format!("{}_id", tables[p].name), Kind::ForeignKey(p)));
        }
        for k in attrs {
            let name = match k {
                Kind::Text(i) => TEXT_ATTRS[i].0,
                Kind::Int(i) => INT_ATTRS[i].0,
                _ => unreachable!(),
            };
            columns.push((name.to_string(), k));
        }
        let n_rows = range(rng, cfg.rows_per_table);
        let mut rows = Vec::with_capacity(n_rows);
        for r in 0..n_rows {
            let row = columns
                .iter()
                .map(|(_, k)| match *k {
                    Kind::Id => SqlValue::Integer(r as i64 + 1),
                    Kind::ForeignKey(p) => SqlValue::Integer(rng.random_range(1..=tables[p].rows.len() as i64)),
                    Kind::Text(i) => SqlValue::Text(TEXT_ATTRS[i].1.choose(rng).expect("non-empty pool").to_string()),
                    Kind::Int(i) => {
                        let (_, lo, hi, step) = INT_ATTRS[i];
                        SqlValue::Integer(lo + step * rng.random_range(0..=(hi - lo) / step))
                    }
                })
                .collect();
            rows.push(row);
        }
        tables.push(TableSpec { name: name.to_string(), columns, parent, rows });
    }
    DbSpec { id: format!("db_{index:02}"), tables }
}

impl DbSpec {
    fn schema(&self, examples: usize) -> SchemaDocument {
        let tables = self
            .tables
            .iter()
            .map(|t| Table {
                name: t.name.clone(),
                columns: t
                    .columns
                    .iter()
                    .map(|(name, k)| Column {
                        name: name.clone(),
                        sql_type: if matches!(k, Kind::Text(_)) { "TEXT" } else { "INTEGER" }.to_string(),
                        examples: distinct_examples(t.values(name), examples),
                    })
                    .collect(),
                primary_key: vec!["id".to_string()],
                foreign_keys: t.parent.map(|p| (format!("{}_id", self.tables[p].name), self.tables[p].name.clone(), "id".to_string())).into_iter().collect(),
            })
            .collect();
        SchemaDocument { tables }
    }

    fn write(&self, path: &Path) -> Result<Connection> {
        if path.exists() {
            fs::remove_file(path).at(path)?;
        }
        let mut conn = Connection::open(path)?;
        let tx = conn.transaction()?;
        for t in &self.tables {
            let mut ddl = format!("CREATE TABLE {} (", t.name);
            for (name, k) in &t.columns {
                ddl.push_str(&format!("{name} {}, ", if matches!(k, Kind::Text(_)) { "TEXT" } else { "INTEGER" }));
            }
            ddl.push_str("PRIMARY KEY (id)");
            if let Some(p) = t.parent {
                let pn = &self.tables[p].name;
                ddl.push_str(&format!(", FOREIGN KEY ({pn}_id) REFERENCES {pn} (id)"));
            }
            ddl.push(')');
            tx.execute(&ddl, [])?;
            let placeholders = vec!["?"; t.columns.len()].join(", ");
            let mut stmt = tx.prepare(&format!("INSERT INTO {} VALUES ({placeholders})", t.name))?;
            for row in &t.rows {
                let params: Vec<rusqlite::types::Value> = row
                    .iter()
                    .map(|v| match v {
                        SqlValue::Integer(i) => (*i).into(),
                        SqlValue::Text(s) => s.clone().into(),
                        _ => rusqlite::types::Value::Null,
                    })
                    .collect();
                stmt.execute(rusqlite::params_from_iter(params))?;
            }
        }
        tx.commit()?;
        Ok(conn)
    }
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty choice")
}

fn pick_other<'a, R: Rng>(rng: &mut R, xs: &[&'a str], not: &str) -> Option<&'a str> {
    let rest: Vec<&str> = xs.iter().copied().filter(|x| *x != not).collect();
    rest.choose(rng).copied()
}

fn value_word(v: &SqlValue) -> String {
    match v {
        SqlValue::Text(s) => s.clone(),
        other => other.render_literal(),
    }
}

/// One templated (question, SQL) candidate; `None` when the template does
/// not fit the database.
fn render<R: Rng>(rng: &mut R, db: &DbSpec, template: Template) -> Option<(String, String)> {
    let ti = rng.random_range(0..db.tables.len());
    let t = &db.tables[ti];
    let attrs = t.all_attrs();
    let texts = t.attrs(true);
    let ints = t.attrs(false);
    match template {
        Template::Projection => {
            let c1 = pick(rng, &attrs);
            if rng.random_bool(0.5) {
                let verb = pick(rng, &["List", "Show", "Give", "Return"]);
                let q = format!("{verb} the {c1} of every {} .", t.name);
                Some((q, format!("SELECT {c1} FROM {}", t.name)))
            } else {
                let c2 = pick_other(rng, &attrs, c1)?;
                let verb = pick(rng, &["List", "Show", "What are"]);
                let q = format!("{verb} the {c1} and {c2} of each {} ?", t.name);
                Some((q, format!("SELECT {c1}, {c2} FROM {}", t.name)))
            }
        }
        Template::Filter => {
            let out = pick(rng, &attrs);
            if rng.random_bool(0.5) {
                let fc = pick_other(rng, &texts, out)?;
                let v = (*t.values(fc).choose(rng)?).clone();
                let q = match rng.random_range(0..3) {
                    0 => format!("What is the {out} of the {} whose {fc} is {} ?", t.name, value_word(&v)),
                    1 => format!("List the {out} of {} with {fc} {} .", t.name, value_word(&v)),
                    _ => format!("Find the {out} for every {} where {fc} equals {} .", t.name, value_word(&v)),
                };
                Some((q, format!("SELECT {out} FROM {} WHERE {fc} = {}", t.name, v.render_literal())))
            } else {
                let fc = pick_other(rng, &ints, out)?;
                let v = (*t.values(fc).choose(rng)?).clone();
                let (op, word) = if rng.random_bool(0.5) {
                    (">", pick(rng, &["above", "greater than", "more than"]))
                } else {
                    ("<", pick(rng, &["below", "less than", "under"]))
                };
                let q = format!("Show the {out} of {} with {fc} {word} {} .", t.name, value_word(&v));
                Some((q, format!("SELECT {out} FROM {} WHERE {fc} {op} {}", t.name, v.render_literal())))
            }
        }
        Template::Count => {
            if rng.random_bool(0.5) {
                let fc = pick(rng, &texts);
                let v = (*t.values(fc).choose(rng)?).clone();
                let q = format!("How many {} records have {fc} {} ?", t.name, value_word(&v));
                Some((q, format!("SELECT COUNT(*) FROM {} WHERE {fc} = {}", t.name, v.render_literal())))
            } else {
                let fc = pick(rng, &ints);
                let v = (*t.values(fc).choose(rng)?).clone();
                let (op, word) = if rng.random_bool(0.5) { (">", "above") } else { ("<", "below") };
                let q = format!("Count the {} entries with {fc} {word} {} .", t.name, value_word(&v));
                Some((q, format!("SELECT COUNT(*) FROM {} WHERE {fc} {op} {}", t.name, v.render_literal())))
            }
        }
        Template::GroupBy => {
            let g = pick(rng, &texts);
            if rng.random_bool(0.5) {
                let q = match rng.random_range(0..2) {
                    0 => format!("For each {g} , how many {} are there ?", t.name),
                    _ => format!("Count the {} rows per {g} .", t.name),
                };
                Some((q, format!("SELECT {g}, COUNT(*) FROM {} GROUP BY {g}", t.name)))
            } else {
                let a = pick(rng, &ints);
                let (func, word) = *[("AVG", "average"), ("MAX", "maximum"), ("MIN", "minimum"), ("SUM", "total"), ("MAX", "highest"), ("MIN", "lowest")]
                    .choose(rng)
                    .expect("non-empty");
                let q = format!("What is the {word} {a} of {} for each {g} ?", t.name);
                Some((q, format!("SELECT {g}, {func}({a}) FROM {} GROUP BY {g}", t.name)))
            }
        }
        Template::Join => {
            let children: Vec<usize> = (0..db.tables.len()).filter(|&c| db.tables[c].parent.is_some()).collect();
            let ci = *children.choose(rng)?;
            let child = &db.tables[ci];
            let parent = &db.tables[child.parent.expect("child has a parent")];
            let on = format!("FROM {} AS T1 JOIN {} AS T2 ON T1.id = T2.{}_id", parent.name, child.name, parent.name);
            let cc = pick(rng, &child.all_attrs());
            if rng.random_bool(0.5) {
                let pc = pick(rng, &parent.all_attrs());
                let q = format!("Show the {pc} of each {} together with the {cc} of its {} .", parent.name, child.name);
                Some((q, format!("SELECT T1.{pc}, T2.{cc} {on}")))
            } else {
                let fc = pick(rng, &parent.attrs(true));
                let v = (*parent.values(fc).choose(rng)?).clone();
                let q = format!("What is the {cc} of each {} whose {} has {fc} {} ?", child.name, parent.name, value_word(&v));
                Some((q, format!("SELECT T2.{cc} {on} WHERE T1.{fc} = {}", v.render_literal())))
            }
        }
        Template::OrderLimit => {
            let key = pick(rng, &ints);
            let out = pick_other(rng, &attrs, key)?;
            let desc = rng.random_bool(0.5);
            let (dir, word) = if desc { ("DESC", pick(rng, &["highest", "largest"])) } else { ("ASC", pick(rng, &["lowest", "smallest"])) };
            if rng.random_bool(0.5) {
                let q = format!("Which {} has the {word} {key} ? Give its {out} .", t.name);
                Some((q, format!("SELECT {out} FROM {} ORDER BY {key} {dir} LIMIT 1", t.name)))
            } else {
                let k = rng.random_range(2..=5);
                let q = format!("Show the {out} of the {k} {} with the {word} {key} .", t.name);
                Some((q, format!("SELECT {out} FROM {} ORDER BY {key} {dir} LIMIT {k}", t.name)))
            }
        }
    }
}

/// Token count of a bare prompt (empty question, no query); it does not
/// depend on the vocabulary.
fn prompt_len(schema: &SchemaDocument) -> std::result::Result<usize, PipelineError> {
    let empty = Vocab::build(std::iter::empty());
    Ok(build_prompt("", schema, &empty)?.tokens.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub schemas: Vec<(String, SchemaDocument)>,
    pub train: Vec<CorpusRecord>,
    pub dev: Vec<CorpusRecord>,
}

/// Writes `dbs/*.sqlite`, `schema/*.json`, `train.jsonl` and `dev.jsonl`
/// under `out`.
pub fn generate_corpus(cfg: &CorpusConfig, out: &Path) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    let dbs_dir = out.join("dbs");
    let schema_dir = out.join("schema");
    fs::create_dir_all(&dbs_dir).at(&dbs_dir)?;
    fs::create_dir_all(&schema_dir).at(&schema_dir)?;
    let empty = Vocab::build(std::iter::empty());
    let mut result = GeneratedCorpus { schemas: Vec::new(), train: Vec::new(), dev: Vec::new() };
    let mut next_id = 0u64;
    for index in 0..cfg.num_databases {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        // resample until the bare prompt leaves room for a question and query
        let mut spec = gen_db(&mut rng, index, cfg);
        let mut attempts = 0;
        while prompt_len(&spec.schema(2)).map_err(|e| Error::Config(e.to_string()))? + 96 > cfg.max_len {
            attempts += 1;
            if attempts > 50 {
                return Err(Error::Config("databases do not fit max_len; lower columns_per_table or tables_per_db".into()));
            }
            spec = gen_db(&mut rng, index, cfg);
        }
        let path = dbs_dir.join(format!("{}.sqlite", spec.id));
        let conn = spec.write(&path)?;
        let schema = read_schema(&conn, 2)?;
        debug_assert_eq!(schema, spec.schema(2));
        write_json(&schema_dir.join(format!("{}.json", spec.id)), &schema)?;

        let mut seen = BTreeSet::new();
        let mut examples = Vec::new();
        let mut tries = 0;
        while examples.len() < cfg.examples_per_db && tries < cfg.examples_per_db * 50 {
            tries += 1;
            let template = *cfg.templates.choose(&mut rng).expect("validated");
            let Some((question, sql)) = render(&mut rng, &spec, template) else { continue };
            debug_assert_eq!(detokenize_sql(split_words(&sql).into_iter().map(|w| w.0)), sql);
            if seen.contains(&sql) {
                continue;
            }
            match execute(&conn, &sql, DEFAULT_TIMEOUT) {
                Ok(rows) if !rows.is_empty() => {}
                _ => continue,
            }
            let ex = match build_training_example(0, &spec.id, &question, &schema, &sql, &empty, cfg.max_len) {
                Ok(ex) => ex,
                Err(PipelineError::SequenceTooLong { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            seen.insert(sql);
            examples.push(ex);
        }
        let n_train = ((examples.len() as f64) * cfg.train_fraction).round() as usize;
        for (k, mut ex) in examples.into_iter().enumerate() {
            ex.id = next_id;
            next_id += 1;
            let rec = CorpusRecord::from_example(&ex, &schema);
            if k < n_train {
                result.train.push(rec);
            } else {
                result.dev.push(rec);
            }
        }
        result.schemas.push((spec.id.clone(), schema));
    }
    write_jsonl(&out.join("train.jsonl"), &result.train)?;
    write_jsonl(&out.join("dev.jsonl"), &result.dev)?;
    Ok(result)
}

pub fn db_path(dbs_dir: &Path, db_id: &str) -> PathBuf {
    dbs_dir.join(format!("{db_id}.sqlite"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub examples: usize,
    pub avg_columns: f64,
    pub positive_rate: f64,
}

pub fn corpus_stats(records: &[CorpusRecord]) -> CorpusStats {
    let columns: usize = records.iter().map(|r| r.label.len()).sum();
    let positives: usize = records.iter().map(|r| r.label.iter().filter(|&&l| l != 0).count()).sum();
    if records.is_empty() || columns == 0 {
        return CorpusStats { examples: records.len(), avg_columns: 0.0, positive_rate: 0.0 };
    }
    CorpusStats {
        examples: records.len(),
        avg_columns: columns as f64 / records.len() as f64,
        positive_rate: positives as f64 / columns as f64,
    }
}
