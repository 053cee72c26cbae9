//! On-disk formats: JSONL training records, schema documents, vocabularies
//! and model checkpoints.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use jolt_core::autodiff::Tensor;
use jolt_core::model::{ModelConfig, ModelParams};
use jolt_core::pipeline::{build_training_example, TrainingExample};
use jolt_core::sampler::WeightCache;
use jolt_core::schema::{SchemaDocument, Span};
use jolt_core::sql::ColumnKey;
use jolt_core::tokenizer::Vocab;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Token spans of one table, keyed the way the training records store them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableTokenSpans {
    pub header: Span,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pk: Option<Span>,
    #[serde(default)]
    pub fk: Vec<Span>,
    pub footer: Span,
    pub columns: BTreeMap<String, Span>,
}

/// One line of `train.jsonl` / `dev.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: u64,
    pub db_id: String,
    pub question: String,
    pub sql: String,
    /// Full training input: prefix, schema and query.
    pub text: String,
    pub link: Vec<String>,
    pub label: Vec<u8>,
    pub schema: SchemaDocument,
    pub schema_element_token_spans: BTreeMap<String, TableTokenSpans>,
    pub query_span: Span,
}

impl CorpusRecord {
    /// Token positions do not depend on the vocabulary, so any example of
    /// the same text produces the same record.
    pub fn from_example(ex: &TrainingExample, schema: &SchemaDocument) -> Self {
        let spans = ex
            .segments
            .elements
            .tables
            .iter()
            .map(|t| {
                let columns = t.columns.iter().map(|c| (c.name.clone(), c.definition)).collect();
                (t.name.clone(), TableTokenSpans { header: t.header, pk: t.pk, fk: t.fk.clone(), footer: t.footer, columns })
            })
            .collect();
        CorpusRecord {
            id: ex.id,
            db_id: ex.db_id.clone(),
            question: ex.question.clone(),
            sql: ex.gold_sql.clone(),
            text: format!("{}{}{}", ex.prefix_text, ex.schema_text, ex.gold_sql),
            link: ex.link.iter().map(ColumnKey::to_string).collect(),
            label: ex.label.clone(),
            schema: schema.clone(),
            schema_element_token_spans: spans,
            query_span: ex.segments.query,
        }
    }

    /// Rebuilds the example and checks that the stored labels and spans
    /// agree with what the extractor and tokenizer produce.
    pub fn to_example(&self, vocab: &Vocab, max_len: usize) -> Result<TrainingExample> {
        let ex = build_training_example(self.id, &self.db_id, &self.question, &self.schema, &self.sql, vocab, max_len)?;
        let again = CorpusRecord::from_example(&ex, &self.schema);
        let mismatch = |what: &str| Error::Format { path: PathBuf::from(format!("record {}", self.id)), message: format!("stored {what} disagrees with the gold SQL") };
        if again.link != self.link || again.label != self.label {
            return Err(mismatch("link/label"));
        }
        if again.schema_element_token_spans != self.schema_element_token_spans || again.query_span != self.query_span {
            return Err(mismatch("token spans"));
        }
        Ok(ex)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).at(path)
}

/// Vocabulary over the training texts.
pub fn vocab_from_records(records: &[CorpusRecord]) -> Vocab {
    Vocab::build(records.iter().map(|r| r.text.as_str()))
}

const MAGIC: &[u8; 8] = b"JOLTCKPT";
const VERSION: u32 = 1;

/// Little-endian tensor dump: magic, version, count, then per tensor
/// `name_len name rows cols f32[rows·cols]`.
pub fn write_params(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    let mut put = |b: &[u8]| w.write_all(b).at(path);
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(params.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in params.names().iter().zip(&params.tensors) {
        put(&(name.len() as u32).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&(t.rows as u32).to_le_bytes())?;
        put(&(t.cols as u32).to_le_bytes())?;
        for x in &t.data {
            put(&x.to_le_bytes())?;
        }
    }
    w.flush().at(path)
}

pub fn read_params(path: &Path, config: ModelConfig) -> Result<ModelParams<f32>> {
    let mut bytes = Vec::new();
    File::open(path).at(path)?.read_to_end(&mut bytes).at(path)?;
    let bad = |m: &str| Error::Format { path: path.to_path_buf(), message: m.to_string() };
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("truncated"));
        }
        let (a, b) = cur.split_at(n);
        cur = b;
        Ok(a)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("four bytes")) as usize;
    if u32_at(take(4)?) != VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let count = u32_at(take(4)?);
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?);
        names.push(String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?);
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let data = take(rows * cols * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        tensors.push(Tensor::from_vec(rows, cols, data).map_err(|e| bad(&e.to_string()))?);
    }
    if !cur.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let params = ModelParams::from_tensors(config, tensors)?;
    if params.names() != names {
        return Err(bad("tensor names do not match the model layout"));
    }
    Ok(params)
}

/// A trained model directory.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams<f32>,
    pub cache: WeightCache,
}

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const CACHE_FILE: &str = "weights.cache.json";

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        write_json(&dir.join(CONFIG_FILE), &self.config)?;
        write_json(&dir.join(VOCAB_FILE), &self.vocab)?;
        write_json(&dir.join(CACHE_FILE), &self.cache)?;
        write_params(&dir.join(PARAMS_FILE), &self.params)
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let config: ModelConfig = read_json(&dir.join(CONFIG_FILE))?;
        let vocab: Vocab = read_json(&dir.join(VOCAB_FILE))?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Format { path: dir.to_path_buf(), message: "vocabulary size differs from the model config".into() });
        }
        let cache_path = dir.join(CACHE_FILE);
        let cache = if cache_path.exists() { read_json(&cache_path)? } else { WeightCache::new() };
        let params = read_params(&dir.join(PARAMS_FILE), config.clone())?;
        Ok(Checkpoint { config, vocab, params, cache })
    }
}
