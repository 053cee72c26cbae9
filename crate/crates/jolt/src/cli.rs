//! Subcommand dispatch for the `jolt` binary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use jolt_core::mask::{build_joint_mask, render_ascii, render_ppm, render_svg};
use jolt_core::pipeline::{build_prompt, build_training_example, infer, init_params, noisy_positions, train, StepRecord};
use jolt_core::sampler::{NoiseMode, WeightCache};
use jolt_core::schema::{serialize_schema, SchemaDocument, MARKER};
use jolt_core::sql::links_for;
use jolt_core::tokenizer::{encode, Vocab};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::corpus::{corpus_stats, generate_corpus};
use crate::error::{Error, IoContext, Result};
use crate::eval::{evaluate, sweep_csv, sweep_svg};
use crate::formats::{read_json, read_jsonl, vocab_from_records, write_json, Checkpoint, CorpusRecord};
use crate::logging::EventLog;

#[derive(Debug, Parser)]
#[command(name = "jolt", version, about = "Joint schema linking and SQL generation on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MaskFormat {
    Ascii,
    Svg,
    Ppm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NoiseArg {
    None,
    Random,
    ConfusionAware,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the ground-truth schema links of a SQL query.
    ExtractGt {
        #[arg(long)]
        sql: String,
        #[arg(long)]
        schema: PathBuf,
    },
    /// Render a schema as marker-annotated DDL.
    Serialize {
        #[arg(long)]
        schema: PathBuf,
        /// Also write the byte spans of every schema element here.
        #[arg(long)]
        spans: Option<PathBuf>,
    },
    /// Tokenize a question, schema and optional query.
    Encode {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long, default_value = "")]
        sql: String,
        /// Vocabulary file; defaults to one built from the inputs.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Draw the joint training mask of one example.
    MaskViz {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        sql: String,
        /// Noisy columns as `table.column`, comma separated.
        #[arg(long, value_delimiter = ',')]
        noisy: Vec<String>,
        #[arg(long, value_enum, default_value = "ascii")]
        format: MaskFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic databases and train/dev files.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a JSONL corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        noise: Option<NoiseArg>,
        /// Keep a seeded random subset of this share of the corpus.
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Link, prune and generate SQL for one question.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Link metrics and execution accuracy on a dev set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        dbs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for metrics.json (and sweep files); defaults to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        sweep: bool,
    },
    /// Threshold sweep: CSV and SVG of precision, recall and EX.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        dbs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_schema(path: &Path) -> Result<SchemaDocument> {
    let doc: SchemaDocument = read_json(path)?;
    doc.validate()?;
    Ok(doc)
}

/// A closed pipe (`jolt ... | head`) ends output quietly.
fn write_stdout(bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(bytes).and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.at("<stdout>"),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    write_stdout(format!("{}\n", serde_json::to_string_pretty(v)?).as_bytes())
}

fn load_run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?.apply_env()?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::ExtractGt { sql, schema } => {
            let doc = load_schema(&schema)?;
            let links: Vec<String> = links_for(&sql, &doc)?.iter().map(ToString::to_string).collect();
            print_json(&json!(links))
        }
        Command::Serialize { schema, spans } => {
            let doc = load_schema(&schema)?;
            let (text, index) = serialize_schema(&doc, MARKER);
            write_stdout(text.as_bytes())?;
            if let Some(p) = spans {
                write_json(&p, &index)?;
            }
            Ok(())
        }
        Command::Encode { schema, question, sql, vocab } => {
            let doc = load_schema(&schema)?;
            let (text, spans) = serialize_schema(&doc, MARKER);
            let prefix = jolt_core::pipeline::prefix_text(&question);
            let vocab = match vocab {
                Some(p) => read_json(&p)?,
                None => Vocab::build([prefix.as_str(), text.as_str(), sql.as_str()]),
            };
            let (tokens, seg) = encode(&prefix, &text, &spans, &sql, &vocab)?;
            let words: Vec<&str> = tokens.ids.iter().map(|&i| vocab.token(i).unwrap_or("<unk>")).collect();
            print_json(&json!({ "tokens": words, "sequence": tokens, "segments": seg }))
        }
        Command::MaskViz { schema, question, sql, noisy, format, out } => {
            let doc = load_schema(&schema)?;
            let (text, _) = serialize_schema(&doc, MARKER);
            let prefix = jolt_core::pipeline::prefix_text(&question);
            let vocab = Vocab::build([prefix.as_str(), text.as_str(), sql.as_str()]);
            let ex = build_training_example(0, "", &question, &doc, &sql, &vocab, usize::MAX)?;
            let mut seg = ex.segments.clone();
            let mut chosen = Vec::new();
            for name in &noisy {
                let key = jolt_core::sql::ColumnKey::parse(name).ok_or_else(|| Error::Config(format!("`{name}` is not table.column")))?;
                let i = doc.column_index(&key).ok_or_else(|| Error::Config(format!("unknown column `{name}`")))?;
                if ex.label[i] != 0 {
                    return Err(Error::Config(format!("`{name}` is a ground-truth column")));
                }
                chosen.push(i);
            }
            seg.noisy_schema = noisy_positions(&seg, &ex.gt_columns(), &chosen);
            let mask = build_joint_mask(&seg)?;
            let labels: Vec<String> = ex.tokens.ids.iter().map(|&i| vocab.token(i).unwrap_or("<unk>").to_string()).collect();
            let bytes = match format {
                MaskFormat::Ascii => render_ascii(&mask, Some(&seg), Some(&labels)).into_bytes(),
                MaskFormat::Svg => render_svg(&mask, Some(&seg), Some(&labels), 12).into_bytes(),
                MaskFormat::Ppm => render_ppm(&mask, 4),
            };
            match out {
                Some(p) => fs::write(&p, bytes).at(&p),
                None => write_stdout(&bytes),
            }
        }
        Command::GenCorpus { config, out, seed } => {
            let cfg = load_run_config(config.as_deref(), seed)?;
            cfg.corpus.validate()?;
            let c = generate_corpus(&cfg.corpus, &out)?;
            cfg.write_snapshot(&out)?;
            print_json(&json!({
                "databases": c.schemas.len(),
                "train": corpus_stats(&c.train),
                "dev": corpus_stats(&c.dev),
            }))
        }
        Command::Train { corpus, config, out, epochs, noise, train_fraction, seed } => {
            let mut cfg = load_run_config(config.as_deref(), seed)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(n) = noise {
                cfg.train.noise = match n {
                    NoiseArg::None => NoiseMode::None,
                    NoiseArg::Random => NoiseMode::Random,
                    NoiseArg::ConfusionAware => NoiseMode::ConfusionAware,
                };
            }
            let mut records: Vec<CorpusRecord> = read_jsonl(&corpus)?;
            if let Some(f) = train_fraction {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config("--train-fraction must lie in (0, 1]".into()));
                }
                let keep = ((records.len() as f64) * f).round().max(1.0) as usize;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
                let mut picked: Vec<usize> = (0..records.len()).collect::<Vec<_>>().choose_multiple(&mut rng, keep).copied().collect();
                picked.sort_unstable();
                records = picked.into_iter().map(|i| records[i].clone()).collect();
            }
            train_command(&cfg, &records, &out)
        }
        Command::Infer { ckpt, question, schema, threshold } => {
            let ck = Checkpoint::load(&ckpt)?;
            let snapshot = ckpt.join(crate::config::SNAPSHOT_FILE);
            let mut icfg = if snapshot.exists() { read_json::<RunConfig>(&snapshot)?.infer } else { Default::default() };
            if let Some(t) = threshold {
                icfg.threshold = t;
            }
            let doc = load_schema(&schema)?;
            let prompt = build_prompt(&question, &doc, &ck.vocab)?;
            let start = Instant::now();
            let clock = || start.elapsed().as_nanos() as u64;
            let r = infer(&ck.params, &prompt, &ck.vocab, &icfg, &clock)?;
            let mut log = EventLog::stderr();
            log.event(
                "infer",
                json!({ "link_ms": r.timings.link_ms, "generate_ms": r.timings.generate_ms, "end_to_end_ms": r.timings.end_to_end_ms }),
            )?;
            let scores: serde_json::Map<String, serde_json::Value> =
                prompt.columns.iter().zip(&r.scores).map(|(c, s)| (c.to_string(), json!(s))).collect();
            print_json(&json!({
                "sql": r.sql,
                "predicted": r.predicted.iter().map(ToString::to_string).collect::<Vec<_>>(),
                "fell_back": r.fell_back,
                "scores": scores,
                "timings": r.timings,
            }))
        }
        Command::Eval { ckpt, dev, dbs, config, out, threshold, sweep } => {
            let mut cfg = eval_config(&ckpt, config.as_deref())?;
            if let Some(t) = threshold {
                cfg.infer.threshold = t;
            }
            eval_command(&cfg, &ckpt, &dev, &dbs, out.as_deref(), sweep)
        }
        Command::Sweep { ckpt, dev, dbs, config, out } => {
            let cfg = eval_config(&ckpt, config.as_deref())?;
            eval_command(&cfg, &ckpt, &dev, &dbs, out.as_deref(), true)
        }
    }
}

fn eval_config(ckpt: &Path, config: Option<&Path>) -> Result<RunConfig> {
    if config.is_some() {
        return load_run_config(config, None);
    }
    let snapshot = ckpt.join(crate::config::SNAPSHOT_FILE);
    if snapshot.exists() {
        read_json(&snapshot)
    } else {
        Ok(RunConfig::default())
    }
}

/// Trains on `records` and writes a checkpoint directory with the
/// resolved configuration and the step log.
pub fn train_command(cfg: &RunConfig, records: &[CorpusRecord], out: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(jolt_core::pipeline::PipelineError::EmptyCorpus.into());
    }
    cfg.train.validate()?;
    fs::create_dir_all(out).at(out)?;
    let vocab = vocab_from_records(records);
    let examples = records.iter().map(|r| r.to_example(&vocab, cfg.model.max_len)).collect::<Result<Vec<_>>>()?;
    let params = init_params(cfg.model.clone(), &vocab, cfg.train.seed)?;
    let mut resolved = cfg.clone();
    resolved.model = params.config.clone();
    resolved.validate()?;
    resolved.write_snapshot(out)?;

    let mut log = EventLog::to_file(&out.join("train.log.jsonl"), false)?;
    log.event("train_start", json!({ "examples": examples.len(), "vocab": vocab.len(), "parameters": params.num_parameters() }))?;
    let mut log_err = None;
    let outcome = train(&examples, params, &cfg.train, WeightCache::new(), &mut |r: &StepRecord| {
        let mut v = serde_json::to_value(r).expect("step records serialize");
        if let serde_json::Value::Object(m) = &mut v {
            m.remove("update");
            if let Some(u) = &r.update {
                m.insert("lr".into(), json!(u.lr));
                m.insert("grad_norm".into(), json!(u.grad_norm));
            }
        }
        if let Err(e) = log.event("train_step", v) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    log.event("train_end", json!({ "updates": outcome.updates, "capture_forwards": outcome.capture_forwards }))?;
    log.flush()?;
    Checkpoint { config: outcome.params.config.clone(), vocab, params: outcome.params, cache: outcome.cache }.save(out)
}

pub const METRICS_FILE: &str = "metrics.json";

pub fn eval_command(cfg: &RunConfig, ckpt: &Path, dev: &Path, dbs: &Path, out: Option<&Path>, sweep: bool) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let records: Vec<CorpusRecord> = read_jsonl(dev)?;
    let out = out.unwrap_or(ckpt);
    fs::create_dir_all(out).at(out)?;
    let start = Instant::now();
    let report = evaluate(&ck.params, &ck.vocab, &records, dbs, &cfg.infer, &cfg.eval, sweep)?;
    write_json(&out.join(METRICS_FILE), &report)?;
    if sweep {
        let csv = out.join("sweep.csv");
        fs::write(&csv, sweep_csv(&report.sweep)).at(&csv)?;
        let svg = out.join("sweep.svg");
        fs::write(&svg, sweep_svg(&report.sweep)).at(&svg)?;
    }
    let mut log = EventLog::stderr();
    log.event("eval", json!({ "examples": report.examples, "elapsed_ms": start.elapsed().as_secs_f64() * 1e3 }))?;
    let skipped: BTreeSet<&str> = ["outcomes"].into();
    let mut summary = serde_json::to_value(&report)?;
    if let serde_json::Value::Object(m) = &mut summary {
        m.retain(|k, _| !skipped.contains(k.as_str()));
    }
    print_json(&summary)
}
