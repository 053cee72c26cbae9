//! Execution accuracy, dev-set link metrics and threshold sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use jolt_core::metrics::{link_metrics, Averaging, LinkMetrics};
use jolt_core::model::ModelParams;
use jolt_core::pipeline::{build_prompt, generate_sql, link_schema, prune_prompt, InferConfig, Prompt, PipelineError};
use jolt_core::schema::SqlValue;
use jolt_core::sql::parse_sql;
use jolt_core::tokenizer::Vocab;
use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use crate::corpus::db_path;
use crate::db::{execute, open_readonly, ExecError};
use crate::error::Result;
use crate::formats::CorpusRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExVerdict {
    Match,
    Mismatch,
    PredError,
    GoldError,
}

const REL_TOL: f64 = 1e-6;

fn numeric(v: &SqlValue) -> Option<f64> {
    match v {
        SqlValue::Integer(i) => Some(*i as f64),
        SqlValue::Real(r) => Some(*r),
        _ => None,
    }
}

pub fn values_equal(a: &SqlValue, b: &SqlValue) -> bool {
    match (numeric(a), numeric(b)) {
        (Some(x), Some(y)) => x == y || (x - y).abs() <= REL_TOL * x.abs().max(y.abs()),
        _ => a == b,
    }
}

fn rows_equal(a: &[SqlValue], b: &[SqlValue]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| values_equal(x, y))
}

/// Position-wise row comparison; as sequences when `ordered`, otherwise as
/// multisets (greedy matching, which is exact for a transitive equality and
/// a near-exact one under the tolerance).
pub fn results_match(gold: &[Vec<SqlValue>], pred: &[Vec<SqlValue>], ordered: bool) -> bool {
    if gold.len() != pred.len() {
        return false;
    }
    if ordered {
        return gold.iter().zip(pred).all(|(g, p)| rows_equal(g, p));
    }
    let mut used = vec![false; pred.len()];
    'rows: for g in gold {
        for (j, p) in pred.iter().enumerate() {
            if !used[j] && rows_equal(g, p) {
                used[j] = true;
                continue 'rows;
            }
        }
        return false;
    }
    true
}

/// Whether the gold query's outermost level has an ORDER BY.
pub fn is_ordered(gold_sql: &str) -> bool {
    match parse_sql(gold_sql) {
        Ok(ast) => !ast.root.order_by.is_empty(),
        // fall back to a textual check for SQL outside the parsed subset
        Err(_) => gold_sql.to_ascii_uppercase().contains("ORDER BY"),
    }
}

pub fn execution_accuracy(conn: &Connection, pred_sql: &str, gold_sql: &str, timeout: Duration) -> ExVerdict {
    let gold = match execute(conn, gold_sql, timeout) {
        Ok(rows) => rows,
        Err(_) => return ExVerdict::GoldError,
    };
    let pred = match execute(conn, pred_sql, timeout) {
        Ok(rows) => rows,
        Err(ExecError::Timeout | ExecError::Sqlite(_)) => return ExVerdict::PredError,
    };
    if results_match(&gold, &pred, is_ordered(gold_sql)) {
        ExVerdict::Match
    } else {
        ExVerdict::Mismatch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExReport {
    pub matches: usize,
    pub mismatches: usize,
    pub pred_errors: usize,
    /// Excluded from the denominator.
    pub gold_errors: usize,
    pub ex: f64,
}

impl ExReport {
    pub fn from_verdicts<'a>(verdicts: impl IntoIterator<Item = &'a ExVerdict>) -> Self {
        let mut r = ExReport { matches: 0, mismatches: 0, pred_errors: 0, gold_errors: 0, ex: 0.0 };
        for v in verdicts {
            match v {
                ExVerdict::Match => r.matches += 1,
                ExVerdict::Mismatch => r.mismatches += 1,
                ExVerdict::PredError => r.pred_errors += 1,
                ExVerdict::GoldError => r.gold_errors += 1,
            }
        }
        let total = r.matches + r.mismatches + r.pred_errors;
        r.ex = if total == 0 { 0.0 } else { r.matches as f64 / total as f64 };
        r
    }
}

/// Per-example outcome at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub id: u64,
    pub db_id: String,
    pub predicted: Vec<String>,
    pub fell_back: bool,
    pub sql: String,
    pub gold_sql: String,
    pub verdict: ExVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub ex: f64,
}

/// Everything an evaluation writes to `metrics.json`; free of timings so
/// that reruns compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub threshold: f64,
    pub link: LinkMetrics,
    pub execution: ExReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepRow>,
    pub outcomes: Vec<ExampleOutcome>,
}

pub const SWEEP_THRESHOLDS: [f64; 7] = [0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub averaging: Averaging,
    pub timeout_ms: u64,
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { averaging: Averaging::Micro, timeout_ms: 5000, thresholds: SWEEP_THRESHOLDS.to_vec() }
    }
}

struct Linked {
    prompt: Prompt,
    scores: Vec<f64>,
}

fn link_all(params: &ModelParams<f32>, vocab: &Vocab, records: &[CorpusRecord]) -> Result<Vec<Linked>> {
    records
        .iter()
        .map(|r| {
            let prompt = build_prompt(&r.question, &r.schema, vocab)?;
            // threshold is irrelevant here, only the scores are kept
            let scores = link_schema(params, &prompt, 0.5)?.scores;
            Ok(Linked { prompt, scores })
        })
        .collect()
}

/// Runs link → prune → generate → execute over `records`. With `sweep`,
/// every threshold of `cfg.thresholds` is evaluated as well; generations are
/// shared between thresholds that select the same columns.
pub fn evaluate(
    params: &ModelParams<f32>,
    vocab: &Vocab,
    records: &[CorpusRecord],
    dbs_dir: &Path,
    infer: &InferConfig,
    cfg: &EvalConfig,
    sweep: bool,
) -> Result<EvalReport> {
    let linked = link_all(params, vocab, records)?;
    let pairs: Vec<(Vec<f64>, Vec<u8>)> = linked.iter().zip(records).map(|(l, r)| (l.scores.clone(), r.label.clone())).collect();
    let link = link_metrics(&pairs, infer.threshold, cfg.averaging)?;
    let mut conns: BTreeMap<String, Connection> = BTreeMap::new();
    let mut memo: BTreeMap<(usize, BTreeSet<usize>), (String, bool, ExVerdict)> = BTreeMap::new();
    let timeout = Duration::from_millis(cfg.timeout_ms);

    let mut run = |threshold: f64, conns: &mut BTreeMap<String, Connection>| -> Result<Vec<ExampleOutcome>> {
        let mut out = Vec::with_capacity(records.len());
        for (i, (l, r)) in linked.iter().zip(records).enumerate() {
            let predicted: BTreeSet<usize> = l.scores.iter().enumerate().filter(|(_, &s)| s > threshold).map(|(c, _)| c).collect();
            let key = (i, predicted.clone());
            if !memo.contains_key(&key) {
                let (pruned, fell_back) = match prune_prompt(&l.prompt, &predicted) {
                    Ok(p) => (p, false),
                    Err(PipelineError::EmptyPrediction) => {
                        let all = (0..l.prompt.columns.len()).collect();
                        (prune_prompt(&l.prompt, &all)?, true)
                    }
                    Err(e) => return Err(e.into()),
                };
                let (_, sql) = generate_sql(params, &pruned, vocab, infer.max_new_tokens)?;
                if !conns.contains_key(&r.db_id) {
                    conns.insert(r.db_id.clone(), open_readonly(&db_path(dbs_dir, &r.db_id))?);
                }
                let verdict = execution_accuracy(&conns[&r.db_id], &sql, &r.sql, timeout);
                memo.insert(key.clone(), (sql, fell_back, verdict));
            }
            let (sql, fell_back, verdict) = memo[&key].clone();
            out.push(ExampleOutcome {
                id: r.id,
                db_id: r.db_id.clone(),
                predicted: predicted.iter().map(|&c| l.prompt.columns[c].to_string()).collect(),
                fell_back,
                sql,
                gold_sql: r.sql.clone(),
                verdict,
            });
        }
        Ok(out)
    };

    let outcomes = run(infer.threshold, &mut conns)?;
    let execution = ExReport::from_verdicts(outcomes.iter().map(|o| &o.verdict));
    let mut rows = Vec::new();
    if sweep {
        for &t in &cfg.thresholds {
            let oc = run(t, &mut conns)?;
            let m = link_metrics(&pairs, t, cfg.averaging)?;
            let ex = ExReport::from_verdicts(oc.iter().map(|o| &o.verdict)).ex;
            rows.push(SweepRow { threshold: t, precision: m.precision, recall: m.recall, ex });
        }
    }
    Ok(EvalReport { examples: records.len(), threshold: infer.threshold, link, execution, sweep: rows, outcomes })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("threshold,precision,recall,ex\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.threshold, r.precision, r.recall, r.ex);
    }
    s
}

/// Line plot of P, R and EX against the threshold (log-scaled x axis).
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let mut ts: Vec<f64> = rows.iter().map(|r| r.threshold.max(1e-6).log10()).collect();
    ts.dedup();
    let (lo, hi) = ts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |t: f64| m + (t.max(1e-6).log10() - lo) / span * (w - 2.0 * m);
    let y = |v: f64| h - m - v.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - m, w - m, h - m);
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>", h - m);
    for r in rows {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", x(r.threshold), h - m + 16.0, r.threshold);
    }
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v}</text>", m - 6.0, y(v) + 4.0);
    }
    let series: [(&str, &str, fn(&SweepRow) -> f64); 3] =
        [("precision", "#1f77b4", |r| r.precision), ("recall", "#d62728", |r| r.recall), ("EX", "#2ca02c", |r| r.ex)];
    for (i, (name, color, f)) in series.iter().enumerate() {
        let pts: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", x(r.threshold), y(f(r)))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>", w - m - 60.0, m + 14.0 * i as f64);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">decision threshold</text>", w / 2.0, h - 8.0);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Connection {
        let c = Connection::open_in_memory().unwrap();
        c.execute_batch("CREATE TABLE t (a INTEGER, b TEXT); INSERT INTO t VALUES (1, 'x'), (2, 'y');").unwrap();
        c
    }

    #[test]
    fn verdicts() {
        let c = fixture();
        let t = Duration::from_secs(5);
        assert_eq!(execution_accuracy(&c, "SELECT 1", "SELECT 1", t), ExVerdict::Match);
        assert_eq!(execution_accuracy(&c, "SELECT b, a FROM t", "SELECT a, b FROM t", t), ExVerdict::Mismatch);
        assert_eq!(execution_accuracy(&c, "SELEC a FROM t", "SELECT a FROM t", t), ExVerdict::PredError);
        assert_eq!(execution_accuracy(&c, "SELECT a FROM t", "SELECT zz FROM t", t), ExVerdict::GoldError);
        assert_eq!(execution_accuracy(&c, "select   A from T", "SELECT a FROM t", t), ExVerdict::Match);
        // multiset unless the gold is ordered
        assert_eq!(execution_accuracy(&c, "SELECT a FROM t ORDER BY a DESC", "SELECT a FROM t", t), ExVerdict::Match);
        assert_eq!(execution_accuracy(&c, "SELECT a FROM t ORDER BY a DESC", "SELECT a FROM t ORDER BY a", t), ExVerdict::Mismatch);
        assert_eq!(execution_accuracy(&c, "SELECT 2.0 / 3", "SELECT 0.6666666666", t), ExVerdict::Match);
    }

    #[test]
    fn report_excludes_gold_errors() {
        let r = ExReport::from_verdicts(&[ExVerdict::Match, ExVerdict::GoldError, ExVerdict::PredError, ExVerdict::Mismatch]);
        assert_eq!((r.matches, r.gold_errors), (1, 1));
        assert!((r.ex - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn multiset_counts_duplicates() {
        let one = |i| vec![SqlValue::Integer(i)];
        assert!(!results_match(&[one(1), one(1), one(2)], &[one(1), one(2), one(2)], false));
        assert!(results_match(&[one(1), one(2), one(1)], &[one(2), one(1), one(1)], false));
    }
}
