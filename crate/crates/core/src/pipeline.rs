//! Example construction, the joint training loop and the two-stage
//! inference procedure (link → prune → generate).

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, AdamW, AdamWConfig, Tensor};
use crate::mask::{build_joint_mask, MaskError};
use crate::model::{ModelConfig, ModelError, ModelParams, StepInput};
use crate::sampler::{draw_noise_count, example_rng, sample_noisy, NoiseMode, SamplerError, WeightCache};
use crate::schema::{label_vector, serialize_schema, SchemaDocument, SchemaError, SpanIndex, MARKER};
use crate::sql::{links_for, ColumnKey, LinkSet, SqlError};
use crate::tokenizer::{detokenize_sql, encode, SegmentMap, TokenSequence, TokenizerError, Vocab, EOS, MARKER_ID};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sql(#[from] SqlError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("gold SQL references no column")]
    DegenerateExample,
    #[error("example has {len} tokens, more than max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("no column predicted")]
    EmptyPrediction,
    #[error("non-finite loss at epoch {epoch}, example {example_id}: L_SL={l_sl}, L_NTP={l_ntp}")]
    NonFiniteLoss { epoch: usize, example_id: u64, l_sl: f64, l_ntp: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty training corpus")]
    EmptyCorpus,
}

type Result<T> = core::result::Result<T, PipelineError>;

/// Instruction preceding every question.
pub fn prefix_text(question: &str) -> String {
    format!("Translate the question into SQL for the schema below.\nQuestion: {question}\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: u64,
    pub db_id: String,
    pub question: String,
    pub prefix_text: String,
    pub schema_text: String,
    /// Byte spans over `schema_text`.
    pub spans: SpanIndex,
    pub gold_sql: String,
    pub link: LinkSet,
    /// One label per column in serialization order.
    pub label: Vec<u8>,
    pub tokens: TokenSequence,
    /// `gt_schema` populated, `noisy_schema` empty.
    pub segments: SegmentMap,
}

impl TrainingExample {
    pub fn gt_columns(&self) -> BTreeSet<usize> {
        self.label.iter().enumerate().filter(|(_, &l)| l != 0).map(|(i, _)| i).collect()
    }

    /// Non-GT column indices: the noise pool.
    pub fn pool(&self) -> Vec<usize> {
        self.label.iter().enumerate().filter(|(_, &l)| l == 0).map(|(i, _)| i).collect()
    }
}

/// Builds a labelled, tokenized example. `schema` must already carry its
/// example values.
pub fn build_training_example(
    id: u64,
    db_id: &str,
    question: &str,
    schema: &SchemaDocument,
    gold_sql: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TrainingExample> {
    schema.validate()?;
    let link = links_for(gold_sql, schema)?;
    if link.is_empty() {
        return Err(PipelineError::DegenerateExample);
    }
    let label = label_vector(&link, schema)?;
    let (schema_text, spans) = serialize_schema(schema, MARKER);
    let prefix = prefix_text(question);
    let (tokens, mut segments) = encode(&prefix, &schema_text, &spans, gold_sql, vocab)?;
    if tokens.len() > max_len {
        return Err(PipelineError::SequenceTooLong { len: tokens.len(), max: max_len });
    }
    let gt: BTreeSet<usize> = label.iter().enumerate().filter(|(_, &l)| l != 0).map(|(i, _)| i).collect();
    segments.gt_schema = segments.columns_with_envelopes(&gt);
    Ok(TrainingExample {
        id,
        db_id: String::from(db_id),
        question: String::from(question),
        prefix_text: prefix,
        schema_text,
        spans,
        gold_sql: String::from(gold_sql),
        link,
        label,
        tokens,
        segments,
    })
}

/// Noisy positions for the chosen columns: their definitions, plus the
/// envelope of every table that holds no GT column.
pub fn noisy_positions(seg: &SegmentMap, gt: &BTreeSet<usize>, chosen: &[usize]) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for &c in chosen {
        if let Some(span) = seg.column_span(c) {
            out.extend(span.range());
        }
        let Some(t) = seg.table_of_column(c) else { continue };
        let table_has_gt = gt.iter().any(|&g| seg.table_of_column(g) == Some(t));
        if !table_has_gt {
            for s in seg.elements.tables[t].envelope() {
                out.extend(s.range());
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to `min_lr_ratio · lr`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_accum: usize,
    pub max_grad_norm: f64,
    pub beta: f64,
    pub link_threshold: f64,
    pub seed: u64,
    pub noise: NoiseMode,
    /// Multiplier on `L_NTP`; 1.0 gives the plain sum.
    pub ntp_weight: f64,
    pub schedule: LrSchedule,
    pub warmup_updates: usize,
    pub min_lr_ratio: f64,
    /// Shuffle the example order every epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            lr: 3e-4,
            weight_decay: 1e-4,
            grad_accum: 6,
            max_grad_norm: 1.0,
            beta: 0.2,
            link_threshold: 0.05,
            seed: 0,
            noise: NoiseMode::ConfusionAware,
            ntp_weight: 1.0,
            schedule: LrSchedule::Cosine,
            warmup_updates: 10,
            min_lr_ratio: 0.1,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(String::from(m)));
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.link_threshold > 0.0 && self.link_threshold < 1.0) {
            return bad("link_threshold must lie in (0, 1)");
        }
        if self.epochs == 0 || self.grad_accum == 0 {
            return bad("epochs and grad_accum must be positive");
        }
        if !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) || self.weight_decay < 0.0 {
            return bad("lr and max_grad_norm must be positive, weight_decay non-negative");
        }
        Ok(())
    }

    pub fn lr_at(&self, update: usize, total_updates: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                if update < self.warmup_updates {
                    return self.lr * (update + 1) as f64 / self.warmup_updates as f64;
                }
                let span = total_updates.saturating_sub(self.warmup_updates).max(1);
                let t = ((update - self.warmup_updates) as f64 / span as f64).min(1.0);
                let cos = (1.0 + Float::cos(core::f64::consts::PI * t)) / 2.0;
                self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
            }
        }
    }
}

/// One training step, as handed to the logging callback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub example_id: u64,
    pub l_sl: f64,
    pub l_ntp: f64,
    pub loss: f64,
    pub k: usize,
    pub noisy: Vec<usize>,
    /// Set on steps that closed an accumulation window.
    pub update: Option<UpdateRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub index: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub cache: WeightCache,
    /// Weight-capture forwards performed in each epoch.
    pub capture_forwards: Vec<usize>,
    pub updates: usize,
}

/// The training loop. `cache` may hold weights from an interrupted run;
/// those examples skip their capture forward.
pub fn train(
    examples: &[TrainingExample],
    init: ModelParams<f32>,
    cfg: &TrainConfig,
    cache: WeightCache,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let mut params = init;
    let mut cache = cache;
    let adam_cfg = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut opt = AdamW::new(adam_cfg, &params.tensors);
    let per_epoch = examples.len().div_ceil(cfg.grad_accum);
    let total_updates = per_epoch * cfg.epochs;
    let mut capture_forwards = alloc::vec![0usize; cfg.epochs];
    let mut updates = 0usize;
    let mut step = 0usize;
    let mut acc: Option<Vec<Tensor<f32>>> = None;
    let mut acc_count = 0usize;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000_0000_0000 ^ epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut rng);
        }
        for (pos_in_epoch, &ei) in order.iter().enumerate() {
            let ex = &examples[ei];
            let gt = ex.gt_columns();
            let pool = ex.pool();
            let mut seg = ex.segments.clone();
            seg.noisy_schema.clear();

            if epoch == 0 && cfg.noise == NoiseMode::ConfusionAware && !cache.contains(ex.id) {
                let mask = build_joint_mask(&seg)?;
                let probs = params.link_probs(&ex.tokens.ids, &ex.tokens.positions, &mask)?;
                let weights = pool.iter().map(|&c| probs[seg.markers[c]] as f64).collect();
                cache.record(ex.id, weights)?;
                capture_forwards[epoch] += 1;
            }

            let mut rng = example_rng(cfg.seed, ex.id, epoch as u64);
            let (k, chosen) = match cfg.noise {
                NoiseMode::None => (0, Vec::new()),
                NoiseMode::Random => {
                    let k = draw_noise_count(ex.label.len(), cfg.beta, &mut rng);
                    let w = alloc::vec![1.0; pool.len()];
                    (k, sample_noisy(&pool, &w, k, &mut rng).chosen)
                }
                NoiseMode::ConfusionAware => {
                    let k = draw_noise_count(ex.label.len(), cfg.beta, &mut rng);
                    let w = cache.lookup(ex.id)?;
                    (k, sample_noisy(&pool, w, k, &mut rng).chosen)
                }
            };
            seg.noisy_schema = noisy_positions(&seg, &gt, &chosen);
            let mask = build_joint_mask(&seg)?;
            let input = StepInput {
                ids: &ex.tokens.ids,
                positions: &ex.tokens.positions,
                mask: &mask,
                markers: &seg.markers,
                labels: &ex.label,
                query: seg.query,
            };
            let (terms, grads) = params.joint_step(&input, cfg.ntp_weight)?;
            if !terms.total.is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    epoch,
                    example_id: ex.id,
                    l_sl: terms.l_sl as f64,
                    l_ntp: terms.l_ntp as f64,
                });
            }
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => {
                    for (x, g) in a.iter_mut().zip(&grads) {
                        crate::autodiff::kernels::axpy(1.0, &g.data, &mut x.data);
                    }
                }
            }
            acc_count += 1;

            let window_done = acc_count == cfg.grad_accum || pos_in_epoch + 1 == order.len();
            let mut update = None;
            if window_done {
                let mut g = acc.take().expect("accumulated gradients");
                let inv = 1.0 / acc_count as f32;
                for t in g.iter_mut() {
                    t.data.iter_mut().for_each(|x| *x *= inv);
                }
                let norm = clip_grad_norm(&mut g, cfg.max_grad_norm);
                let lr = cfg.lr_at(updates, total_updates);
                opt.step(&mut params.tensors, &g, lr);
                update = Some(UpdateRecord { index: updates, lr, grad_norm: norm as f64 });
                updates += 1;
                acc_count = 0;
            }
            log(&StepRecord {
                epoch,
                step,
                example_id: ex.id,
                l_sl: terms.l_sl as f64,
                l_ntp: terms.l_ntp as f64,
                loss: terms.total as f64,
                k,
                noisy: chosen,
                update,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { params, cache, capture_forwards, updates })
}

/// An encoded inference prompt: prefix and full schema, no query.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: TokenSequence,
    pub segments: SegmentMap,
    /// `table.column` per column in serialization order.
    pub columns: Vec<ColumnKey>,
}

pub fn build_prompt(question: &str, schema: &SchemaDocument, vocab: &Vocab) -> Result<Prompt> {
    schema.validate()?;
    let (text, spans) = serialize_schema(schema, MARKER);
    let (tokens, segments) = encode(&prefix_text(question), &text, &spans, "", vocab)?;
    Ok(Prompt { tokens, segments, columns: schema.column_keys() })
}

impl Prompt {
    /// The prompt part of a training example.
    pub fn from_example(ex: &TrainingExample) -> Prompt {
        let end = ex.segments.schema.end;
        let tokens = TokenSequence {
            ids: ex.tokens.ids[..end].to_vec(),
            char_offsets: ex.tokens.char_offsets[..end].to_vec(),
            positions: ex.tokens.positions[..end].to_vec(),
        };
        let mut segments = ex.segments.clone();
        segments.len = end;
        segments.query = crate::schema::Span::new(end, end);
        segments.gt_schema.clear();
        segments.noisy_schema.clear();
        let columns = ex
            .spans
            .tables
            .iter()
            .flat_map(|t| t.columns.iter().map(move |c| ColumnKey::new(&t.name, &c.name)))
            .collect();
        Prompt { tokens, segments, columns }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkPrediction {
    /// `ŷ` per column, serialization order.
    pub scores: Vec<f64>,
    pub predicted: BTreeSet<usize>,
}

impl LinkPrediction {
    /// Columns with `ŷ > threshold`.
    pub fn at(&self, threshold: f64) -> BTreeSet<usize> {
        self.scores.iter().enumerate().filter(|(_, &s)| s > threshold).map(|(i, _)| i).collect()
    }
}

/// One forward under the joint mask (no query, no noise); a column is
/// predicted iff its marker's `ŷ` exceeds `threshold`.
pub fn link_schema(params: &ModelParams<f32>, prompt: &Prompt, threshold: f64) -> Result<LinkPrediction> {
    let mut seg = prompt.segments.clone();
    seg.gt_schema.clear();
    seg.noisy_schema.clear();
    let mask = build_joint_mask(&seg)?;
    let probs = params.link_probs(&prompt.tokens.ids, &prompt.tokens.positions, &mask)?;
    let scores: Vec<f64> = seg.markers.iter().map(|&m| probs[m] as f64).collect();
    let pred = LinkPrediction { predicted: BTreeSet::new(), scores };
    let predicted = pred.at(threshold);
    Ok(LinkPrediction { predicted, ..pred })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedPrompt {
    pub tokens: TokenSequence,
    /// Position id of the first generated token (where the query began in
    /// the full layout).
    pub query_position: u32,
}

/// Keeps the prefix and, for every table with a predicted column, its
/// header, predicted column lines (without markers), key lines and footer.
/// Tokens keep their original position ids.
pub fn prune_prompt(prompt: &Prompt, predicted: &BTreeSet<usize>) -> Result<PrunedPrompt> {
    if predicted.is_empty() {
        return Err(PipelineError::EmptyPrediction);
    }
    let seg = &prompt.segments;
    let mut keep: BTreeSet<usize> = seg.prefix.range().collect();
    keep.extend(seg.columns_with_envelopes(predicted));
    let mut tokens = TokenSequence::default();
    for p in keep {
        if prompt.tokens.ids[p] == MARKER_ID {
            continue;
        }
        tokens.push(prompt.tokens.ids[p], prompt.tokens.char_offsets[p], prompt.tokens.positions[p]);
    }
    Ok(PrunedPrompt { tokens, query_position: seg.schema.end as u32 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub threshold: f64,
    pub max_new_tokens: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { threshold: 0.05, max_new_tokens: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub link_ms: f64,
    pub generate_ms: f64,
    pub end_to_end_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub scores: Vec<f64>,
    pub predicted: Vec<ColumnKey>,
    /// True when nothing passed the threshold and the full schema was used.
    pub fell_back: bool,
    pub pruned: PrunedPrompt,
    pub generated: Vec<u32>,
    pub sql: String,
    pub timings: StageTimings,
}

/// Renders generated ids as SQL, stopping at EOS.
pub fn ids_to_sql(ids: &[u32], vocab: &Vocab) -> String {
    let words = ids.iter().take_while(|&&i| i != EOS).map(|&i| vocab.token(i).unwrap_or("<unk>"));
    detokenize_sql(words)
}

/// Generation from an already-linked prompt.
pub fn generate_sql(params: &ModelParams<f32>, pruned: &PrunedPrompt, vocab: &Vocab, max_new: usize) -> Result<(Vec<u32>, String)> {
    let ids = params.greedy_generate(&pruned.tokens, pruned.query_position, max_new, EOS)?;
    let sql = ids_to_sql(&ids, vocab);
    Ok((ids, sql))
}

/// Link → prune → generate. `clock` returns nanoseconds.
pub fn infer(
    params: &ModelParams<f32>,
    prompt: &Prompt,
    vocab: &Vocab,
    cfg: &InferConfig,
    clock: &dyn Fn() -> u64,
) -> Result<InferenceResult> {
    let t0 = clock();
    let link = link_schema(params, prompt, cfg.threshold)?;
    let t1 = clock();
    let (pruned, fell_back) = match prune_prompt(prompt, &link.predicted) {
        Ok(p) => (p, false),
        Err(PipelineError::EmptyPrediction) => {
            let all: BTreeSet<usize> = (0..prompt.columns.len()).collect();
            (prune_prompt(prompt, &all)?, true)
        }
        Err(e) => return Err(e),
    };
    let t2 = clock();
    let (generated, sql) = generate_sql(params, &pruned, vocab, cfg.max_new_tokens)?;
    let t3 = clock();
    Ok(InferenceResult {
        predicted: link.predicted.iter().map(|&i| prompt.columns[i].clone()).collect(),
        scores: link.scores,
        fell_back,
        pruned,
        generated,
        sql,
        timings: StageTimings { link_ms: ms(t0, t1), generate_ms: ms(t2, t3), end_to_end_ms: ms(t0, t3) },
    })
}

fn ms(a: u64, b: u64) -> f64 {
    b.saturating_sub(a) as f64 / 1e6
}

/// Convenience: fresh parameters sized for `vocab`.
pub fn init_params(mut config: ModelConfig, vocab: &Vocab, seed: u64) -> Result<ModelParams<f32>> {
    config.vocab_size = vocab.len();
    Ok(ModelParams::init(config, seed)?)
}
