//! Toy decoder-only transformer with a marker linking head.
//!
//! Pre-norm blocks, learned absolute (or rotary) positions, an LM head tied
//! to the token embedding and a linking head `ŷ_i = σ(W·h_i + b)` read at
//! marker positions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{c, sigmoid, AutodiffError, Graph, Scalar, Tensor, Var};
use crate::mask::{build_causal_mask, AttentionMask};
use crate::schema::Span;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens (or position id) exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("mask is {mask}x{mask} but the sequence has {len} tokens")]
    MaskSize { mask: usize, len: usize },
    #[error("linking loss needs at least one marker")]
    NoMarkers,
    #[error("next-token loss needs a non-empty query after position 0")]
    EmptyQuery,
    #[error("parameter list does not match the config")]
    ParamLayout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Learned,
    Rope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub position: PositionEncoding,
    pub rope_base: f64,
    pub init_std: f64,
    /// Learned positions start from a sinusoid table of this amplitude;
    /// 0 draws them from `N(0, init_std)` like the other weights.
    pub position_init_scale: f64,
    pub link_bias_init: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2000,
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_len: 512,
            position: PositionEncoding::Learned,
            rope_base: 10_000.0,
            init_std: 0.02,
            position_init_scale: 0.1,
            link_bias_init: -2.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(String::from(m)));
        if self.vocab_size < 5 || self.dim == 0 || self.layers == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("sizes must be positive (vocab_size ≥ 5)");
        }
        if self.dim % self.heads != 0 {
            return bad("dim must be divisible by heads");
        }
        if self.position == PositionEncoding::Rope && (self.dim / self.heads) % 2 != 0 {
            return bad("rotary positions need an even head dimension");
        }
        if !(self.position_init_scale >= 0.0) {
            return bad("position_init_scale must be non-negative");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
    Sinusoidal(f64),
}

/// `scale · [sin(p·ω_k), cos(p·ω_k)]` with `ω_k = 10000^(-2k/d)`.
fn sinusoid_table<T: Scalar>(rows: usize, d: usize, scale: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * d);
    for p in 0..rows {
        for j in 0..d {
            let k = (j / 2) as f64;
            let w = Float::powf(10000.0f64, -2.0 * k / d as f64);
            let a = p as f64 * w;
            out.push(c::<T>(scale * if j % 2 == 0 { Float::sin(a) } else { Float::cos(a) }));
        }
    }
    out
}

const PER_LAYER: usize = 12;
// per-layer offsets
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W1: usize = 8;
const B1: usize = 9;
const W2: usize = 10;
const B2: usize = 11;

/// Names, shapes and initializers of all parameters, in storage order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = cfg.dim;
    let f = d * cfg.ffn_mult;
    let std = cfg.init_std;
    let proj = std / libm_sqrt(2.0 * cfg.layers as f64);
    let mut out = vec![(String::from("tok_emb"), (cfg.vocab_size, d), Init::Normal(std))];
    if cfg.position == PositionEncoding::Learned {
        let init = if cfg.position_init_scale > 0.0 { Init::Sinusoidal(cfg.position_init_scale) } else { Init::Normal(std) };
        out.push((String::from("pos_emb"), (cfg.max_len, d), init));
    }
    for l in 0..cfg.layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        out.extend([
            (p("ln1.gain"), (1, d), Init::Ones),
            (p("ln1.bias"), (1, d), Init::Zeros),
            (p("attn.wq"), (d, d), Init::Normal(std)),
            (p("attn.wk"), (d, d), Init::Normal(std)),
            (p("attn.wv"), (d, d), Init::Normal(std)),
            (p("attn.wo"), (d, d), Init::Normal(proj)),
            (p("ln2.gain"), (1, d), Init::Ones),
            (p("ln2.bias"), (1, d), Init::Zeros),
            (p("ffn.w1"), (d, f), Init::Normal(std)),
            (p("ffn.b1"), (1, f), Init::Zeros),
            (p("ffn.w2"), (f, d), Init::Normal(proj)),
            (p("ffn.b2"), (1, d), Init::Zeros),
        ]);
    }
    out.extend([
        (String::from("ln_f.gain"), (1, d), Init::Ones),
        (String::from("ln_f.bias"), (1, d), Init::Zeros),
        (String::from("link.w"), (1, d), Init::Normal(std)),
        (String::from("link.b"), (1, 1), Init::Const(cfg.link_bias_init)),
    ]);
    out
}

fn libm_sqrt(x: f64) -> f64 {
    Float::sqrt(x)
}

/// All trainable tensors of a model, in the order of [`ModelParams::names`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<T>>,
}

/// Result of a no-gradient forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// Final (normalized) hidden states, `n × d`.
    pub hidden: Tensor<T>,
    /// `n × V`.
    pub lm_logits: Tensor<T>,
    /// `σ(W·h_i + b)` for every position.
    pub marker_probs: Vec<T>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub params: Vec<Var>,
    pub hidden: Var,
    /// `n × 1` pre-sigmoid linking scores.
    pub link_logits: Var,
}

/// Inputs of one joint training step.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub ids: &'a [u32],
    pub positions: &'a [u32],
    pub mask: &'a AttentionMask,
    /// Marker positions in column order.
    pub markers: &'a [usize],
    /// One label per marker.
    pub labels: &'a [u8],
    pub query: Span,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms<T> {
    pub l_sl: T,
    pub l_ntp: T,
    pub total: T,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_specs(&config)
            .into_iter()
            .map(|(_, (r, cc), init)| {
                let data = match init {
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("finite std");
                        (0..r * cc).map(|_| c::<T>(dist.sample(&mut rng))).collect()
                    }
                    Init::Zeros => vec![T::zero(); r * cc],
                    Init::Ones => vec![T::one(); r * cc],
                    Init::Const(v) => vec![c::<T>(v); r * cc],
                    Init::Sinusoidal(scale) => sinusoid_table(r, cc, scale),
                };
                Tensor { rows: r, cols: cc, data }
            })
            .collect();
        Ok(ModelParams { config, tensors })
    }

    /// Wraps loaded tensors after checking them against the config.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != tensors.len() || specs.iter().zip(&tensors).any(|(s, t)| s.1 != t.shape()) {
            return Err(ModelError::ParamLayout);
        }
        Ok(ModelParams { config, tensors })
    }

    pub fn names(&self) -> Vec<String> {
        param_specs(&self.config).into_iter().map(|s| s.0).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|t| t.map(|x| c::<U>(x.to_f64().unwrap()))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn layer(&self, l: usize, k: usize) -> usize {
        let base = if self.config.position == PositionEncoding::Learned { 2 } else { 1 };
        base + l * PER_LAYER + k
    }

    fn tail(&self, k: usize) -> usize {
        self.tensors.len() - 4 + k
    }

    /// Records the transformer stack on `g`.
    pub fn run(&self, g: &mut Graph<T>, ids: &[u32], positions: &[u32], mask: &AttentionMask) -> Result<Trace, ModelError> {
        let cfg = &self.config;
        let n = ids.len();
        if n != positions.len() {
            return Err(AutodiffError::ShapeMismatch { op: "positions", lhs: (n, 1), rhs: (positions.len(), 1) }.into());
        }
        if mask.n() != n {
            return Err(ModelError::MaskSize { mask: mask.n(), len: n });
        }
        if n > cfg.max_len || positions.iter().any(|&p| p as usize >= cfg.max_len) {
            return Err(ModelError::TooLong { len: n, max: cfg.max_len });
        }
        let params: Vec<Var> = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let mut x = g.gather_rows(params[0], &idx)?;
        if cfg.position == PositionEncoding::Learned {
            let pos: Vec<usize> = positions.iter().map(|&p| p as usize).collect();
            let pe = g.gather_rows(params[1], &pos)?;
            x = g.add(x, pe)?;
        }
        let dh = cfg.head_dim();
        let scale = c::<T>(1.0 / libm_sqrt(dh as f64));
        for l in 0..cfg.layers {
            let p = |k: usize| params[self.layer(l, k)];
            let h = g.layer_norm(x, p(LN1_G), p(LN1_B), cfg.ln_eps)?;
            let mut q = g.matmul(h, p(WQ))?;
            let mut k = g.matmul(h, p(WK))?;
            let v = g.matmul(h, p(WV))?;
            if cfg.position == PositionEncoding::Rope {
                q = g.rope(q, positions, dh, cfg.rope_base)?;
                k = g.rope(k, positions, dh, cfg.rope_base)?;
            }
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let (a, b) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_cols(q, a, b)?;
                let kh = g.slice_cols(k, a, b)?;
                let vh = g.slice_cols(v, a, b)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, scale);
                let pr = g.masked_softmax(s, mask)?;
                heads.push(g.matmul(pr, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let o = g.matmul(cat, p(WO))?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, p(LN2_G), p(LN2_B), cfg.ln_eps)?;
            let f = g.matmul(h, p(W1))?;
            let f = g.add_row(f, p(B1))?;
            let f = g.gelu(f);
            let f = g.matmul(f, p(W2))?;
            let f = g.add_row(f, p(B2))?;
            x = g.add(x, f)?;
        }
        let hidden = g.layer_norm(x, params[self.tail(0)], params[self.tail(1)], cfg.ln_eps)?;
        let z = g.matmul_nt(hidden, params[self.tail(2)])?;
        let link_logits = g.add_row(z, params[self.tail(3)])?;
        Ok(Trace { params, hidden, link_logits })
    }

    /// Tied LM-head logits for the given rows of the hidden states.
    pub fn lm_logits_rows(&self, g: &mut Graph<T>, trace: &Trace, rows: &[usize]) -> Result<Var, ModelError> {
        let h = g.gather_rows(trace.hidden, rows)?;
        Ok(g.matmul_nt(h, trace.params[0])?)
    }

    /// No-gradient forward with full `n × V` logits.
    pub fn forward(&self, tokens: &TokenSequence, mask: &AttentionMask) -> Result<ForwardOutput<T>, ModelError> {
        let mut g = Graph::no_grad();
        let trace = self.run(&mut g, &tokens.ids, &tokens.positions, mask)?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let logits = self.lm_logits_rows(&mut g, &trace, &rows)?;
        Ok(ForwardOutput {
            hidden: g.value(trace.hidden).clone(),
            lm_logits: g.value(logits).clone(),
            marker_probs: g.value(trace.link_logits).data.iter().map(|&z| sigmoid(z)).collect(),
        })
    }

    /// `ŷ` at every position, skipping the LM head.
    pub fn link_probs(&self, ids: &[u32], positions: &[u32], mask: &AttentionMask) -> Result<Vec<T>, ModelError> {
        let mut g = Graph::no_grad();
        let trace = self.run(&mut g, ids, positions, mask)?;
        Ok(g.value(trace.link_logits).data.iter().map(|&z| sigmoid(z)).collect())
    }

    /// Records `L = L_SL + ntp_weight · L_NTP` for one example.
    pub fn joint_loss(&self, g: &mut Graph<T>, input: &StepInput<'_>, ntp_weight: f64) -> Result<(Trace, Var, Var, Var), ModelError> {
        let trace = self.run(g, input.ids, input.positions, input.mask)?;
        let n = input.ids.len();
        let (y, m) = marker_targets::<T>(n, input.markers, input.labels)?;
        let l_sl = g.sigmoid_bce(trace.link_logits, &y, &m)?;
        let (rows, targets) = ntp_rows(input.ids, input.query)?;
        let logits = self.lm_logits_rows(g, &trace, &rows)?;
        let l_ntp = g.cross_entropy(logits, &targets)?;
        let weighted = if ntp_weight == 1.0 { l_ntp } else { g.scale(l_ntp, c(ntp_weight)) };
        let total = g.add(l_sl, weighted)?;
        Ok((trace, l_sl, l_ntp, total))
    }

    /// Loss values and parameter gradients of one example.
    pub fn joint_step(&self, input: &StepInput<'_>, ntp_weight: f64) -> Result<(LossTerms<T>, Vec<Tensor<T>>), ModelError> {
        let mut g = Graph::new();
        let (trace, l_sl, l_ntp, total) = self.joint_loss(&mut g, input, ntp_weight)?;
        let terms = LossTerms { l_sl: g.value(l_sl).item(), l_ntp: g.value(l_ntp).item(), total: g.value(total).item() };
        g.backward(total)?;
        let grads = trace
            .params
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
            .collect();
        Ok((terms, grads))
    }

    /// Greedy decoding under a causal mask. Generated token `t` gets
    /// position id `first_position + t`; ties go to the lowest id.
    pub fn greedy_generate(
        &self,
        prompt: &TokenSequence,
        first_position: u32,
        max_new: usize,
        stop_id: u32,
    ) -> Result<Vec<u32>, ModelError> {
        let mut ids = prompt.ids.clone();
        let mut positions = prompt.positions.clone();
        let mut out = Vec::new();
        if ids.is_empty() {
            return Ok(out);
        }
        for step in 0..max_new {
            let mask = build_causal_mask(ids.len());
            let mut g = Graph::no_grad();
            let trace = self.run(&mut g, &ids, &positions, &mask)?;
            let logits = self.lm_logits_rows(&mut g, &trace, &[ids.len() - 1])?;
            let row = &g.value(logits).data;
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            let next = best as u32;
            out.push(next);
            if next == stop_id {
                break;
            }
            ids.push(next);
            positions.push(first_position + step as u32);
        }
        Ok(out)
    }
}

/// Per-position BCE targets and the marker mask `M`.
pub fn marker_targets<T: Scalar>(n: usize, markers: &[usize], labels: &[u8]) -> Result<(Vec<T>, Vec<bool>), ModelError> {
    if markers.is_empty() {
        return Err(ModelError::NoMarkers);
    }
    if markers.len() != labels.len() || markers.iter().any(|&m| m >= n) {
        return Err(AutodiffError::ShapeMismatch { op: "labels", lhs: (markers.len(), 1), rhs: (labels.len(), n) }.into());
    }
    let mut y = vec![T::zero(); n];
    let mut m = vec![false; n];
    for (&p, &l) in markers.iter().zip(labels) {
        y[p] = if l != 0 { T::one() } else { T::zero() };
        m[p] = true;
    }
    Ok((y, m))
}

/// Rows whose logits predict the query tokens, and those tokens.
pub fn ntp_rows(ids: &[u32], query: Span) -> Result<(Vec<usize>, Vec<usize>), ModelError> {
    if query.is_empty() || query.start == 0 || query.end > ids.len() {
        return Err(ModelError::EmptyQuery);
    }
    Ok((query.range().map(|i| i - 1).collect(), query.range().map(|i| ids[i] as usize).collect()))
}

/// `L_SL`: mean clamped BCE of `ŷ` over marker positions.
pub fn schema_linking_loss<T: Scalar>(yhat: &[T], markers: &[usize], labels: &[u8]) -> Result<T, ModelError> {
    let (y, m) = marker_targets(yhat.len(), markers, labels)?;
    Ok(crate::autodiff::bce_value(yhat, &y, &m)?)
}

/// `L_NTP`: mean cross-entropy of the query tokens, each predicted from the
/// logits one position earlier.
pub fn ntp_loss<T: Scalar>(lm_logits: &Tensor<T>, ids: &[u32], query: Span) -> Result<T, ModelError> {
    let (rows, targets) = ntp_rows(ids, query)?;
    let mut g = Graph::no_grad();
    let l = g.constant(lm_logits.clone());
    let sel = g.gather_rows(l, &rows)?;
    let ce = g.cross_entropy(sel, &targets)?;
    Ok(g.value(ce).item())
}

/// The unweighted sum of both losses.
pub fn joint_loss_value<T: Scalar>(l_sl: T, l_ntp: T) -> T {
    l_sl + l_ntp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 12, dim: 8, layers: 1, heads: 2, max_len: 16, ..Default::default() }
    }

    #[test]
    fn single_token_shapes() {
        let p = ModelParams::<f32>::init(tiny(), 1).unwrap();
        let seq = TokenSequence { ids: vec![5], char_offsets: vec![None], positions: vec![0] };
        let out = p.forward(&seq, &build_causal_mask(1)).unwrap();
        assert_eq!(out.hidden.shape(), (1, 8));
        assert_eq!(out.lm_logits.shape(), (1, 12));
        assert_eq!(out.marker_probs.len(), 1);
        assert!(out.marker_probs[0] > 0.0 && out.marker_probs[0] < 1.0);
    }

    #[test]
    fn initial_link_probability() {
        let p = ModelParams::<f64>::init(tiny(), 3).unwrap();
        let y = p.link_probs(&[1, 2, 3], &[0, 1, 2], &build_causal_mask(3)).unwrap();
        for v in y {
            assert!((v - sigmoid(-2.0)).abs() < 0.05);
        }
    }

    #[test]
    fn config_checks() {
        assert!(ModelConfig { heads: 3, ..tiny() }.validate().is_err());
        let p = ModelParams::<f32>::init(tiny(), 1).unwrap();
        assert!(ModelParams::from_tensors(tiny(), p.tensors[1..].to_vec()).is_err());
        assert_eq!(p.names().len(), p.tensors.len());
        let long: Vec<u32> = (0..17).map(|i| i % 12).collect();
        let pos: Vec<u32> = (0..17).collect();
        assert!(matches!(p.link_probs(&long, &pos, &build_causal_mask(17)), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn loss_helpers() {
        let y = [0.5f64, 0.3, 0.5];
        assert!((schema_linking_loss(&y, &[0, 2], &[1, 0]).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(schema_linking_loss(&y, &[], &[]), Err(ModelError::NoMarkers));
        let logits = Tensor::<f64>::zeros(3, 2000);
        let l = ntp_loss(&logits, &[1, 7, 9], Span::new(1, 3)).unwrap();
        assert!((l - 2000f64.ln()).abs() < 1e-9);
        assert!((l - 7.6009).abs() < 1e-4);
        assert_eq!(ntp_loss(&logits, &[1, 7, 9], Span::new(3, 3)), Err(ModelError::EmptyQuery));
        assert!((joint_loss_value(0.7, 7.6) - 8.3f64).abs() < 1e-12);
    }

    #[test]
    fn generation_edges() {
        let p = ModelParams::<f32>::init(tiny(), 1).unwrap();
        let seq = TokenSequence { ids: vec![1, 5], char_offsets: vec![None, None], positions: vec![0, 1] };
        assert!(p.greedy_generate(&seq, 2, 0, 2).unwrap().is_empty());
        let a = p.greedy_generate(&seq, 2, 5, 2).unwrap();
        assert_eq!(a, p.greedy_generate(&seq, 2, 5, 2).unwrap());
        assert!(a.len() <= 5);
    }
}
