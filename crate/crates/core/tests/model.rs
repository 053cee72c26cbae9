mod common;

use jolt_core::autodiff::Graph;
use jolt_core::mask::{build_causal_mask, build_joint_mask, AttentionMask};
use jolt_core::model::{ModelConfig, ModelParams, PositionEncoding, StepInput};
use jolt_core::pipeline::{build_prompt, build_training_example, Prompt, TrainingExample};
use jolt_core::tokenizer::{Vocab, EOS, MARKER_ID};
use jolt_core::schema::{serialize_schema, MARKER};

fn config(vocab: &Vocab, layers: usize, position: PositionEncoding) -> ModelConfig {
    ModelConfig { vocab_size: vocab.len(), dim: 16, layers, heads: 2, ffn_mult: 2, max_len: 256, position, ..ModelConfig::default() }
}

fn fixture() -> (Vocab, TrainingExample) {
    let doc = common::singer_concert();
    let (text, _) = serialize_schema(&doc, MARKER);
    let sql = "SELECT T1.name FROM singer AS T1 JOIN concert AS T2 ON T1.id = T2.singer_id WHERE T2.year = 2014";
    let q = "Which singers performed in 2014 ?";
    let vocab = Vocab::build([q, text.as_str(), sql, "Translate the question into SQL for the schema below. Question:"]);
    let ex = build_training_example(0, "db", q, &doc, sql, &vocab, 512).unwrap();
    (vocab, ex)
}

/// Rows a token can reach after `layers` attention hops.
fn reach(mask: &AttentionMask, layers: usize) -> Vec<Vec<bool>> {
    let n = mask.n();
    let mut r: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect();
    for _ in 0..layers {
        r = (0..n).map(|i| (0..n).map(|j| (0..n).any(|k| mask.visible(i, k) && r[k][j])).collect()).collect();
    }
    r
}

#[test]
fn masked_tokens_have_no_influence() {
    let (vocab, ex) = fixture();
    for (layers, position) in [(1, PositionEncoding::Learned), (2, PositionEncoding::Rope)] {
        let p = ModelParams::<f64>::init(config(&vocab, layers, position), 5).unwrap();
        let mask = build_joint_mask(&ex.segments).unwrap();
        let can = reach(&mask, layers);
        let base = p.forward(&ex.tokens, &mask).unwrap().hidden;
        let n = ex.tokens.len();
        let mut changed_rows = 0;
        for j in (0..n).step_by(3) {
            let mut tokens = ex.tokens.clone();
            tokens.ids[j] = (tokens.ids[j] + 1) % vocab.len() as u32;
            let h = p.forward(&tokens, &mask).unwrap().hidden;
            for i in 0..n {
                if !can[i][j] {
                    assert_eq!(h.row(i), base.row(i), "layers {layers}: token {j} leaked into row {i}");
                } else if h.row(i) != base.row(i) {
                    changed_rows += 1;
                }
            }
        }
        assert!(changed_rows > 0);
    }
}

#[test]
fn swapping_schema_tokens_with_their_positions_keeps_marker_scores() {
    let (vocab, ex) = fixture();
    let prompt: Prompt = build_prompt(&ex.question, &common::singer_concert(), &vocab).unwrap();
    let seg = &prompt.segments;
    let mask = build_joint_mask(seg).unwrap();
    let ids = &prompt.tokens.ids;
    let plain: Vec<usize> = seg.schema.range().filter(|&p| ids[p] != MARKER_ID).collect();
    let (a, b) = (plain[2], plain[plain.len() - 3]);
    assert_ne!(ids[a], ids[b]);
    for position in [PositionEncoding::Learned, PositionEncoding::Rope] {
        let p = ModelParams::<f64>::init(config(&vocab, 2, position), 8).unwrap();
        let before = p.link_probs(ids, &prompt.tokens.positions, &mask).unwrap();
        let mut ids2 = ids.clone();
        let mut pos2 = prompt.tokens.positions.clone();
        ids2.swap(a, b);
        pos2.swap(a, b);
        let after = p.link_probs(&ids2, &pos2, &mask).unwrap();
        for &m in &seg.markers {
            assert!((before[m] - after[m]).abs() < 1e-12, "{position:?} marker {m}: {} vs {}", before[m], after[m]);
        }
    }
}

#[test]
fn forward_and_generation_are_deterministic() {
    let (vocab, ex) = fixture();
    let cfg = config(&vocab, 2, PositionEncoding::Learned);
    let p = ModelParams::<f32>::init(cfg.clone(), 1).unwrap();
    assert_eq!(p, ModelParams::<f32>::init(cfg, 1).unwrap());
    let mask = build_joint_mask(&ex.segments).unwrap();
    let a = p.forward(&ex.tokens, &mask).unwrap();
    let b = p.forward(&ex.tokens, &mask).unwrap();
    assert!(a.lm_logits.data.iter().zip(&b.lm_logits.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    let prompt = Prompt::from_example(&ex);
    let g1 = p.greedy_generate(&prompt.tokens, prompt.segments.schema.end as u32, 12, EOS).unwrap();
    let g2 = p.greedy_generate(&prompt.tokens, prompt.segments.schema.end as u32, 12, EOS).unwrap();
    assert_eq!(g1, g2);
    assert!(!g1.is_empty() && g1.len() <= 12);
}

#[test]
fn both_losses_reach_the_trunk() {
    let (vocab, ex) = fixture();
    let p = ModelParams::<f64>::init(config(&vocab, 1, PositionEncoding::Learned), 2).unwrap();
    let mask = build_joint_mask(&ex.segments).unwrap();
    let input = StepInput {
        ids: &ex.tokens.ids,
        positions: &ex.tokens.positions,
        mask: &mask,
        markers: &ex.segments.markers,
        labels: &ex.label,
        query: ex.segments.query,
    };
    let grads_of = |pick_sl: bool| {
        let mut g = Graph::new();
        let (trace, l_sl, l_ntp, _) = p.joint_loss(&mut g, &input, 1.0).unwrap();
        g.backward(if pick_sl { l_sl } else { l_ntp }).unwrap();
        trace.params.iter().map(|&v| g.grad(v).cloned()).collect::<Vec<_>>()
    };
    let sl = grads_of(true);
    let ntp = grads_of(false);
    let row_norm = |t: &Option<jolt_core::autodiff::Tensor<f64>>, r: usize| t.as_ref().map_or(0.0, |t| t.row(r).iter().map(|x| x * x).sum::<f64>());
    let seg = &ex.segments;
    for p_ in seg.schema.range() {
        let id = ex.tokens.ids[p_] as usize;
        assert!(row_norm(&sl[0], id) > 0.0, "no L_SL gradient on embedding row of schema token {p_}");
        assert!(row_norm(&ntp[0], id) > 0.0, "no L_NTP gradient on embedding row of schema token {p_}");
    }
    // with one layer, markers reach L_NTP through no row: non-marker rows never see them
    for p_ in seg.schema.range() {
        let marker = ex.tokens.ids[p_] == MARKER_ID;
        assert!(row_norm(&sl[1], p_) > 0.0);
        assert_eq!(row_norm(&ntp[1], p_) > 0.0, !marker, "position {p_}");
    }
}

#[test]
fn causal_generation_ignores_the_future() {
    let (vocab, ex) = fixture();
    let p = ModelParams::<f64>::init(config(&vocab, 2, PositionEncoding::Learned), 4).unwrap();
    let n = ex.tokens.len();
    let full = p.forward(&ex.tokens, &build_causal_mask(n)).unwrap();
    let mut head = ex.tokens.clone();
    head.ids.truncate(n / 2);
    head.positions.truncate(n / 2);
    head.char_offsets.truncate(n / 2);
    let part = p.forward(&head, &build_causal_mask(n / 2)).unwrap();
    for i in 0..n / 2 {
        assert_eq!(part.hidden.row(i), full.hidden.row(i));
    }
}
