//! Word-level tokenizer with a reserved, never-merged marker token.
//!
//! Text is split on whitespace; runs of alphanumerics and `_` form words and
//! every other character is its own token. The marker literal is always one
//! token. [`encode`] lays a training or inference input out as
//! `BOS prefix schema query EOS` and records which positions belong to which
//! part in a [`SegmentMap`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::schema::{Span, SpanIndex, MARKER};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MARKER_ID: u32 = 3;
pub const UNK: u32 = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", MARKER, "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenizerError {
    #[error("span {0:?} splits a token")]
    SpanMisaligned(Span),
    #[error("span {0:?} lies outside the schema text")]
    SpanOutOfRange(Span),
    #[error("marker span {0:?} does not cover exactly one marker token")]
    MarkerMisaligned(Span),
    #[error("schema text has {found} marker tokens but the span index lists {expected}")]
    MarkerCount { expected: usize, found: usize },
    #[error("the marker literal may only appear inside the schema")]
    StrayMarker,
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

/// Splits `text` into tokens with their byte spans.
pub fn split_words(text: &str) -> Vec<(&str, Span)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if text[i..].starts_with(MARKER) {
            i += MARKER.len();
        } else if is_word_byte(c) {
            while i < bytes.len() && is_word_byte(bytes[i]) {
                i += 1;
            }
        } else {
            // one character, which may be multi-byte
            i += text[i..].chars().next().map_or(1, char::len_utf8);
        }
        out.push((&text[start..i], Span::new(start, i)));
    }
    out
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80
}

/// Token ↔ id map. Ids 0..5 are reserved for PAD, BOS, EOS, MARKER and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Corpus tokens ordered by descending frequency, ties lexicographic.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in texts {
            for (w, _) in split_words(text) {
                if w != MARKER {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(ranked.into_iter().map(|(w, _)| w.to_string()));
        Vocab::from_tokens(tokens.collect()).expect("built vocabularies are bijective")
    }

    /// Builds from an id-ordered token list, checking the reserved prefix.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab, TokenizerError> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(TokenizerError::InvalidVocab(alloc::format!("id {i} must be `{s}`")));
            }
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::InvalidVocab(alloc::format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        split_words(text).into_iter().map(|(w, _)| self.id(w)).collect()
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(self.tokens.iter().enumerate().map(|(i, t)| (t, i as u32)))
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, u32>::deserialize(d)?;
        let mut tokens = alloc::vec![None; map.len()];
        for (t, id) in map {
            let slot = tokens.get_mut(id as usize).ok_or_else(|| serde::de::Error::custom("ids must be dense"))?;
            *slot = Some(t);
        }
        let tokens = tokens.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| serde::de::Error::custom("ids must be dense"))?;
        Vocab::from_tokens(tokens).map_err(serde::de::Error::custom)
    }
}

/// Token ids with their source spans and position ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Byte span of each token within its own part (prefix, schema or
    /// query text); `None` for BOS/EOS.
    pub char_offsets: Vec<Option<Span>>,
    /// Position id fed to the model for each token.
    pub positions: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32, offset: Option<Span>, position: u32) {
        self.ids.push(id);
        self.char_offsets.push(offset);
        self.positions.push(position);
    }
}

/// Region membership of every position in an encoded sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SegmentMap {
    pub len: usize,
    pub prefix: Span,
    pub schema: Span,
    pub query: Span,
    /// Marker positions, one per column in serialization order.
    pub markers: Vec<usize>,
    /// Token ranges (absolute positions) of every schema element.
    pub elements: SpanIndex,
    /// Positions of ground-truth column definitions and their tables'
    /// header/key/footer lines.
    pub gt_schema: BTreeSet<usize>,
    /// Positions of sampled noisy columns (plus envelopes where needed).
    pub noisy_schema: BTreeSet<usize>,
}

impl SegmentMap {
    /// Union of the token ranges of the given columns (indices in
    /// serialization order) and the envelopes of their tables.
    pub fn columns_with_envelopes(&self, columns: &BTreeSet<usize>) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut base = 0;
        for table in &self.elements.tables {
            let picked: Vec<_> = (0..table.columns.len()).filter(|i| columns.contains(&(base + i))).collect();
            if !picked.is_empty() {
                for s in table.envelope() {
                    out.extend(s.range());
                }
                for i in picked {
                    out.extend(table.columns[i].definition.range());
                }
            }
            base += table.columns.len();
        }
        out
    }

    /// Token range of column `index` (serialization order).
    pub fn column_span(&self, index: usize) -> Option<Span> {
        self.elements.columns().nth(index).map(|c| c.definition)
    }

    pub fn table_of_column(&self, index: usize) -> Option<usize> {
        let mut base = 0;
        for (ti, t) in self.elements.tables.iter().enumerate() {
            if index < base + t.columns.len() {
                return Some(ti);
            }
            base += t.columns.len();
        }
        None
    }
}

/// Encodes `BOS prefix schema query EOS`. `spans` are byte spans over
/// `schema`; they come back as absolute token ranges in the segment map.
/// An empty `query` yields an inference layout ending in the schema (no EOS).
pub fn encode(
    prefix: &str,
    schema: &str,
    spans: &SpanIndex,
    query: &str,
    vocab: &Vocab,
) -> Result<(TokenSequence, SegmentMap), TokenizerError> {
    if prefix.contains(MARKER) || query.contains(MARKER) {
        return Err(TokenizerError::StrayMarker);
    }
    let mut seq = TokenSequence::default();
    seq.push(BOS, None, 0);
    let push_part = |seq: &mut TokenSequence, text: &str| -> Vec<(usize, Span)> {
        let mut placed = Vec::new();
        for (w, span) in split_words(text) {
            let pos = seq.len();
            seq.push(vocab.id(w), Some(span), pos as u32);
            placed.push((pos, span));
        }
        placed
    };
    push_part(&mut seq, prefix);
    let schema_start = seq.len();
    let schema_tokens = push_part(&mut seq, schema);
    let query_start = seq.len();
    let has_query = !query.trim().is_empty();
    if has_query {
        push_part(&mut seq, query);
        let pos = seq.len();
        seq.push(EOS, None, pos as u32);
    }
    let n = seq.len();

    let to_tokens = |s: Span| -> Result<Span, TokenizerError> {
        if s.end > schema.len() || s.start > s.end {
            return Err(TokenizerError::SpanOutOfRange(s));
        }
        let mut first = None;
        let mut last = None;
        for &(pos, t) in &schema_tokens {
            let overlaps = t.start < s.end && s.start < t.end;
            if overlaps {
                if t.start < s.start || t.end > s.end {
                    return Err(TokenizerError::SpanMisaligned(s));
                }
                first.get_or_insert(pos);
                last = Some(pos);
            }
        }
        match (first, last) {
            (Some(a), Some(b)) => Ok(Span::new(a, b + 1)),
            _ => Err(TokenizerError::SpanMisaligned(s)),
        }
    };
    let elements = spans.try_map(to_tokens)?;

    let mut markers = Vec::with_capacity(elements.column_count());
    for c in elements.columns() {
        if c.marker.len() != 1 || seq.ids[c.marker.start] != MARKER_ID || c.marker.end != c.definition.end {
            return Err(TokenizerError::MarkerMisaligned(c.marker));
        }
        markers.push(c.marker.start);
    }
    let found = seq.ids[schema_start..query_start].iter().filter(|&&id| id == MARKER_ID).count();
    if found != markers.len() {
        return Err(TokenizerError::MarkerCount { expected: markers.len(), found });
    }

    let seg = SegmentMap {
        len: n,
        prefix: Span::new(0, schema_start),
        schema: Span::new(schema_start, query_start),
        query: Span::new(query_start, n),
        markers,
        elements,
        gt_schema: BTreeSet::new(),
        noisy_schema: BTreeSet::new(),
    };
    Ok((seq, seg))
}

/// Whitespace-joined tokens; special ids render as their literal names.
pub fn decode(ids: &[u32], vocab: &Vocab) -> String {
    let mut out = String::new();
    for (i, &id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(vocab.token(id).unwrap_or("<unk>"));
    }
    out
}

const CALL_WORDS: &[&str] = &[
    "count", "sum", "avg", "min", "max", "lower", "upper", "length", "abs", "round", "coalesce", "ifnull", "substr",
    "cast",
];

/// Joins SQL tokens back into executable text: quoted strings are rebuilt
/// without inner padding, `a . b`, `< =` and friends are fused, and calls
/// attach their parenthesis.
pub fn detokenize_sql<'a>(tokens: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    let mut in_quote = false;
    for tok in tokens {
        let glue = match prev {
            None => true,
            Some(p) => {
                if in_quote {
                    p == "'" || tok == "'"
                } else {
                    tok == ","
                        || tok == ")"
                        || tok == "."
                        || tok == ";"
                        || p == "("
                        || p == "."
                        || (tok == "(" && CALL_WORDS.iter().any(|w| w.eq_ignore_ascii_case(p)))
                        || (tok == "=" && matches!(p, "<" | ">" | "!" | "="))
                        || (tok == ">" && p == "<")
                        || (tok == "|" && p == "|")
                }
            }
        };
        if !glue {
            out.push(' ');
        }
        out.push_str(tok);
        if tok == "'" {
            in_quote = !in_quote;
        }
        prev = Some(tok);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{serialize_schema, Column, SchemaDocument, Table};
    use alloc::vec;

    #[test]
    fn vocab_frequency_order() {
        let v = Vocab::build(["a b", "b", ""]);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("a"), 6);
        assert_eq!(v.len(), 7);
        assert_eq!(v.id(MARKER), MARKER_ID);
        assert_eq!(Vocab::build([MARKER]).encode_text(&alloc::format!("x{MARKER}")), vec![UNK, MARKER_ID]);
    }

    #[test]
    fn marker_is_isolated() {
        let words: Vec<_> = split_words("abc<|marker|>def <|marker|><|marker|>").into_iter().map(|(w, _)| w).collect();
        assert_eq!(words, ["abc", MARKER, "def", MARKER, MARKER]);
    }

    #[test]
    fn punctuation_splits() {
        let words: Vec<_> = split_words("T1.name>='x y'").into_iter().map(|(w, _)| w).collect();
        assert_eq!(words, ["T1", ".", "name", ">", "=", "'", "x", "y", "'"]);
    }

    fn one_col() -> (String, SpanIndex) {
        let doc = SchemaDocument {
            tables: vec![Table { name: "t".into(), columns: vec![Column::new("name", "TEXT")], primary_key: vec![], foreign_keys: vec![] }],
        };
        serialize_schema(&doc, MARKER)
    }

    #[test]
    fn single_marker_inside_schema() {
        let (text, spans) = one_col();
        let vocab = Vocab::build(["q", text.as_str(), "SELECT"]);
        let (seq, seg) = encode("q", &text, &spans, "SELECT", &vocab).unwrap();
        assert_eq!(seg.markers.len(), 1);
        assert!(seg.schema.range().contains(&seg.markers[0]));
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
        assert_eq!(seg.prefix, Span::new(0, 2));
        assert_eq!(seg.query.len(), 2);
        assert_eq!(seg.len, seq.len());
    }

    #[test]
    fn unknown_word_keeps_offsets() {
        let (text, spans) = one_col();
        let vocab = Vocab::build([text.as_str()]);
        let (seq, _) = encode("zzz", &text, &spans, "", &vocab).unwrap();
        assert_eq!(seq.ids[1], UNK);
        assert_eq!(seq.char_offsets[1], Some(Span::new(0, 3)));
    }

    #[test]
    fn misaligned_span_rejected() {
        let (text, mut spans) = one_col();
        spans.tables[0].header.start += 1;
        let vocab = Vocab::build([text.as_str()]);
        assert!(matches!(encode("", &text, &spans, "", &vocab), Err(TokenizerError::SpanMisaligned(_))));
    }

    #[test]
    fn stray_marker_rejected() {
        let (text, spans) = one_col();
        let vocab = Vocab::build([text.as_str()]);
        assert_eq!(encode(MARKER, &text, &spans, "", &vocab), Err(TokenizerError::StrayMarker));
    }

    #[test]
    fn decode_cases() {
        let v = Vocab::build(["select name from t"]);
        assert_eq!(decode(&[MARKER_ID], &v), MARKER);
        assert_eq!(decode(&v.encode_text("select name from t"), &v), "select name from t");
        assert_eq!(decode(&[], &v), "");
    }

    #[test]
    fn sql_detokenization_round_trips() {
        for sql in [
            "SELECT T1.name, COUNT(*) FROM singer AS T1 WHERE T1.age >= 30 AND T1.city = 'New York' GROUP BY T1.name",
            "SELECT name FROM t WHERE x <> 3.5 ORDER BY y DESC LIMIT 3",
            "SELECT AVG(age) FROM t WHERE name != 'Joe'",
        ] {
            let words: Vec<_> = split_words(sql).into_iter().map(|(w, _)| w).collect();
            assert_eq!(detokenize_sql(words), sql);
        }
    }

    #[test]
    fn vocab_json_shape() {
        let v = Vocab::build(["b a b"]);
        let back = Vocab::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
    }
}
