mod common;

use jolt_core::pipeline::prefix_text;
use jolt_core::schema::{serialize_schema, MARKER};
use jolt_core::tokenizer::{decode, encode, split_words, Vocab, BOS, EOS, MARKER_ID};
use proptest::prelude::*;

proptest! {
    #[test]
    fn spans_slice_their_elements(doc in common::schema_strategy()) {
        let (text, spans) = serialize_schema(&doc, MARKER);
        prop_assert_eq!(spans.tables.len(), doc.tables.len());
        for (t, ts) in doc.tables.iter().zip(&spans.tables) {
            let header = &text[ts.header.range()];
            prop_assert!(header.starts_with("CREATE TABLE"));
            prop_assert!(header.contains(&t.name));
            prop_assert_eq!(&text[ts.footer.range()], ");");
            prop_assert_eq!(ts.pk.is_some(), !t.primary_key.is_empty());
            if let Some(pk) = ts.pk {
                prop_assert!(text[pk.range()].starts_with("PRIMARY KEY"));
            }
            for (c, cs) in t.columns.iter().zip(&ts.columns) {
                let def = &text[cs.definition.range()];
                prop_assert!(def.starts_with(&c.name));
                prop_assert!(def.ends_with(MARKER));
                prop_assert_eq!(&text[cs.marker.range()], MARKER);
                for e in &c.examples {
                    prop_assert!(def.contains(e.as_str()));
                }
            }
        }
        prop_assert_eq!(text.matches(MARKER).count(), doc.column_count());
        prop_assert_eq!(serialize_schema(&doc, MARKER), (text.clone(), spans.clone()));
    }

    #[test]
    fn encoding_partitions_and_isolates_markers(doc in common::schema_strategy(), q in "[a-z]{1,6}( [a-z]{1,6}){0,4}", sql in "(SELECT [a-z]{1,5} FROM [a-z]{1,5})?") {
        let (text, spans) = serialize_schema(&doc, MARKER);
        let prefix = prefix_text(&q);
        let vocab = Vocab::build([prefix.as_str(), text.as_str(), sql.as_str()]);
        let (seq, seg) = encode(&prefix, &text, &spans, &sql, &vocab).unwrap();
        prop_assert_eq!(seg.prefix.start, 0);
        prop_assert_eq!(seg.prefix.end, seg.schema.start);
        prop_assert_eq!(seg.schema.end, seg.query.start);
        prop_assert_eq!(seg.query.end, seq.len());
        prop_assert_eq!(seq.ids[0], BOS);
        let expected: Vec<u32> = (0..seq.len() as u32).collect();
        prop_assert_eq!(&seq.positions, &expected);
        prop_assert_eq!(seg.markers.len(), doc.column_count());
        for (p, &id) in seq.ids.iter().enumerate() {
            prop_assert_eq!(id == MARKER_ID, seg.markers.contains(&p), "position {}", p);
        }
        if sql.is_empty() {
            prop_assert!(seg.query.is_empty());
        } else {
            prop_assert_eq!(*seq.ids.last().unwrap(), EOS);
        }
        let words: Vec<&str> = split_words(&text).into_iter().map(|w| w.0).collect();
        let schema_ids = &seq.ids[seg.schema.range()];
        prop_assert_eq!(decode(schema_ids, &vocab), words.join(" "));
        for c in seg.elements.columns() {
            prop_assert_eq!(c.marker.end, c.definition.end);
            prop_assert!(seg.schema.range().contains(&c.definition.start));
        }
    }
}

#[test]
fn marker_text_in_question_is_rejected() {
    let doc = common::singer_concert();
    let (text, spans) = serialize_schema(&doc, MARKER);
    let prefix = prefix_text("what is <|marker|> here");
    let vocab = Vocab::build([text.as_str()]);
    assert!(encode(&prefix, &text, &spans, "", &vocab).is_err());
}
