#![allow(dead_code)]

use std::collections::BTreeSet;

use jolt_core::schema::{Column, SchemaDocument, Span, SpanIndex, Table};
use jolt_core::tokenizer::SegmentMap;
use proptest::prelude::*;

pub fn singer_concert() -> SchemaDocument {
    SchemaDocument {
        tables: vec![
            Table {
                name: "singer".into(),
                columns: vec![
                    Column { examples: vec!["1".into(), "2".into()], ..Column::new("id", "INTEGER") },
                    Column { examples: vec!["'Joe'".into(), "'Ann'".into()], ..Column::new("name", "TEXT") },
                    Column { examples: vec!["31".into(), "52".into()], ..Column::new("age", "INTEGER") },
                    Column { examples: vec!["'France'".into()], ..Column::new("country", "TEXT") },
                ],
                primary_key: vec!["id".into()],
                foreign_keys: vec![],
            },
            Table {
                name: "concert".into(),
                columns: vec![
                    Column::new("id", "INTEGER"),
                    Column::new("singer_id", "INTEGER"),
                    Column { examples: vec!["2014".into(), "2015".into()], ..Column::new("year", "INTEGER") },
                ],
                primary_key: vec!["id".into()],
                foreign_keys: vec![("singer_id".into(), "singer".into(), "id".into())],
            },
            Table {
                name: "stadium".into(),
                columns: vec![Column::new("id", "INTEGER"), Column::new("capacity", "INTEGER")],
                primary_key: vec![],
                foreign_keys: vec![],
            },
        ],
    }
}

const WORDS: &[&str] = &["alpha", "beta", "gamma", "delta", "omega", "kappa", "sigma", "theta", "zeta", "iota"];

/// Schemas with 1–4 tables of 1–5 uniquely named columns.
pub fn schema_strategy() -> impl Strategy<Value = SchemaDocument> {
    prop::collection::vec((1usize..=5, any::<bool>(), prop::collection::vec(0usize..WORDS.len(), 0..3)), 1..=4).prop_map(|tables| {
        SchemaDocument {
            tables: tables
                .into_iter()
                .enumerate()
                .map(|(ti, (ncols, pk, ex))| Table {
                    name: format!("t{ti}"),
                    columns: (0..ncols)
                        .map(|ci| Column {
                            examples: ex.iter().map(|&w| format!("'{}'", WORDS[w])).collect(),
                            ..Column::new(&format!("{}_{ci}", WORDS[(ti + ci) % WORDS.len()]), if ci % 2 == 0 { "INTEGER" } else { "TEXT" })
                        })
                        .collect(),
                    primary_key: if pk { vec![format!("{}_0", WORDS[ti % WORDS.len()])] } else { vec![] },
                    foreign_keys: vec![],
                })
                .collect(),
        }
    })
}

/// Partitioned `0..n` (`n ≤ 64`) with arbitrary marker, GT and noisy
/// subsets of the schema region.
pub fn segmentation_strategy() -> impl Strategy<Value = SegmentMap> {
    (3usize..=64)
        .prop_flat_map(|n| (Just(n), 1..n - 1))
        .prop_flat_map(|(n, a)| (Just(n), Just(a), a + 1..n))
        .prop_flat_map(|(n, a, b)| {
            let len = b - a;
            (Just(n), Just(a), Just(b), prop::collection::vec(0u8..8, len))
        })
        .prop_map(|(n, a, b, roles)| {
            let mut markers = Vec::new();
            let mut gt = BTreeSet::new();
            let mut noisy = BTreeSet::new();
            for (k, r) in roles.iter().enumerate() {
                let p = a + k;
                if r & 1 == 1 {
                    markers.push(p);
                }
                match r >> 1 {
                    1 => {
                        gt.insert(p);
                    }
                    2 => {
                        noisy.insert(p);
                    }
                    _ => {}
                }
            }
            SegmentMap {
                len: n,
                prefix: Span::new(0, a),
                schema: Span::new(a, b),
                query: Span::new(b, n),
                markers,
                elements: SpanIndex::default(),
                gt_schema: gt,
                noisy_schema: noisy,
            }
        })
}
