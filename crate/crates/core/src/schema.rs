//! Schema documents and their DDL-style serialization with marker tokens.
//!
//! Every column line ends with the marker literal; the [`SpanIndex`] records
//! byte ranges of each table header, column definition, primary/foreign key
//! line and footer so later stages can map them onto token ranges.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::sql::{ColumnKey, LinkSet};

/// Reserved marker literal appended to every column definition.
pub const MARKER: &str = "<|marker|>";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("duplicate table `{0}`")]
    DuplicateTable(String),
    #[error("duplicate column `{0}`")]
    DuplicateColumn(ColumnKey),
    #[error("column `{0}` has more than two example values")]
    TooManyExamples(ColumnKey),
    #[error("unknown column `{0}`")]
    UnknownColumn(ColumnKey),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaDocument {
    pub tables: Vec<Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<Column>,
    #[serde(default)]
    pub primary_key: Vec<String>,
    /// `(local column, foreign table, foreign column)`
    #[serde(default)]
    pub foreign_keys: Vec<(String, String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub sql_type: String,
    /// Already-rendered SQL literals, at most two.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<String>,
}

impl Column {
    pub fn new(name: &str, sql_type: &str) -> Self {
        Column { name: name.to_string(), sql_type: sql_type.to_string(), examples: Vec::new() }
    }
}

impl SchemaDocument {
    pub fn validate(&self) -> Result<(), SchemaError> {
        for (i, t) in self.tables.iter().enumerate() {
            if self.tables[..i].iter().any(|o| o.name.eq_ignore_ascii_case(&t.name)) {
                return Err(SchemaError::DuplicateTable(t.name.to_ascii_lowercase()));
            }
            for (j, c) in t.columns.iter().enumerate() {
                let key = ColumnKey::new(&t.name, &c.name);
                if t.columns[..j].iter().any(|o| o.name.eq_ignore_ascii_case(&c.name)) {
                    return Err(SchemaError::DuplicateColumn(key));
                }
                if c.examples.len() > 2 {
                    return Err(SchemaError::TooManyExamples(key));
                }
            }
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn contains(&self, key: &ColumnKey) -> bool {
        self.column_index(key).is_some()
    }

    pub fn column_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    /// Every column in serialization order.
    pub fn column_keys(&self) -> Vec<ColumnKey> {
        self.tables
            .iter()
            .flat_map(|t| t.columns.iter().map(move |c| ColumnKey::new(&t.name, &c.name)))
            .collect()
    }

    /// Position of `key` in serialization order.
    pub fn column_index(&self, key: &ColumnKey) -> Option<usize> {
        let mut base = 0;
        for t in &self.tables {
            if t.name.eq_ignore_ascii_case(&key.table) {
                return t.columns.iter().position(|c| c.name.eq_ignore_ascii_case(&key.column)).map(|i| base + i);
            }
            base += t.columns.len();
        }
        None
    }
}

/// Half-open byte range, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn range(self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(self) -> bool {
        self.start == self.end
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpans {
    pub name: String,
    pub definition: Span,
    pub marker: Span,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpans {
    pub name: String,
    pub header: Span,
    pub pk: Option<Span>,
    pub fk: Vec<Span>,
    pub footer: Span,
    pub columns: Vec<ColumnSpans>,
}

impl TableSpans {
    /// Header, key lines and footer: the structure that frames any column.
    pub fn envelope(&self) -> impl Iterator<Item = Span> + '_ {
        core::iter::once(self.header).chain(self.pk).chain(self.fk.iter().copied()).chain(core::iter::once(self.footer))
    }
}

/// Element spans over some serialized text. The same shape is reused for
/// byte spans (over the schema text) and token spans (over a token sequence).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SpanIndex {
    pub tables: Vec<TableSpans>,
}

impl SpanIndex {
    pub fn columns(&self) -> impl Iterator<Item = &ColumnSpans> {
        self.tables.iter().flat_map(|t| t.columns.iter())
    }

    pub fn column_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    /// Applies `f` to every span, keeping the structure.
    pub fn try_map<E>(&self, mut f: impl FnMut(Span) -> Result<Span, E>) -> Result<SpanIndex, E> {
        let mut tables = Vec::with_capacity(self.tables.len());
        for t in &self.tables {
            let mut columns = Vec::with_capacity(t.columns.len());
            for c in &t.columns {
                columns.push(ColumnSpans { name: c.name.clone(), definition: f(c.definition)?, marker: f(c.marker)? });
            }
            tables.push(TableSpans {
                name: t.name.clone(),
                header: f(t.header)?,
                pk: t.pk.map(&mut f).transpose()?,
                fk: t.fk.iter().map(|s| f(*s)).collect::<Result<_, _>>()?,
                footer: f(t.footer)?,
                columns,
            });
        }
        Ok(SpanIndex { tables })
    }
}

/// Renders `doc` as DDL text. Layout (fixed, see the golden tests):
///
/// ```text
/// CREATE TABLE singer (
///   id INTEGER, -- examples: 1, 2 <|marker|>
///   name TEXT, -- examples: 'Joe', 'Ann' <|marker|>
///   PRIMARY KEY (id),
///   FOREIGN KEY (city_id) REFERENCES city (id),
/// );
/// ```
///
/// Tables are separated by a blank line.
pub fn serialize_schema(doc: &SchemaDocument, marker: &str) -> (String, SpanIndex) {
    assert!(!marker.is_empty(), "marker text must be non-empty");
    let mut text = String::new();
    let mut tables = Vec::with_capacity(doc.tables.len());
    for (ti, table) in doc.tables.iter().enumerate() {
        if ti > 0 {
            text.push('\n');
        }
        let header = push_span(&mut text, &format!("CREATE TABLE {} (", table.name));
        text.push('\n');
        let mut columns = Vec::with_capacity(table.columns.len());
        for col in &table.columns {
            text.push_str("  ");
            let start = text.len();
            let _ = write!(text, "{} {}, -- examples: ", col.name, col.sql_type);
            if col.examples.is_empty() {
                text.push_str("None");
            } else {
                text.push_str(&col.examples.join(", "));
            }
            text.push(' ');
            let marker_span = push_span(&mut text, marker);
            columns.push(ColumnSpans {
                name: col.name.clone(),
                definition: Span::new(start, marker_span.end),
                marker: marker_span,
            });
            text.push('\n');
        }
        let pk = if table.primary_key.is_empty() {
            None
        } else {
            text.push_str("  ");
            let s = push_span(&mut text, &format!("PRIMARY KEY ({}),", table.primary_key.join(", ")));
            text.push('\n');
            Some(s)
        };
        let mut fk = Vec::with_capacity(table.foreign_keys.len());
        for (local, ftable, fcol) in &table.foreign_keys {
            text.push_str("  ");
            fk.push(push_span(&mut text, &format!("FOREIGN KEY ({local}) REFERENCES {ftable} ({fcol}),")));
            text.push('\n');
        }
        let footer = push_span(&mut text, ");");
        text.push('\n');
        tables.push(TableSpans { name: table.name.clone(), header, pk, fk, footer, columns });
    }
    (text, SpanIndex { tables })
}

fn push_span(text: &mut String, s: &str) -> Span {
    let start = text.len();
    text.push_str(s);
    Span::new(start, text.len())
}

/// A database value, as sampled for example rendering or compared when
/// checking execution results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SqlValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl SqlValue {
    /// SQL literal form: strings single-quoted with `'` doubled.
    pub fn render_literal(&self) -> String {
        match self {
            SqlValue::Null => "NULL".to_string(),
            SqlValue::Integer(i) => i.to_string(),
            SqlValue::Real(r) => format!("{r}"),
            SqlValue::Text(s) => format!("'{}'", s.replace('\'', "''")),
            SqlValue::Blob(b) => {
                let mut s = String::from("X'");
                for byte in b {
                    let _ = write!(s, "{byte:02X}");
                }
                s.push('\'');
                s
            }
        }
    }
}

/// Up to `limit` distinct non-null values in first-seen order, rendered as
/// SQL literals.
pub fn distinct_examples<'a>(values: impl IntoIterator<Item = &'a SqlValue>, limit: usize) -> Vec<String> {
    let mut seen: Vec<&SqlValue> = Vec::new();
    for v in values {
        if seen.len() == limit {
            break;
        }
        if *v != SqlValue::Null && !seen.contains(&v) {
            seen.push(v);
        }
    }
    seen.into_iter().map(SqlValue::render_literal).collect()
}

/// One binary label per column in serialization order.
pub fn label_vector(links: &LinkSet, doc: &SchemaDocument) -> Result<Vec<u8>, SchemaError> {
    let mut y = alloc::vec![0u8; doc.column_count()];
    for key in links {
        let i = doc.column_index(key).ok_or_else(|| SchemaError::UnknownColumn(key.clone()))?;
        y[i] = 1;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn singer_concert() -> SchemaDocument {
        SchemaDocument {
            tables: vec![
                Table {
                    name: "singer".into(),
                    columns: vec![
                        Column { examples: vec!["1".into(), "2".into()], ..Column::new("id", "INTEGER") },
                        Column { examples: vec!["'Joe'".into(), "'Ann'".into()], ..Column::new("name", "TEXT") },
                        Column::new("age", "INTEGER"),
                    ],
                    primary_key: vec!["id".into()],
                    foreign_keys: vec![],
                },
                Table {
                    name: "concert".into(),
                    columns: vec![Column::new("id", "INTEGER"), Column::new("singer_id", "INTEGER"), Column::new("year", "INTEGER")],
                    primary_key: vec!["id".into()],
                    foreign_keys: vec![("singer_id".into(), "singer".into(), "id".into())],
                },
            ],
        }
    }

    #[test]
    fn golden_layout() {
        let (text, _) = serialize_schema(&singer_concert(), MARKER);
        let expected = "CREATE TABLE singer (\n  id INTEGER, -- examples: 1, 2 <|marker|>\n  name TEXT, -- examples: 'Joe', 'Ann' <|marker|>\n  age INTEGER, -- examples: None <|marker|>\n  PRIMARY KEY (id),\n);\n\nCREATE TABLE concert (\n  id INTEGER, -- examples: None <|marker|>\n  singer_id INTEGER, -- examples: None <|marker|>\n  year INTEGER, -- examples: None <|marker|>\n  PRIMARY KEY (id),\n  FOREIGN KEY (singer_id) REFERENCES singer (id),\n);\n";
        assert_eq!(text, expected);
    }

    #[test]
    fn single_column_line_carries_marker_and_examples() {
        let doc = SchemaDocument {
            tables: vec![Table {
                name: "singer".into(),
                columns: vec![Column { examples: vec!["'Joe'".into()], ..Column::new("name", "TEXT") }],
                primary_key: vec![],
                foreign_keys: vec![],
            }],
        };
        let (text, spans) = serialize_schema(&doc, MARKER);
        let col = &spans.tables[0].columns[0];
        assert_eq!(&text[col.definition.range()], "name TEXT, -- examples: 'Joe' <|marker|>");
        assert_eq!(&text[col.marker.range()], MARKER);
        assert!(spans.tables[0].pk.is_none());
    }

    #[test]
    fn empty_table_has_no_markers() {
        let doc = SchemaDocument {
            tables: vec![Table { name: "t".into(), columns: vec![], primary_key: vec!["id".into()], foreign_keys: vec![] }],
        };
        let (text, spans) = serialize_schema(&doc, MARKER);
        assert_eq!(text, "CREATE TABLE t (\n  PRIMARY KEY (id),\n);\n");
        assert_eq!(text.matches(MARKER).count(), 0);
        assert_eq!(spans.column_count(), 0);
    }

    #[test]
    fn span_fidelity_and_ordering() {
        let (text, spans) = serialize_schema(&singer_concert(), MARKER);
        assert!(spans.tables[0].footer.end < spans.tables[1].header.start);
        for t in &spans.tables {
            assert!(text[t.header.range()].starts_with("CREATE TABLE"));
            assert_eq!(&text[t.footer.range()], ");");
            for c in &t.columns {
                assert!(text[c.definition.range()].ends_with(MARKER));
                assert!(text[c.definition.range()].starts_with(&c.name));
                assert_eq!(c.marker.end, c.definition.end);
                assert!(t.header.end <= c.definition.start && c.definition.end <= t.footer.start);
            }
        }
        assert_eq!(text.matches(MARKER).count(), 6);
    }

    #[test]
    fn examples_first_seen_distinct() {
        let vals = [SqlValue::Text("A".into()), SqlValue::Text("A".into()), SqlValue::Text("B".into()), SqlValue::Text("C".into())];
        assert_eq!(distinct_examples(&vals, 2), vec!["'A'", "'B'"]);
        assert!(distinct_examples(&[], 2).is_empty());
        assert_eq!(distinct_examples(&[SqlValue::Null, SqlValue::Integer(42)], 2), vec!["42"]);
        assert_eq!(SqlValue::Text("O'Neil".into()).render_literal(), "'O''Neil'");
    }

    #[test]
    fn labels() {
        let doc = singer_concert();
        assert_eq!(label_vector(&LinkSet::new(), &doc).unwrap(), vec![0; 6]);
        let all: LinkSet = doc.column_keys().into_iter().collect();
        assert_eq!(label_vector(&all, &doc).unwrap(), vec![1; 6]);
        let one: LinkSet = [ColumnKey::new("singer", "name")].into_iter().collect();
        assert_eq!(label_vector(&one, &doc).unwrap(), vec![0, 1, 0, 0, 0, 0]);
        let bad: LinkSet = [ColumnKey::new("singer", "nope")].into_iter().collect();
        assert!(matches!(label_vector(&bad, &doc), Err(SchemaError::UnknownColumn(_))));
    }

    #[test]
    fn validation() {
        let mut doc = singer_concert();
        assert!(doc.validate().is_ok());
        doc.tables[1].name = "SINGER".into();
        assert!(matches!(doc.validate(), Err(SchemaError::DuplicateTable(_))));
    }
}
