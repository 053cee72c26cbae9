//! SQL parsing, scope resolution and ground-truth link extraction.
//!
//! The pipeline is `parse_sql` → `resolve_scopes` → `extract_links`. The
//! resulting [`LinkSet`] names every physical `table.column` a query touches,
//! which becomes the positive label set for schema linking.

pub mod ast;
mod lexer;
mod parser;
mod resolve;

use alloc::collections::BTreeSet;
use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

pub use parser::parse_sql;
pub use resolve::{extract_links, resolve_scopes, Binding, BindingTarget, ResolvedAst};

use crate::schema::SchemaDocument;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SqlError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unsupported construct at byte {offset}: {feature}")]
    Unsupported { offset: usize, feature: &'static str },
    #[error("ambiguous column `{column}` at byte {offset}")]
    AmbiguousColumn { column: String, offset: usize },
    #[error("unknown column `{column}` at byte {offset}")]
    UnknownColumn { column: String, offset: usize },
    #[error("unknown table `{table}` at byte {offset}")]
    UnknownTable { table: String, offset: usize },
}

impl SqlError {
    pub(crate) fn syntax(offset: usize, message: &str) -> Self {
        SqlError::Syntax { offset, message: String::from(message) }
    }

    pub fn offset(&self) -> Option<usize> {
        match self {
            SqlError::Syntax { offset, .. }
            | SqlError::Unsupported { offset, .. }
            | SqlError::AmbiguousColumn { offset, .. }
            | SqlError::UnknownColumn { offset, .. }
            | SqlError::UnknownTable { offset, .. } => Some(*offset),
        }
    }
}

/// A lowercase `table.column` pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ColumnKey {
    pub table: String,
    pub column: String,
}

impl ColumnKey {
    pub fn new(table: &str, column: &str) -> Self {
        ColumnKey { table: table.to_ascii_lowercase(), column: column.to_ascii_lowercase() }
    }

    /// Parses `table.column`.
    pub fn parse(s: &str) -> Option<Self> {
        let (t, c) = s.split_once('.')?;
        if t.is_empty() || c.is_empty() {
            return None;
        }
        Some(ColumnKey::new(t, c))
    }
}

impl fmt::Display for ColumnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

/// Ground-truth schema links of one query.
pub type LinkSet = BTreeSet<ColumnKey>;

/// Convenience wrapper running the whole extraction chain.
pub fn links_for(sql: &str, schema: &SchemaDocument) -> Result<LinkSet, SqlError> {
    let ast = parse_sql(sql)?;
    let resolved = resolve_scopes(&ast, schema)?;
    Ok(extract_links(&resolved, schema))
}
