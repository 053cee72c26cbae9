//! SQLite access: schema introspection with sampled example values, and
//! query execution under a wall-clock limit.

use std::path::Path;
use std::time::{Duration, Instant};

use jolt_core::schema::{distinct_examples, Column, SchemaDocument, SqlValue, Table};
use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

/// Opens an existing database read-only.
pub fn open_readonly(path: &Path) -> Result<Connection> {
    if !path.is_file() {
        return Err(Error::DbUnavailable(path.to_path_buf()));
    }
    Ok(Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)?)
}

fn quote_ident(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// Tables in creation order with columns, keys and up to `examples`
/// first-seen distinct values per column.
pub fn read_schema(conn: &Connection, examples: usize) -> Result<SchemaDocument> {
    let mut stmt = conn.prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid")?;
    let names: Vec<String> = stmt.query_map([], |r| r.get(0))?.collect::<std::result::Result<_, _>>()?;
    let mut tables = Vec::with_capacity(names.len());
    for name in names {
        let mut info = conn.prepare(&format!("PRAGMA table_info({})", quote_ident(&name)))?;
        let cols: Vec<(String, String, i64)> =
            info.query_map([], |r| Ok((r.get(1)?, r.get(2)?, r.get(5)?)))?.collect::<std::result::Result<_, _>>()?;
        let mut pk: Vec<(i64, String)> = cols.iter().filter(|c| c.2 > 0).map(|c| (c.2, c.0.clone())).collect();
        pk.sort();
        let mut fk_stmt = conn.prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(&name)))?;
        let mut fks: Vec<(i64, i64, String, String, String)> = fk_stmt
            .query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(3)?, r.get(2)?, r.get::<_, Option<String>>(4)?.unwrap_or_default())))?
            .collect::<std::result::Result<_, _>>()?;
        // PRAGMA lists the newest constraint first
        fks.sort_by_key(|f| (std::cmp::Reverse(f.0), f.1));
        let mut columns = Vec::with_capacity(cols.len());
        for (cname, ctype, _) in &cols {
            let values = column_values(conn, &name, cname)?;
            columns.push(Column {
                name: cname.clone(),
                sql_type: if ctype.is_empty() { "TEXT".into() } else { ctype.clone() },
                examples: distinct_examples(&values, examples),
            });
        }
        tables.push(Table {
            name,
            columns,
            primary_key: pk.into_iter().map(|p| p.1).collect(),
            foreign_keys: fks.into_iter().map(|f| (f.2, f.3, f.4)).collect(),
        });
    }
    Ok(SchemaDocument { tables })
}

fn column_values(conn: &Connection, table: &str, column: &str) -> Result<Vec<SqlValue>> {
    let sql = format!("SELECT {} FROM {} ORDER BY rowid", quote_ident(column), quote_ident(table));
    let mut stmt = conn.prepare(&sql)?;
    let rows = stmt.query_map([], |r| Ok(to_value(r.get_ref(0)?)))?;
    Ok(rows.collect::<std::result::Result<_, _>>()?)
}

fn to_value(v: ValueRef<'_>) -> SqlValue {
    match v {
        ValueRef::Null => SqlValue::Null,
        ValueRef::Integer(i) => SqlValue::Integer(i),
        ValueRef::Real(f) => SqlValue::Real(f),
        ValueRef::Text(t) => SqlValue::Text(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => SqlValue::Blob(b.to_vec()),
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error("query timed out")]
    Timeout,
    #[error("{0}")]
    Sqlite(String),
}

/// Runs `sql` and collects every row; interrupted after `timeout`.
pub fn execute(conn: &Connection, sql: &str, timeout: Duration) -> std::result::Result<Vec<Vec<SqlValue>>, ExecError> {
    let deadline = Instant::now() + timeout;
    conn.progress_handler(1000, Some(move || Instant::now() > deadline)).map_err(|e| ExecError::Sqlite(e.to_string()))?;
    let result = (|| {
        let mut stmt = conn.prepare(sql)?;
        let n = stmt.column_count();
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        while let Some(r) = rows.next()? {
            out.push((0..n).map(|i| r.get_ref(i).map(to_value)).collect::<rusqlite::Result<Vec<_>>>()?);
        }
        Ok(out)
    })();
    let _ = conn.progress_handler(0, None::<fn() -> bool>);
    result.map_err(|e: rusqlite::Error| {
        if Instant::now() > deadline || matches!(e.sqlite_error_code(), Some(rusqlite::ErrorCode::OperationInterrupted)) {
            ExecError::Timeout
        } else {
            ExecError::Sqlite(e.to_string())
        }
    })
}
