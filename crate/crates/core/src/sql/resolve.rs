use alloc::string::String;
use alloc::vec::Vec;

use super::ast::*;
use super::{ColumnKey, LinkSet, SqlError};
use crate::schema::SchemaDocument;

/// What a column reference (or a star expansion) resolved to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BindingTarget {
    /// A physical schema column.
    Column(ColumnKey),
    /// A column exposed by a derived table in FROM; its physical columns are
    /// bound inside the subquery.
    Derived { source: String, column: String },
    /// A select-list alias referenced from a later clause.
    OutputAlias(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binding {
    /// Byte offset of the reference (or of the `*`) in the source text.
    pub offset: usize,
    pub target: BindingTarget,
    pub from_star: bool,
}

/// A parsed query together with the binding of every column reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedAst {
    pub ast: SqlAst,
    pub bindings: Vec<Binding>,
}

impl ResolvedAst {
    pub fn physical_columns(&self) -> impl Iterator<Item = &ColumnKey> {
        self.bindings.iter().filter_map(|b| match &b.target {
            BindingTarget::Column(k) => Some(k),
            _ => None,
        })
    }
}

/// Binds every column reference to the table that defines it. Subquery scopes
/// see their enclosing scopes; lookups go innermost-first.
pub fn resolve_scopes(ast: &SqlAst, schema: &SchemaDocument) -> Result<ResolvedAst, SqlError> {
    let mut r = Resolver { schema, bindings: Vec::new() };
    r.query(&ast.root, None)?;
    Ok(ResolvedAst { ast: ast.clone(), bindings: r.bindings })
}

/// Union of the physical columns bound anywhere in the query.
pub fn extract_links(resolved: &ResolvedAst, schema: &SchemaDocument) -> LinkSet {
    resolved
        .physical_columns()
        .filter(|k| {
            let known = schema.contains(k);
            debug_assert!(known, "resolver produced a column outside the schema: {k}");
            known
        })
        .cloned()
        .collect()
}

struct Source {
    /// Name the source is referenced by: its alias, else the table name.
    name: String,
    table: Option<String>,
    columns: Vec<String>,
}

impl Source {
    fn has(&self, column: &str) -> bool {
        self.columns.iter().any(|c| c == column)
    }
}

struct Scope<'p> {
    sources: Vec<Source>,
    using: Vec<String>,
    aliases: Vec<String>,
    outputs: Vec<String>,
    parent: Option<&'p Scope<'p>>,
}

impl<'p> Scope<'p> {
    fn new(parent: Option<&'p Scope<'p>>) -> Self {
        Scope { sources: Vec::new(), using: Vec::new(), aliases: Vec::new(), outputs: Vec::new(), parent }
    }

    fn source_named(&self, name: &str) -> Option<&Source> {
        self.sources
            .iter()
            .find(|s| s.name == name)
            .or_else(|| self.sources.iter().find(|s| s.table.as_deref() == Some(name)))
    }
}

struct Resolver<'s> {
    schema: &'s SchemaDocument,
    bindings: Vec<Binding>,
}

impl Resolver<'_> {
    fn bind(&mut self, offset: usize, source: &Source, column: &str, from_star: bool) {
        let target = match &source.table {
            Some(t) => BindingTarget::Column(ColumnKey::new(t, column)),
            None => BindingTarget::Derived { source: source.name.clone(), column: String::from(column) },
        };
        self.bindings.push(Binding { offset, target, from_star });
    }

    /// Returns the output column names of the query.
    fn query(&mut self, q: &Query, parent: Option<&Scope<'_>>) -> Result<Vec<String>, SqlError> {
        let scope = self.set_expr(&q.body, parent)?;
        for item in &q.order_by {
            self.expr(&item.expr, &scope, true)?;
        }
        if let Some(limit) = &q.limit {
            self.expr(&limit.count, &scope, false)?;
            if let Some(off) = &limit.offset {
                self.expr(off, &scope, false)?;
            }
        }
        Ok(scope.outputs)
    }

    /// Resolves every operand; returns the scope of the leftmost SELECT.
    fn set_expr<'p>(&mut self, body: &SetExpr, parent: Option<&'p Scope<'p>>) -> Result<Scope<'p>, SqlError> {
        match body {
            SetExpr::Select(s) => self.select(s, parent),
            SetExpr::SetOp { left, right, .. } => {
                let scope = self.set_expr(left, parent)?;
                self.set_expr(right, parent)?;
                Ok(scope)
            }
        }
    }

    fn select<'p>(&mut self, sel: &Select, parent: Option<&'p Scope<'p>>) -> Result<Scope<'p>, SqlError> {
        let mut scope = Scope::new(parent);
        if let Some(from) = &sel.from {
            for factor in from.factors() {
                let source = self.source(factor, parent)?;
                scope.sources.push(source);
            }
            for (i, join) in from.joins.iter().enumerate() {
                match &join.constraint {
                    JoinConstraint::None => {}
                    JoinConstraint::On(e) => self.expr(e, &scope, false)?,
                    JoinConstraint::Using(cols) => {
                        let right = i + 1;
                        for col in cols {
                            let left = scope.sources[..right].iter().rev().find(|s| s.has(&col.value));
                            let Some(left) = left else {
                                return Err(SqlError::UnknownColumn { column: col.value.clone(), offset: col.offset });
                            };
                            if !scope.sources[right].has(&col.value) {
                                return Err(SqlError::UnknownColumn { column: col.value.clone(), offset: col.offset });
                            }
                            self.bind(col.offset, left, &col.value, false);
                            self.bind(col.offset, &scope.sources[right], &col.value, false);
                            scope.using.push(col.value.clone());
                        }
                    }
                }
            }
        }
        for item in &sel.items {
            match item {
                SelectItem::Wildcard { offset } => {
                    for source in &scope.sources {
                        for col in &source.columns {
                            self.bind(*offset, source, col, true);
                        }
                        scope.outputs.extend(source.columns.iter().cloned());
                    }
                }
                SelectItem::QualifiedWildcard { qualifier } => {
                    let Some(source) = scope.source_named(&qualifier.value) else {
                        return Err(SqlError::UnknownTable { table: qualifier.value.clone(), offset: qualifier.offset });
                    };
                    for col in &source.columns {
                        self.bind(qualifier.offset, source, col, true);
                    }
                    let cols = source.columns.clone();
                    scope.outputs.extend(cols);
                }
                SelectItem::Expr { expr, alias } => {
                    self.expr(expr, &scope, false)?;
                    let name = match (alias, expr) {
                        (Some(a), _) => a.value.clone(),
                        (None, Expr::Column(c)) => c.name.value.clone(),
                        (None, _) => String::new(),
                    };
                    scope.outputs.push(name);
                    if let Some(a) = alias {
                        scope.aliases.push(a.value.clone());
                    }
                }
            }
        }
        if let Some(e) = &sel.selection {
            self.expr(e, &scope, false)?;
        }
        for e in &sel.group_by {
            self.expr(e, &scope, true)?;
        }
        if let Some(e) = &sel.having {
            self.expr(e, &scope, true)?;
        }
        Ok(scope)
    }

    fn source(&mut self, factor: &TableFactor, parent: Option<&Scope<'_>>) -> Result<Source, SqlError> {
        match factor {
            TableFactor::Table { name, alias } => {
                let Some(table) = self.schema.table(&name.value) else {
                    return Err(SqlError::UnknownTable { table: name.value.clone(), offset: name.offset });
                };
                Ok(Source {
                    name: alias.as_ref().unwrap_or(name).value.clone(),
                    table: Some(table.name.to_ascii_lowercase()),
                    columns: table.columns.iter().map(|c| c.name.to_ascii_lowercase()).collect(),
                })
            }
            TableFactor::Derived { query, alias, .. } => {
                let outputs = self.query(query, parent)?;
                Ok(Source {
                    name: alias.as_ref().map(|a| a.value.clone()).unwrap_or_default(),
                    table: None,
                    columns: outputs.into_iter().filter(|c| !c.is_empty()).collect(),
                })
            }
        }
    }

    fn column(&mut self, c: &ColumnRef, scope: &Scope<'_>, allow_alias: bool) -> Result<(), SqlError> {
        let column = &c.name.value;
        if let Some(q) = &c.qualifier {
            let mut cur = Some(scope);
            while let Some(s) = cur {
                if let Some(source) = s.source_named(&q.value) {
                    if !source.has(column) {
                        return Err(SqlError::UnknownColumn {
                            column: alloc::format!("{}.{}", q.value, column),
                            offset: c.name.offset,
                        });
                    }
                    self.bind(c.offset(), source, column, false);
                    return Ok(());
                }
                cur = s.parent;
            }
            return Err(SqlError::UnknownTable { table: q.value.clone(), offset: q.offset });
        }
        if allow_alias && scope.aliases.iter().any(|a| a == column) {
            self.bindings.push(Binding {
                offset: c.offset(),
                target: BindingTarget::OutputAlias(column.clone()),
                from_star: false,
            });
            return Ok(());
        }
        let mut cur = Some(scope);
        while let Some(s) = cur {
            let mut found = s.sources.iter().filter(|src| src.has(column));
            if let Some(first) = found.next() {
                if found.next().is_some() && !s.using.iter().any(|u| u == column) {
                    return Err(SqlError::AmbiguousColumn { column: column.clone(), offset: c.offset() });
                }
                self.bind(c.offset(), first, column, false);
                return Ok(());
            }
            cur = s.parent;
        }
        // SQLite also lets WHERE see select-list aliases.
        if scope.aliases.iter().any(|a| a == column) {
            self.bindings.push(Binding {
                offset: c.offset(),
                target: BindingTarget::OutputAlias(column.clone()),
                from_star: false,
            });
            return Ok(());
        }
        Err(SqlError::UnknownColumn { column: column.clone(), offset: c.offset() })
    }

    fn expr(&mut self, e: &Expr, scope: &Scope<'_>, allow_alias: bool) -> Result<(), SqlError> {
        match e {
            Expr::Column(c) => self.column(c, scope, allow_alias),
            Expr::Literal(_) => Ok(()),
            Expr::Unary { expr, .. } | Expr::Cast { expr, .. } | Expr::IsNull { expr, .. } => {
                self.expr(expr, scope, allow_alias)
            }
            Expr::Binary { left, right, .. } => {
                self.expr(left, scope, allow_alias)?;
                self.expr(right, scope, allow_alias)
            }
            Expr::Function { args, .. } => match args {
                FunctionArgs::Star => Ok(()),
                FunctionArgs::List { args, .. } => {
                    for a in args {
                        self.expr(a, scope, allow_alias)?;
                    }
                    Ok(())
                }
            },
            Expr::Case { operand, whens, otherwise } => {
                if let Some(o) = operand {
                    self.expr(o, scope, allow_alias)?;
                }
                for (w, t) in whens {
                    self.expr(w, scope, allow_alias)?;
                    self.expr(t, scope, allow_alias)?;
                }
                if let Some(o) = otherwise {
                    self.expr(o, scope, allow_alias)?;
                }
                Ok(())
            }
            Expr::Between { expr, low, high, .. } => {
                self.expr(expr, scope, allow_alias)?;
                self.expr(low, scope, allow_alias)?;
                self.expr(high, scope, allow_alias)
            }
            Expr::InList { expr, list, .. } => {
                self.expr(expr, scope, allow_alias)?;
                for x in list {
                    self.expr(x, scope, allow_alias)?;
                }
                Ok(())
            }
            Expr::InSubquery { expr, query, .. } => {
                self.expr(expr, scope, allow_alias)?;
                self.query(query, Some(scope)).map(|_| ())
            }
            Expr::Exists { query, .. } | Expr::Subquery(query) => self.query(query, Some(scope)).map(|_| ()),
        }
    }
}
