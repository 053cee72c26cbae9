use alloc::boxed::Box;
use alloc::vec::Vec;

use super::ast::*;
use super::lexer::{tokenize, Token, TokenKind};
use super::SqlError;

/// Words that terminate an expression or cannot start an implicit alias.
const RESERVED: &[&str] = &[
    "select", "from", "where", "group", "by", "having", "order", "limit", "offset", "union",
    "intersect", "except", "all", "join", "inner", "left", "right", "full", "outer", "cross",
    "natural", "on", "using", "as", "and", "or", "not", "in", "is", "null", "like", "between",
    "exists", "case", "when", "then", "else", "end", "asc", "desc", "distinct", "with", "over",
    "window", "cast",
];

fn is_reserved(word: &str) -> bool {
    RESERVED.iter().any(|r| r.eq_ignore_ascii_case(word))
}

/// Parses one statement. A trailing `;` is accepted.
pub fn parse_sql(text: &str) -> Result<SqlAst, SqlError> {
    if text.trim().is_empty() {
        return Err(SqlError::syntax(0, "empty statement"));
    }
    let tokens = tokenize(text)?;
    let mut p = Parser { tokens, pos: 0, end_offset: text.len() };
    let root = p.query()?;
    while p.eat(&TokenKind::Semicolon) {}
    if let Some(t) = p.peek() {
        return Err(SqlError::syntax(t.offset, "unexpected trailing input"));
    }
    Ok(SqlAst { root })
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    end_offset: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_at(&self, k: usize) -> Option<&Token> {
        self.tokens.get(self.pos + k)
    }

    fn offset(&self) -> usize {
        self.peek().map_or(self.end_offset, |t| t.offset)
    }

    fn error<T>(&self, msg: &str) -> Result<T, SqlError> {
        Err(SqlError::syntax(self.offset(), msg))
    }

    fn at_kw(&self, kw: &str) -> bool {
        self.peek().is_some_and(|t| t.is_keyword(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.at_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), SqlError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.error(&alloc::format!("expected {}", kw.to_ascii_uppercase()))
        }
    }

    fn at(&self, kind: &TokenKind) -> bool {
        self.peek().is_some_and(|t| &t.kind == kind)
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if self.at(kind) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, kind: &TokenKind, what: &str) -> Result<(), SqlError> {
        if self.eat(kind) {
            Ok(())
        } else {
            self.error(&alloc::format!("expected {what}"))
        }
    }

    fn ident(&mut self) -> Result<Ident, SqlError> {
        match self.peek() {
            Some(Token { kind: TokenKind::Word { text, quoted }, offset }) if *quoted || !is_reserved(text) => {
                let id = Ident { value: text.to_ascii_lowercase(), offset: *offset };
                self.pos += 1;
                Ok(id)
            }
            _ => self.error("expected identifier"),
        }
    }

    fn optional_alias(&mut self) -> Result<Option<Ident>, SqlError> {
        if self.eat_kw("as") {
            return match self.peek() {
                Some(Token { kind: TokenKind::Str(s), offset }) => {
                    let id = Ident { value: s.to_ascii_lowercase(), offset: *offset };
                    self.pos += 1;
                    Ok(Some(id))
                }
                _ => self.ident().map(Some),
            };
        }
        match self.peek() {
            Some(Token { kind: TokenKind::Word { text, quoted }, .. }) if *quoted || !is_reserved(text) => {
                self.ident().map(Some)
            }
            _ => Ok(None),
        }
    }

    fn query(&mut self) -> Result<Query, SqlError> {
        if self.at_kw("with") {
            return Err(SqlError::Unsupported { offset: self.offset(), feature: "common table expressions" });
        }
        let body = self.set_expr()?;
        let mut order_by = Vec::new();
        if self.eat_kw("order") {
            self.expect_kw("by")?;
            loop {
                let expr = self.expr()?;
                let desc = if self.eat_kw("desc") {
                    true
                } else {
                    self.eat_kw("asc");
                    false
                };
                order_by.push(OrderItem { expr, desc });
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
        }
        let limit = if self.eat_kw("limit") {
            let count = self.expr()?;
            let offset = if self.eat_kw("offset") || self.eat(&TokenKind::Comma) {
                Some(self.expr()?)
            } else {
                None
            };
            Some(Limit { count, offset })
        } else {
            None
        };
        Ok(Query { body, order_by, limit })
    }

    fn set_expr(&mut self) -> Result<SetExpr, SqlError> {
        let mut left = SetExpr::Select(Box::new(self.select()?));
        loop {
            let op = if self.eat_kw("union") {
                SetOperator::Union
            } else if self.eat_kw("intersect") {
                SetOperator::Intersect
            } else if self.eat_kw("except") {
                SetOperator::Except
            } else {
                return Ok(left);
            };
            let all = self.eat_kw("all");
            let right = SetExpr::Select(Box::new(self.select()?));
            left = SetExpr::SetOp { op, all, left: Box::new(left), right: Box::new(right) };
        }
    }

    fn select(&mut self) -> Result<Select, SqlError> {
        // `(SELECT ...) UNION ...` style parenthesised operands are not part of the subset
        self.expect_kw("select")?;
        let distinct = self.eat_kw("distinct");
        if !distinct {
            self.eat_kw("all");
        }
        let mut items = Vec::new();
        loop {
            items.push(self.select_item()?);
            if !self.eat(&TokenKind::Comma) {
                break;
            }
        }
        let from = if self.eat_kw("from") { Some(self.from_clause()?) } else { None };
        let selection = if self.eat_kw("where") { Some(self.expr()?) } else { None };
        let mut group_by = Vec::new();
        if self.eat_kw("group") {
            self.expect_kw("by")?;
            loop {
                group_by.push(self.expr()?);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
        }
        let having = if self.eat_kw("having") { Some(self.expr()?) } else { None };
        if self.at_kw("window") {
            return Err(SqlError::Unsupported { offset: self.offset(), feature: "window functions" });
        }
        Ok(Select { distinct, items, from, selection, group_by, having })
    }

    fn select_item(&mut self) -> Result<SelectItem, SqlError> {
        if let Some(t) = self.peek() {
            if t.kind == TokenKind::Star {
                let offset = t.offset;
                self.pos += 1;
                return Ok(SelectItem::Wildcard { offset });
            }
        }
        let qualified_star = matches!(self.peek().map(|t| &t.kind), Some(TokenKind::Word { .. }))
            && self.peek_at(1).is_some_and(|t| t.kind == TokenKind::Dot)
            && self.peek_at(2).is_some_and(|t| t.kind == TokenKind::Star);
        if qualified_star {
            let qualifier = self.ident()?;
            self.pos += 2;
            return Ok(SelectItem::QualifiedWildcard { qualifier });
        }
        let expr = self.expr()?;
        let alias = self.optional_alias()?;
        Ok(SelectItem::Expr { expr, alias })
    }

    fn from_clause(&mut self) -> Result<FromClause, SqlError> {
        let base = self.table_factor()?;
        let mut joins = Vec::new();
        loop {
            let kind = if self.eat(&TokenKind::Comma) {
                JoinKind::Comma
            } else if self.at_kw("natural") || self.at_kw("right") || self.at_kw("full") {
                return Err(SqlError::Unsupported { offset: self.offset(), feature: "natural/right/full joins" });
            } else if self.eat_kw("join") {
                JoinKind::Inner
            } else if self.eat_kw("inner") {
                self.expect_kw("join")?;
                JoinKind::Inner
            } else if self.eat_kw("left") {
                self.eat_kw("outer");
                self.expect_kw("join")?;
                JoinKind::Left
            } else if self.eat_kw("cross") {
                self.expect_kw("join")?;
                JoinKind::Cross
            } else {
                break;
            };
            let factor = self.table_factor()?;
            let constraint = if kind == JoinKind::Comma {
                JoinConstraint::None
            } else if self.eat_kw("on") {
                JoinConstraint::On(self.expr()?)
            } else if self.eat_kw("using") {
                self.expect(&TokenKind::LParen, "(")?;
                let mut cols = Vec::new();
                loop {
                    cols.push(self.ident()?);
                    if !self.eat(&TokenKind::Comma) {
                        break;
                    }
                }
                self.expect(&TokenKind::RParen, ")")?;
                JoinConstraint::Using(cols)
            } else {
                JoinConstraint::None
            };
            joins.push(Join { kind, factor, constraint });
        }
        Ok(FromClause { base, joins })
    }

    fn table_factor(&mut self) -> Result<TableFactor, SqlError> {
        if self.at(&TokenKind::LParen) {
            let offset = self.offset();
            self.pos += 1;
            if !self.at_kw("select") && !self.at_kw("with") {
                return self.error("expected subquery");
            }
            let query = self.query()?;
            self.expect(&TokenKind::RParen, ")")?;
            let alias = self.optional_alias()?;
            return Ok(TableFactor::Derived { query: Box::new(query), alias, offset });
        }
        let name = self.ident()?;
        let alias = self.optional_alias()?;
        Ok(TableFactor::Table { name, alias })
    }

    fn expr(&mut self) -> Result<Expr, SqlError> {
        self.or_expr()
    }

    fn or_expr(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.and_expr()?;
        while self.eat_kw("or") {
            let right = self.and_expr()?;
            left = Expr::Binary { op: BinaryOp::Or, left: Box::new(left), right: Box::new(right) };
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.not_expr()?;
        while self.eat_kw("and") {
            let right = self.not_expr()?;
            left = Expr::Binary { op: BinaryOp::And, left: Box::new(left), right: Box::new(right) };
        }
        Ok(left)
    }

    fn not_expr(&mut self) -> Result<Expr, SqlError> {
        if self.at_kw("not") && !self.peek_at(1).is_some_and(|t| t.is_keyword("exists")) {
            self.pos += 1;
            let inner = self.not_expr()?;
            return Ok(Expr::Unary { op: UnaryOp::Not, expr: Box::new(inner) });
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, SqlError> {
        let left = self.additive()?;
        let op = match self.peek().map(|t| &t.kind) {
            Some(TokenKind::Eq) => Some(BinaryOp::Eq),
            Some(TokenKind::Ne) => Some(BinaryOp::Ne),
            Some(TokenKind::Lt) => Some(BinaryOp::Lt),
            Some(TokenKind::Le) => Some(BinaryOp::Le),
            Some(TokenKind::Gt) => Some(BinaryOp::Gt),
            Some(TokenKind::Ge) => Some(BinaryOp::Ge),
            _ => None,
        };
        if let Some(op) = op {
            self.pos += 1;
            let right = self.additive()?;
            return Ok(Expr::Binary { op, left: Box::new(left), right: Box::new(right) });
        }
        if self.eat_kw("is") {
            let negated = self.eat_kw("not");
            self.expect_kw("null")?;
            return Ok(Expr::IsNull { expr: Box::new(left), negated });
        }
        let negated = if self.at_kw("not")
            && self
                .peek_at(1)
                .is_some_and(|t| t.is_keyword("like") || t.is_keyword("in") || t.is_keyword("between"))
        {
            self.pos += 1;
            true
        } else {
            false
        };
        if self.eat_kw("like") {
            let right = self.additive()?;
            let op = if negated { BinaryOp::NotLike } else { BinaryOp::Like };
            return Ok(Expr::Binary { op, left: Box::new(left), right: Box::new(right) });
        }
        if self.eat_kw("between") {
            let low = self.additive()?;
            self.expect_kw("and")?;
            let high = self.additive()?;
            return Ok(Expr::Between { expr: Box::new(left), low: Box::new(low), high: Box::new(high), negated });
        }
        if self.eat_kw("in") {
            self.expect(&TokenKind::LParen, "(")?;
            if self.at_kw("select") {
                let query = self.query()?;
                self.expect(&TokenKind::RParen, ")")?;
                return Ok(Expr::InSubquery { expr: Box::new(left), query: Box::new(query), negated });
            }
            let mut list = Vec::new();
            if !self.at(&TokenKind::RParen) {
                loop {
                    list.push(self.expr()?);
                    if !self.eat(&TokenKind::Comma) {
                        break;
                    }
                }
            }
            self.expect(&TokenKind::RParen, ")")?;
            return Ok(Expr::InList { expr: Box::new(left), list, negated });
        }
        if negated {
            return self.error("expected LIKE, IN or BETWEEN after NOT");
        }
        Ok(left)
    }

    fn additive(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.multiplicative()?;
        loop {
            let op = match self.peek().map(|t| &t.kind) {
                Some(TokenKind::Plus) => BinaryOp::Add,
                Some(TokenKind::Minus) => BinaryOp::Sub,
                Some(TokenKind::Concat) => BinaryOp::Concat,
                _ => return Ok(left),
            };
            self.pos += 1;
            let right = self.multiplicative()?;
            left = Expr::Binary { op, left: Box::new(left), right: Box::new(right) };
        }
    }

    fn multiplicative(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.unary()?;
        loop {
            let op = match self.peek().map(|t| &t.kind) {
                Some(TokenKind::Star) => BinaryOp::Mul,
                Some(TokenKind::Slash) => BinaryOp::Div,
                Some(TokenKind::Percent) => BinaryOp::Mod,
                _ => return Ok(left),
            };
            self.pos += 1;
            let right = self.unary()?;
            left = Expr::Binary { op, left: Box::new(left), right: Box::new(right) };
        }
    }

    fn unary(&mut self) -> Result<Expr, SqlError> {
        let op = match self.peek().map(|t| &t.kind) {
            Some(TokenKind::Minus) => UnaryOp::Neg,
            Some(TokenKind::Plus) => UnaryOp::Plus,
            _ => return self.primary(),
        };
        self.pos += 1;
        let inner = self.unary()?;
        Ok(Expr::Unary { op, expr: Box::new(inner) })
    }

    fn primary(&mut self) -> Result<Expr, SqlError> {
        let Some(tok) = self.peek().cloned() else {
            return self.error("unexpected end of input");
        };
        match tok.kind {
            TokenKind::Number(n) => {
                self.pos += 1;
                Ok(Expr::Literal(Literal::Number(n)))
            }
            TokenKind::Str(s) => {
                self.pos += 1;
                Ok(Expr::Literal(Literal::Str(s)))
            }
            TokenKind::LParen => {
                self.pos += 1;
                if self.at_kw("select") {
                    let q = self.query()?;
                    self.expect(&TokenKind::RParen, ")")?;
                    return Ok(Expr::Subquery(Box::new(q)));
                }
                let e = self.expr()?;
                self.expect(&TokenKind::RParen, ")")?;
                Ok(e)
            }
            TokenKind::Word { ref text, quoted } => {
                if !quoted {
                    if text.eq_ignore_ascii_case("null") {
                        self.pos += 1;
                        return Ok(Expr::Literal(Literal::Null));
                    }
                    if text.eq_ignore_ascii_case("exists") || text.eq_ignore_ascii_case("not") {
                        let negated = self.eat_kw("not");
                        self.expect_kw("exists")?;
                        self.expect(&TokenKind::LParen, "(")?;
                        let q = self.query()?;
                        self.expect(&TokenKind::RParen, ")")?;
                        return Ok(Expr::Exists { query: Box::new(q), negated });
                    }
                    if text.eq_ignore_ascii_case("case") {
                        return self.case_expr();
                    }
                    if text.eq_ignore_ascii_case("cast") {
                        self.pos += 1;
                        self.expect(&TokenKind::LParen, "(")?;
                        let e = self.expr()?;
                        self.expect_kw("as")?;
                        let ty = self.ident()?.value;
                        self.expect(&TokenKind::RParen, ")")?;
                        return Ok(Expr::Cast { expr: Box::new(e), ty });
                    }
                }
                if self.peek_at(1).is_some_and(|t| t.kind == TokenKind::LParen) && !quoted {
                    return self.function_call();
                }
                let first = self.ident()?;
                if self.eat(&TokenKind::Dot) {
                    let name = self.ident()?;
                    return Ok(Expr::Column(ColumnRef { qualifier: Some(first), name }));
                }
                Ok(Expr::Column(ColumnRef { qualifier: None, name: first }))
            }
            _ => self.error("expected expression"),
        }
    }

    fn function_call(&mut self) -> Result<Expr, SqlError> {
        let name = match self.peek() {
            Some(Token { kind: TokenKind::Word { text, .. }, offset }) => {
                Ident { value: text.to_ascii_lowercase(), offset: *offset }
            }
            _ => return self.error("expected function name"),
        };
        self.pos += 2;
        let args = if self.at(&TokenKind::Star) {
            self.pos += 1;
            FunctionArgs::Star
        } else {
            let distinct = self.eat_kw("distinct");
            let mut args = Vec::new();
            if !self.at(&TokenKind::RParen) {
                loop {
                    args.push(self.expr()?);
                    if !self.eat(&TokenKind::Comma) {
                        break;
                    }
                }
            }
            FunctionArgs::List { distinct, args }
        };
        self.expect(&TokenKind::RParen, ")")?;
        if self.at_kw("over") || self.at_kw("filter") {
            return Err(SqlError::Unsupported { offset: self.offset(), feature: "window functions" });
        }
        Ok(Expr::Function { name, args })
    }

    fn case_expr(&mut self) -> Result<Expr, SqlError> {
        self.expect_kw("case")?;
        let operand = if self.at_kw("when") { None } else { Some(Box::new(self.expr()?)) };
        let mut whens = Vec::new();
        while self.eat_kw("when") {
            let cond = self.expr()?;
            self.expect_kw("then")?;
            let value = self.expr()?;
            whens.push((cond, value));
        }
        if whens.is_empty() {
            return self.error("expected WHEN");
        }
        let otherwise = if self.eat_kw("else") { Some(Box::new(self.expr()?)) } else { None };
        self.expect_kw("end")?;
        Ok(Expr::Case { operand, whens, otherwise })
    }
}

impl core::fmt::Display for Ident {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.value)
    }
}
