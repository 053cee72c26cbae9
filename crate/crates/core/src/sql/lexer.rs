use alloc::string::String;
use alloc::vec::Vec;

use super::SqlError;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    /// Bare or quoted identifier, or a keyword. Bare words keep their case.
    Word { text: String, quoted: bool },
    Number(String),
    Str(String),
    Comma,
    Dot,
    LParen,
    RParen,
    Star,
    Plus,
    Minus,
    Slash,
    Percent,
    Concat,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Semicolon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    /// Byte offset of the first character in the source text.
    pub offset: usize,
}

impl Token {
    /// True for an unquoted word equal (ignoring ASCII case) to `kw`.
    pub fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.kind, TokenKind::Word { text, quoted: false } if text.eq_ignore_ascii_case(kw))
    }
}

pub fn tokenize(src: &str) -> Result<Vec<Token>, SqlError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        // line comment
        if c == b'-' && bytes.get(i + 1) == Some(&b'-') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            match src[i + 2..].find("*/") {
                Some(end) => {
                    i += end + 4;
                    continue;
                }
                None => return Err(SqlError::syntax(start, "unterminated block comment")),
            }
        }
        let kind = if c.is_ascii_alphabetic() || c == b'_' || c >= 0x80 {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] >= 0x80) {
                i += 1;
            }
            TokenKind::Word { text: String::from(&src[start..i]), quoted: false }
        } else if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            TokenKind::Number(String::from(&src[start..i]))
        } else if c == b'\'' {
            let (text, end) = quoted_run(src, start, b'\'')?;
            i = end;
            TokenKind::Str(text)
        } else if c == b'"' || c == b'`' {
            let (text, end) = quoted_run(src, start, c)?;
            i = end;
            TokenKind::Word { text, quoted: true }
        } else if c == b'[' {
            match src[i + 1..].find(']') {
                Some(end) => {
                    i += end + 2;
                    TokenKind::Word { text: String::from(&src[start + 1..i - 1]), quoted: true }
                }
                None => return Err(SqlError::syntax(start, "unterminated bracketed identifier")),
            }
        } else {
            let next = bytes.get(i + 1).copied();
            let (kind, len) = match (c, next) {
                (b'|', Some(b'|')) => (TokenKind::Concat, 2),
                (b'!', Some(b'=')) => (TokenKind::Ne, 2),
                (b'<', Some(b'>')) => (TokenKind::Ne, 2),
                (b'<', Some(b'=')) => (TokenKind::Le, 2),
                (b'>', Some(b'=')) => (TokenKind::Ge, 2),
                (b'=', Some(b'=')) => (TokenKind::Eq, 2),
                (b',', _) => (TokenKind::Comma, 1),
                (b'.', _) => (TokenKind::Dot, 1),
                (b'(', _) => (TokenKind::LParen, 1),
                (b')', _) => (TokenKind::RParen, 1),
                (b'*', _) => (TokenKind::Star, 1),
                (b'+', _) => (TokenKind::Plus, 1),
                (b'-', _) => (TokenKind::Minus, 1),
                (b'/', _) => (TokenKind::Slash, 1),
                (b'%', _) => (TokenKind::Percent, 1),
                (b'=', _) => (TokenKind::Eq, 1),
                (b'<', _) => (TokenKind::Lt, 1),
                (b'>', _) => (TokenKind::Gt, 1),
                (b';', _) => (TokenKind::Semicolon, 1),
                _ => return Err(SqlError::syntax(start, "unexpected character")),
            };
            i += len;
            kind
        };
        out.push(Token { kind, offset: start });
    }
    Ok(out)
}

/// Reads a run delimited by `quote`, where a doubled quote escapes itself.
fn quoted_run(src: &str, start: usize, quote: u8) -> Result<(String, usize), SqlError> {
    let bytes = src.as_bytes();
    let mut text = String::new();
    let mut i = start + 1;
    let mut run_start = i;
    loop {
        match bytes.get(i) {
            None => return Err(SqlError::syntax(start, "unterminated quoted text")),
            Some(&b) if b == quote => {
                text.push_str(&src[run_start..i]);
                if bytes.get(i + 1) == Some(&quote) {
                    text.push(quote as char);
                    i += 2;
                    run_start = i;
                } else {
                    return Ok((text, i + 1));
                }
            }
            Some(_) => i += 1,
        }
    }
}
