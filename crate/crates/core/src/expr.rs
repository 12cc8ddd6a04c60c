//! Predicate / expression mini-language used by `filter` and `join`.
//!
//! Grammar (EBNF, keywords case-insensitive):
//!
//! ```text
//! expr     = or ;
//! or       = and , { "or" , and } ;
//! and      = not , { "and" , not } ;
//! not      = [ "not" ] , cmp ;
//! cmp      = term , [ cmp_op , term | "in" , term | "contains" , term ] ;
//! cmp_op   = "=" | "==" | "!=" | "<>" | "<" | "<=" | ">" | ">=" ;
//! term     = literal | ident | "(" , expr , ")" ;
//! literal  = number | string | "true" | "false" | "null" | "[" , [ literal , { "," , literal } ] , "]" ;
//! ident    = [A-Za-z_] , { [A-Za-z0-9_.] } ;
//! ```
//!
//! An identifier of the form `tN.name` reads attribute `name` from the row on
//! input port `N`; a bare identifier reads port 0.
//!
//! Evaluation never fails: a comparison touching a missing attribute or two
//! values of incompatible types is `false`, integers and floats compare
//! numerically, and boolean connectives treat anything but `true` as false.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::value::{compare_numeric, Row, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttrRef {
    pub port: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Lit(Value),
    Attr(AttrRef),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    In(Box<Expr>, Box<Expr>),
    Contains(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn attr(name: &str) -> Expr {
        Expr::Attr(AttrRef {
            port: 0,
            name: name.to_string(),
        })
    }

    /// Tree depth: literals and attribute references are depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Lit(_) | Expr::Attr(_) => 0,
            Expr::Not(e) => 1 + e.depth(),
            Expr::Cmp(_, a, b) | Expr::In(a, b) | Expr::Contains(a, b) | Expr::And(a, b) | Expr::Or(a, b) => {
                1 + a.depth().max(b.depth())
            }
        }
    }

    /// Every attribute reference, in left-to-right order.
    pub fn attributes(&self) -> Vec<&AttrRef> {
        let mut out = Vec::new();
        self.collect_attrs(&mut out);
        out
    }

    fn collect_attrs<'a>(&'a self, out: &mut Vec<&'a AttrRef>) {
        match self {
            Expr::Lit(_) => {}
            Expr::Attr(a) => out.push(a),
            Expr::Not(e) => e.collect_attrs(out),
            Expr::Cmp(_, a, b) | Expr::In(a, b) | Expr::Contains(a, b) | Expr::And(a, b) | Expr::Or(a, b) => {
                a.collect_attrs(out);
                b.collect_attrs(out);
            }
        }
    }

    /// Evaluates against one row per input port (`rows[i]` is port `i`).
    pub fn eval(&self, rows: &[&Row]) -> Value {
        match self.operand(rows) {
            Operand::Missing => Value::Null,
            Operand::Val(v) => v,
        }
    }

    /// `true` iff the expression evaluates to boolean true.
    pub fn test(&self, rows: &[&Row]) -> bool {
        matches!(self.operand(rows), Operand::Val(Value::Bool(true)))
    }

    fn operand(&self, rows: &[&Row]) -> Operand {
        match self {
            Expr::Lit(v) => Operand::Val(v.clone()),
            Expr::Attr(a) => rows
                .get(a.port)
                .and_then(|r| r.get(&a.name))
                .map_or(Operand::Missing, |v| Operand::Val(v.clone())),
            Expr::Cmp(op, a, b) => {
                let (Operand::Val(x), Operand::Val(y)) = (a.operand(rows), b.operand(rows)) else {
                    return Operand::Val(Value::Bool(false));
                };
                Operand::Val(Value::Bool(compare(*op, &x, &y)))
            }
            Expr::In(a, b) => {
                let hit = match (a.operand(rows), b.operand(rows)) {
                    (Operand::Val(x), Operand::Val(Value::List(items))) => items.iter().any(|i| i.loose_eq(&x)),
                    _ => false,
                };
                Operand::Val(Value::Bool(hit))
            }
            Expr::Contains(a, b) => {
                let hit = match (a.operand(rows), b.operand(rows)) {
                    (Operand::Val(Value::Str(h)), Operand::Val(Value::Str(n))) => h.contains(&n),
                    (Operand::Val(Value::List(items)), Operand::Val(x)) => items.iter().any(|i| i.loose_eq(&x)),
                    _ => false,
                };
                Operand::Val(Value::Bool(hit))
            }
            Expr::Not(e) => Operand::Val(Value::Bool(!e.operand(rows).truthy())),
            Expr::And(a, b) => Operand::Val(Value::Bool(a.operand(rows).truthy() && b.operand(rows).truthy())),
            Expr::Or(a, b) => Operand::Val(Value::Bool(a.operand(rows).truthy() || b.operand(rows).truthy())),
        }
    }
}

enum Operand {
    Missing,
    Val(Value),
}

impl Operand {
    fn truthy(&self) -> bool {
        matches!(self, Operand::Val(Value::Bool(true)))
    }
}

fn compare(op: CmpOp, x: &Value, y: &Value) -> bool {
    if let Some(ord) = compare_numeric(x, y) {
        return op.holds(ord);
    }
    match (x, y) {
        (Value::Str(a), Value::Str(b)) => op.holds(a.cmp(b)),
        (Value::Bool(a), Value::Bool(b)) => op.holds(a.cmp(b)),
        (Value::Null, Value::Null) => op == CmpOp::Eq,
        (Value::List(_), Value::List(_)) | (Value::Map(_), Value::Map(_)) => match op {
            CmpOp::Eq => x.loose_eq(y),
            CmpOp::Ne => !x.loose_eq(y),
            _ => false,
        },
        _ => false,
    }
}

/// Parses an expression, reporting the byte offset of the first bad token.
pub fn parse_expression(text: &str) -> Result<Expr> {
    let tokens = lex(text)?;
    let mut p = Parser { tokens, pos: 0 };
    let e = p.expr()?;
    match p.peek() {
        (Tok::Eof, _) => Ok(e),
        (_, off) => Err(syntax(off, "unexpected trailing input")),
    }
}

fn syntax(offset: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        offset,
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Lit(Value),
    Op(CmpOp),
    And,
    Or,
    Not,
    In,
    Contains,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Eof,
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'(' => out.push((Tok::LParen, start)),
            b')' => out.push((Tok::RParen, start)),
            b'[' => out.push((Tok::LBracket, start)),
            b']' => out.push((Tok::RBracket, start)),
            b',' => out.push((Tok::Comma, start)),
            b'=' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    i += 1;
                }
                out.push((Tok::Op(CmpOp::Eq), start));
            }
            b'!' => {
                if bytes.get(i + 1) != Some(&b'=') {
                    return Err(syntax(start, "expected `!=`"));
                }
                i += 1;
                out.push((Tok::Op(CmpOp::Ne), start));
            }
            b'<' => match bytes.get(i + 1) {
                Some(b'=') => {
                    i += 1;
                    out.push((Tok::Op(CmpOp::Le), start));
                }
                Some(b'>') => {
                    i += 1;
                    out.push((Tok::Op(CmpOp::Ne), start));
                }
                _ => out.push((Tok::Op(CmpOp::Lt), start)),
            },
            b'>' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    i += 1;
                    out.push((Tok::Op(CmpOp::Ge), start));
                } else {
                    out.push((Tok::Op(CmpOp::Gt), start));
                }
            }
            b'"' | b'\'' => {
                let (s, end) = lex_string(text, i)?;
                out.push((Tok::Lit(Value::Str(s)), start));
                i = end;
                continue;
            }
            b'-' | b'0'..=b'9' => {
                let (v, end) = lex_number(text, i)?;
                out.push((Tok::Lit(v), start));
                i = end;
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut j = i + 1;
                while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_' || bytes[j] == b'.') {
                    j += 1;
                }
                let word = &text[i..j];
                let tok = match word.to_ascii_lowercase().as_str() {
                    "and" => Tok::And,
                    "or" => Tok::Or,
                    "not" => Tok::Not,
                    "in" => Tok::In,
                    "contains" => Tok::Contains,
                    "true" => Tok::Lit(Value::Bool(true)),
                    "false" => Tok::Lit(Value::Bool(false)),
                    "null" => Tok::Lit(Value::Null),
                    _ => Tok::Ident(word.to_string()),
                };
                out.push((tok, start));
                i = j;
                continue;
            }
            _ => {
                return Err(syntax(
                    start,
                    format!("unexpected character `{}`", text[i..].chars().next().unwrap_or('?')),
                ))
            }
        }
        i += 1;
    }
    out.push((Tok::Eof, text.len()));
    Ok(out)
}

fn lex_string(text: &str, start: usize) -> Result<(String, usize)> {
    let quote = text.as_bytes()[start] as char;
    let mut out = String::new();
    let mut chars = text[start + 1..].char_indices().peekable();
    while let Some((off, c)) = chars.next() {
        let at = start + 1 + off;
        match c {
            c if c == quote => return Ok((out, at + 1)),
            '\\' => {
                let Some((_, e)) = chars.next() else {
                    return Err(syntax(at, "unterminated escape"));
                };
                match e {
                    '\\' => out.push('\\'),
                    '"' => out.push('"'),
                    '\'' => out.push('\''),
                    '/' => out.push('/'),
                    'n' => out.push('\n'),
                    't' => out.push('\t'),
                    'r' => out.push('\r'),
                    'b' => out.push('\u{8}'),
                    'f' => out.push('\u{c}'),
                    'u' => {
                        let mut code = read_hex4(&mut chars).ok_or_else(|| syntax(at, "bad \\u escape"))?;
                        if (0xD800..0xDC00).contains(&code) {
                            // surrogate pair
                            let ok = matches!(chars.next(), Some((_, '\\'))) && matches!(chars.next(), Some((_, 'u')));
                            let low = if ok { read_hex4(&mut chars) } else { None };
                            match low {
                                Some(l) if (0xDC00..0xE000).contains(&l) => {
                                    code = 0x10000 + ((code - 0xD800) << 10) + (l - 0xDC00);
                                }
                                _ => return Err(syntax(at, "invalid surrogate pair")),
                            }
                        }
                        out.push(char::from_u32(code).ok_or_else(|| syntax(at, "invalid code point"))?);
                    }
                    _ => return Err(syntax(at, format!("unknown escape `\\{e}`"))),
                }
            }
            c => out.push(c),
        }
    }
    Err(syntax(start, "unterminated string"))
}

fn read_hex4(chars: &mut std::iter::Peekable<std::str::CharIndices<'_>>) -> Option<u32> {
    let mut code = 0u32;
    for _ in 0..4 {
        let (_, h) = chars.next()?;
        code = code * 16 + h.to_digit(16)?;
    }
    Some(code)
}

fn lex_number(text: &str, start: usize) -> Result<(Value, usize)> {
    let bytes = text.as_bytes();
    let mut j = start;
    if bytes[j] == b'-' {
        j += 1;
    }
    let digits_start = j;
    while j < bytes.len() && bytes[j].is_ascii_digit() {
        j += 1;
    }
    if j == digits_start {
        return Err(syntax(start, "expected digits"));
    }
    let mut is_float = false;
    if j < bytes.len() && bytes[j] == b'.' {
        let frac = j + 1;
        let mut k = frac;
        while k < bytes.len() && bytes[k].is_ascii_digit() {
            k += 1;
        }
        if k == frac {
            return Err(syntax(j, "expected digits after `.`"));
        }
        is_float = true;
        j = k;
    }
    if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
        let mut k = j + 1;
        if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
            k += 1;
        }
        let exp = k;
        while k < bytes.len() && bytes[k].is_ascii_digit() {
            k += 1;
        }
        if k == exp {
            return Err(syntax(j, "expected exponent digits"));
        }
        is_float = true;
        j = k;
    }
    if j < bytes.len() && (bytes[j].is_ascii_alphabetic() || bytes[j] == b'_') {
        return Err(syntax(j, "unexpected character after number"));
    }
    let lit = &text[start..j];
    let v = if is_float {
        lit.parse::<f64>()
            .ok()
            .and_then(Value::float)
            .ok_or_else(|| syntax(start, "float literal out of range"))?
    } else {
        Value::Int(
            lit.parse::<i64>()
                .map_err(|_| syntax(start, "integer literal out of range"))?,
        )
    };
    Ok((v, j))
}

struct Parser {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> (&Tok, usize) {
        let (t, o) = &self.tokens[self.pos];
        (t, *o)
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.and()?;
        while matches!(self.peek().0, Tok::Or) {
            self.bump();
            let rhs = self.and()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr> {
        let mut lhs = self.not()?;
        while matches!(self.peek().0, Tok::And) {
            self.bump();
            let rhs = self.not()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr> {
        if matches!(self.peek().0, Tok::Not) {
            self.bump();
            return Ok(Expr::Not(Box::new(self.cmp()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr> {
        let lhs = self.term()?;
        match self.peek().0.clone() {
            Tok::Op(op) => {
                self.bump();
                Ok(Expr::Cmp(op, Box::new(lhs), Box::new(self.term()?)))
            }
            Tok::In => {
                self.bump();
                Ok(Expr::In(Box::new(lhs), Box::new(self.term()?)))
            }
            Tok::Contains => {
                self.bump();
                Ok(Expr::Contains(Box::new(lhs), Box::new(self.term()?)))
            }
            _ => Ok(lhs),
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let (tok, off) = self.bump();
        match tok {
            Tok::Lit(v) => Ok(Expr::Lit(v)),
            Tok::LBracket => Ok(Expr::Lit(self.list_rest()?)),
            Tok::Ident(name) => Ok(Expr::Attr(split_port(&name))),
            Tok::LParen => {
                let e = self.expr()?;
                match self.bump() {
                    (Tok::RParen, _) => Ok(e),
                    (_, o) => Err(syntax(o, "expected `)`")),
                }
            }
            Tok::Eof => Err(syntax(off, "unexpected end of input")),
            _ => Err(syntax(off, "expected a literal, identifier or `(`")),
        }
    }

    fn literal(&mut self) -> Result<Value> {
        match self.bump() {
            (Tok::Lit(v), _) => Ok(v),
            (Tok::LBracket, _) => self.list_rest(),
            (_, o) => Err(syntax(o, "expected a literal")),
        }
    }

    fn list_rest(&mut self) -> Result<Value> {
        let mut items = Vec::new();
        if matches!(self.peek().0, Tok::RBracket) {
            self.bump();
            return Ok(Value::List(items));
        }
        loop {
            items.push(self.literal()?);
            match self.bump() {
                (Tok::Comma, _) => continue,
                (Tok::RBracket, _) => return Ok(Value::List(items)),
                (_, o) => return Err(syntax(o, "expected `,` or `]`")),
            }
        }
    }
}

fn split_port(ident: &str) -> AttrRef {
    if let Some(rest) = ident.strip_prefix('t') {
        if let Some((digits, name)) = rest.split_once('.') {
            if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) && !name.is_empty() {
                if let Ok(port) = digits.parse() {
                    return AttrRef {
                        port,
                        name: name.to_string(),
                    };
                }
            }
        }
    }
    AttrRef {
        port: 0,
        name: ident.to_string(),
    }
}

fn looks_port_prefixed(name: &str) -> bool {
    split_port(name).name != name
}

impl fmt::Display for AttrRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.port == 0 && !looks_port_prefixed(&self.name) {
            f.write_str(&self.name)
        } else {
            write!(f, "t{}.{}", self.port, self.name)
        }
    }
}

fn fmt_literal(v: &Value, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match v {
        Value::Str(s) => f.write_str(&serde_json::to_string(s).map_err(|_| fmt::Error)?),
        Value::List(items) => {
            f.write_str("[")?;
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                fmt_literal(item, f)?;
            }
            f.write_str("]")
        }
        other => write!(f, "{other}"),
    }
}

/// Fully parenthesized form; re-parsing it yields an equal tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(v) => fmt_literal(v, f),
            Expr::Attr(a) => write!(f, "{a}"),
            Expr::Cmp(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::In(a, b) => write!(f, "({a} in {b})"),
            Expr::Contains(a, b) => write!(f, "({a} contains {b})"),
            Expr::Not(e) => write!(f, "(not {e})"),
            Expr::And(a, b) => write!(f, "({a} and {b})"),
            Expr::Or(a, b) => write!(f, "({a} or {b})"),
        }
    }
}
