//! Rule condition language.
//!
//! ```text
//! expr    := and ("||" and)*
//! and     := unary ("&&" unary)*
//! unary   := "!" unary | compare
//! compare := atom (("==" | "!=" | "<" | "<=" | ">" | ">=") atom)?
//! atom    := literal | path | "exists(" path ")" | "(" expr ")"
//! literal := true | false | null | number | "string" | 'string'
//! path    := ident ("." ident)*
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PATH_ROOTS: [&str; 3] = ["event", "ensemble", "state"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum ExprError {
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("type error: {0}")]
    Type(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum EvalError {
    #[error("missing field {0}")]
    MissingField(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn as_str(self) -> &'static str {
        match self {
            Self::Eq => "==",
            Self::Ne => "!=",
            Self::Lt => "<",
            Self::Le => "<=",
            Self::Gt => ">",
            Self::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Literal(Value),
    Path(Vec<String>),
    Exists(Vec<String>),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Compare(CmpOp, Box<Expr>, Box<Expr>),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Literal(v) => write!(f, "{v}"),
            Self::Path(p) => f.write_str(&p.join(".")),
            Self::Exists(p) => write!(f, "exists({})", p.join(".")),
            Self::Not(e) => write!(f, "!({e})"),
            Self::And(a, b) => write!(f, "({a} && {b})"),
            Self::Or(a, b) => write!(f, "({a} || {b})"),
            Self::Compare(op, a, b) => write!(f, "{a} {} {b}", op.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Str(String),
    Op(&'static str),
    LParen,
    RParen,
    Dot,
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |offset, message: &str| ExprError::Parse { offset, message: message.to_string() };
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let two = src.get(i..i + 2).unwrap_or("");
        let op = ["==", "!=", "<=", ">=", "&&", "||"].into_iter().find(|o| *o == two);
        if let Some(op) = op {
            out.push((start, Tok::Op(op)));
            i += 2;
            continue;
        }
        match c {
            '(' => out.push((start, Tok::LParen)),
            ')' => out.push((start, Tok::RParen)),
            '.' => out.push((start, Tok::Dot)),
            '!' => out.push((start, Tok::Op("!"))),
            '<' => out.push((start, Tok::Op("<"))),
            '>' => out.push((start, Tok::Op(">"))),
            '"' | '\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match bytes.get(i).map(|b| *b as char) {
                        None => return Err(err(start, "unterminated string")),
                        Some('\\') => {
                            let next = src[i + 1..].chars().next().ok_or_else(|| err(i, "dangling escape"))?;
                            s.push(next);
                            i += 1 + next.len_utf8();
                        }
                        Some(q) if q == c => break,
                        Some(_) => {
                            let ch = src[i..].chars().next().expect("in bounds");
                            s.push(ch);
                            i += ch.len_utf8();
                        }
                    }
                }
                out.push((start, Tok::Str(s)));
            }
            c if c.is_ascii_digit() || (c == '-' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) => {
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.' || bytes[i] == b'e' || bytes[i] == b'E') {
                    i += 1;
                }
                let n = src[start..i].parse().map_err(|_| err(start, "bad number"))?;
                out.push((start, Tok::Num(n)));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((start, Tok::Ident(src[start..i].to_string())));
                continue;
            }
            _ => return Err(err(start, &format!("unexpected character {c:?}"))),
        }
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |t| t.0)
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Parse { offset: self.offset(), message: message.into() })
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn or(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.and()?;
        while self.eat(&Tok::Op("||")) {
            lhs = Expr::Or(Box::new(lhs), Box::new(self.and()?));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while self.eat(&Tok::Op("&&")) {
            lhs = Expr::And(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(&Tok::Op("!")) {
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        self.compare()
    }

    fn compare(&mut self) -> Result<Expr, ExprError> {
        let lhs = self.atom()?;
        let op = match self.peek() {
            Some(Tok::Op("==")) => CmpOp::Eq,
            Some(Tok::Op("!=")) => CmpOp::Ne,
            Some(Tok::Op("<")) => CmpOp::Lt,
            Some(Tok::Op("<=")) => CmpOp::Le,
            Some(Tok::Op(">")) => CmpOp::Gt,
            Some(Tok::Op(">=")) => CmpOp::Ge,
            _ => return Ok(lhs),
        };
        self.pos += 1;
        Ok(Expr::Compare(op, Box::new(lhs), Box::new(self.atom()?)))
    }

    fn path(&mut self, first: String) -> Result<Vec<String>, ExprError> {
        let mut path = vec![first];
        while self.eat(&Tok::Dot) {
            match self.peek().cloned() {
                Some(Tok::Ident(s)) => {
                    self.pos += 1;
                    path.push(s);
                }
                _ => return self.fail("expected field name after '.'"),
            }
        }
        Ok(path)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let Some(tok) = self.peek().cloned() else { return self.fail("unexpected end of expression") };
        self.pos += 1;
        match tok {
            Tok::Num(n) => Ok(Expr::Literal(Value::from(n))),
            Tok::Str(s) => Ok(Expr::Literal(Value::String(s))),
            Tok::LParen => {
                let e = self.or()?;
                if !self.eat(&Tok::RParen) {
                    return self.fail("expected ')'");
                }
                Ok(e)
            }
            Tok::Ident(id) => match id.as_str() {
                "true" => Ok(Expr::Literal(Value::Bool(true))),
                "false" => Ok(Expr::Literal(Value::Bool(false))),
                "null" => Ok(Expr::Literal(Value::Null)),
                "exists" if self.peek() == Some(&Tok::LParen) => {
                    self.pos += 1;
                    let Some(Tok::Ident(first)) = self.peek().cloned() else { return self.fail("exists() takes a field path") };
                    self.pos += 1;
                    let path = self.path(first)?;
                    if !self.eat(&Tok::RParen) {
                        return self.fail("expected ')'");
                    }
                    Ok(Expr::Exists(path))
                }
                _ => Ok(Expr::Path(self.path(id)?)),
            },
            _ => {
                self.pos -= 1;
                self.fail("expected a value, field or '('")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Bool,
    Number,
    Text,
    Null,
    Any,
}

fn type_of(e: &Expr) -> Result<Ty, ExprError> {
    let boolean = |e: &Expr, ctx: &str| match type_of(e)? {
        Ty::Bool | Ty::Any => Ok(Ty::Bool),
        other => Err(ExprError::Type(format!("operand of {ctx} must be boolean, found {other:?} in `{e}`"))),
    };
    match e {
        Expr::Literal(Value::Bool(_)) => Ok(Ty::Bool),
        Expr::Literal(Value::Number(_)) => Ok(Ty::Number),
        Expr::Literal(Value::String(_)) => Ok(Ty::Text),
        Expr::Literal(_) => Ok(Ty::Null),
        Expr::Path(p) | Expr::Exists(p) => {
            if !PATH_ROOTS.contains(&p[0].as_str()) || p.len() < 2 {
                return Err(ExprError::Type(format!("field `{}` must start with one of {PATH_ROOTS:?}", p.join("."))));
            }
            Ok(if matches!(e, Expr::Exists(_)) { Ty::Bool } else { Ty::Any })
        }
        Expr::Not(x) => boolean(x, "!"),
        Expr::And(a, b) => boolean(a, "&&").and(boolean(b, "&&")),
        Expr::Or(a, b) => boolean(a, "||").and(boolean(b, "||")),
        Expr::Compare(op, a, b) => {
            let (ta, tb) = (type_of(a)?, type_of(b)?);
            let known = |t| t != Ty::Any;
            if known(ta) && known(tb) && ta != tb && ta != Ty::Null && tb != Ty::Null {
                return Err(ExprError::Type(format!("cannot compare {ta:?} with {tb:?} in `{e}`")));
            }
            if !matches!(op, CmpOp::Eq | CmpOp::Ne) && [ta, tb].iter().any(|t| matches!(t, Ty::Bool | Ty::Null)) {
                return Err(ExprError::Type(format!("ordering needs numbers or strings in `{e}`")));
            }
            Ok(Ty::Bool)
        }
    }
}

/// A parsed, type-checked boolean condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Condition {
    source: String,
    expr: Expr,
}

impl Condition {
    pub fn parse(source: &str) -> Result<Self, ExprError> {
        let toks = lex(source)?;
        let mut p = Parser { toks, pos: 0, end: source.len() };
        let expr = p.or()?;
        if p.pos != p.toks.len() {
            return p.fail("unexpected trailing input");
        }
        match type_of(&expr)? {
            Ty::Bool | Ty::Any => {}
            other => return Err(ExprError::Type(format!("condition must be boolean, found {other:?}"))),
        }
        Ok(Self { source: source.to_string(), expr })
    }

    pub fn always() -> Self {
        Self { source: "true".into(), expr: Expr::Literal(Value::Bool(true)) }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    /// Evaluates against a context object whose top-level keys are the path
    /// roots.
    pub fn evaluate(&self, ctx: &Value) -> Result<bool, EvalError> {
        truthy(&eval(&self.expr, ctx)?, &self.expr)
    }
}

impl TryFrom<String> for Condition {
    type Error = ExprError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::parse(&s)
    }
}

impl From<Condition> for String {
    fn from(c: Condition) -> Self {
        c.source
    }
}

pub fn lookup<'a>(ctx: &'a Value, path: &[String]) -> Option<&'a Value> {
    path.iter().try_fold(ctx, |v, key| v.get(key.as_str()))
}

fn truthy(v: &Value, e: &Expr) -> Result<bool, EvalError> {
    v.as_bool().ok_or_else(|| EvalError::TypeMismatch(format!("`{e}` is {v}, not a boolean")))
}

fn eval(e: &Expr, ctx: &Value) -> Result<Value, EvalError> {
    Ok(match e {
        Expr::Literal(v) => v.clone(),
        Expr::Path(p) => lookup(ctx, p).cloned().ok_or_else(|| EvalError::MissingField(p.join(".")))?,
        Expr::Exists(p) => Value::Bool(lookup(ctx, p).is_some_and(|v| !v.is_null())),
        Expr::Not(x) => Value::Bool(!truthy(&eval(x, ctx)?, x)?),
        Expr::And(a, b) => Value::Bool(truthy(&eval(a, ctx)?, a)? && truthy(&eval(b, ctx)?, b)?),
        Expr::Or(a, b) => Value::Bool(truthy(&eval(a, ctx)?, a)? || truthy(&eval(b, ctx)?, b)?),
        Expr::Compare(op, a, b) => {
            let (x, y) = (eval(a, ctx)?, eval(b, ctx)?);
            Value::Bool(compare(*op, &x, &y).ok_or_else(|| EvalError::TypeMismatch(format!("cannot compare {x} with {y} in `{e}`")))?)
        }
    })
}

fn compare(op: CmpOp, x: &Value, y: &Value) -> Option<bool> {
    use std::cmp::Ordering;
    let ord = match (x, y) {
        (Value::Number(a), Value::Number(b)) => a.as_f64()?.partial_cmp(&b.as_f64()?)?,
        (Value::String(a), Value::String(b)) => a.cmp(b),
        _ => {
            return match op {
                CmpOp::Eq => Some(x == y),
                CmpOp::Ne => Some(x != y),
                _ => None,
            }
        }
    };
    Some(match op {
        CmpOp::Eq => ord == Ordering::Equal,
        CmpOp::Ne => ord != Ordering::Equal,
        CmpOp::Lt => ord == Ordering::Less,
        CmpOp::Le => ord != Ordering::Greater,
        CmpOp::Gt => ord == Ordering::Greater,
        CmpOp::Ge => ord != Ordering::Less,
    })
}
