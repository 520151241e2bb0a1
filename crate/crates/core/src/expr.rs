//! Closed expression grammar shared by derived fields, predicates and veto
//! conditions.
//!
//! ```text
//! expr     := or
//! or       := and ("or" and)*
//! and      := not ("and" not)*
//! not      := "not" not | cmp
//! cmp      := sum (("<" | "<=" | ">" | ">=" | "==" | "!=") sum)?
//! sum      := product (("+" | "-") product)*
//! product  := unary (("*" | "/") unary)*
//! unary    := "-" unary | primary
//! primary  := number | "true" | "false" | string | ident | call | "(" expr ")"
//! call     := ("min" | "max" | "safe_div" | "defined") "(" expr ("," expr)* ")"
//! ```
//!
//! Evaluation is three-valued: any identifier that cannot be resolved
//! propagates as [`Eval::Missing`]. Comparisons involving a missing operand
//! are false, and a missing result in boolean position counts as false.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::And => "and",
            BinaryOp::Or => "or",
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge | BinaryOp::Eq | BinaryOp::Ne
        )
    }

    pub fn is_arithmetic(self) -> bool {
        matches!(self, BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul | BinaryOp::Div)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Func {
    Min,
    Max,
    SafeDiv,
    Defined,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::SafeDiv => "safe_div",
            Func::Defined => "defined",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            Func::SafeDiv => 3,
            Func::Defined => 1,
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        match name {
            "min" => Some(Func::Min),
            "max" => Some(Func::Max),
            "safe_div" => Some(Func::SafeDiv),
            "defined" => Some(Func::Defined),
            _ => None,
        }
    }
}

/// Expression tree. Numeric literals produced by the parser are folded, so
/// `-3` parses to `Num(-3.0)` rather than `Neg(Num(3.0))`.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Bool(bool),
    Str(String),
    Ident(String),
    Neg(Box<Expr>),
    Not(Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("unexpected character {found:?} at offset {offset}")]
    UnexpectedChar { offset: usize, found: char },
    #[error("unterminated string literal starting at offset {offset}")]
    UnterminatedString { offset: usize },
    #[error("invalid number {text:?} at offset {offset}")]
    InvalidNumber { offset: usize, text: String },
    #[error("unexpected {found} at offset {offset}, expected {expected}")]
    Unexpected {
        offset: usize,
        found: String,
        expected: &'static str,
    },
    #[error("unknown function {name:?}")]
    UnknownFunction { name: String },
    #[error("{func} takes {expected} argument(s), got {got}")]
    Arity {
        func: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("comparison operators do not chain (offset {offset})")]
    ChainedComparison { offset: usize },
    #[error("defined() takes a bare identifier")]
    DefinedArgument,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("type mismatch: {op} applied to {detail}")]
    TypeMismatch { op: String, detail: String },
}

/// Result of evaluating an expression under the missing-value policy.
#[derive(Debug, Clone, PartialEq)]
pub enum Eval {
    Value(Value),
    Missing,
}

impl Eval {
    /// Boolean reading used at predicate and gate positions.
    pub fn truthy(&self) -> Result<bool, EvalError> {
        match self {
            Eval::Missing => Ok(false),
            Eval::Value(Value::Bool(b)) => Ok(*b),
            Eval::Value(other) => Err(EvalError::TypeMismatch {
                op: "boolean context".into(),
                detail: other.kind().into(),
            }),
        }
    }

    pub fn value(&self) -> Option<&Value> {
        match self {
            Eval::Value(v) => Some(v),
            Eval::Missing => None,
        }
    }
}

/// Identifier lookup used during evaluation.
pub trait Scope {
    fn lookup(&self, name: &str) -> Option<Value>;
}

impl<F> Scope for F
where
    F: Fn(&str) -> Option<Value>,
{
    fn lookup(&self, name: &str) -> Option<Value> {
        self(name)
    }
}

impl Scope for std::collections::BTreeMap<String, Value> {
    fn lookup(&self, name: &str) -> Option<Value> {
        self.get(name).cloned()
    }
}

impl Expr {
    pub fn parse(text: &str) -> Result<Expr, ParseError> {
        let tokens = lex(text)?;
        let mut parser = Parser { tokens, pos: 0 };
        let expr = parser.parse_or()?;
        match parser.peek() {
            Token::End => Ok(expr),
            other => Err(ParseError::Unexpected {
                offset: parser.offset(),
                found: other.describe(),
                expected: "end of expression",
            }),
        }
    }

    /// Identifiers the expression reads, deduplicated and sorted.
    pub fn identifiers(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_identifiers(&mut out);
        out
    }

    fn collect_identifiers(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Ident(name) => {
                out.insert(name.clone());
            }
            Expr::Neg(inner) | Expr::Not(inner) => inner.collect_identifiers(out),
            Expr::Binary(_, lhs, rhs) => {
                lhs.collect_identifiers(out);
                rhs.collect_identifiers(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_identifiers(out)),
            Expr::Num(_) | Expr::Bool(_) | Expr::Str(_) => {}
        }
    }

    pub fn eval(&self, scope: &dyn Scope) -> Result<Eval, EvalError> {
        match self {
            Expr::Num(n) => Ok(Eval::Value(Value::Number(*n))),
            Expr::Bool(b) => Ok(Eval::Value(Value::Bool(*b))),
            Expr::Str(s) => Ok(Eval::Value(Value::Label(s.clone()))),
            Expr::Ident(name) => Ok(match scope.lookup(name) {
                Some(v) => Eval::Value(v),
                None => Eval::Missing,
            }),
            Expr::Neg(inner) => match inner.eval(scope)? {
                Eval::Missing => Ok(Eval::Missing),
                Eval::Value(Value::Number(n)) => Ok(Eval::Value(Value::Number(-n))),
                Eval::Value(other) => Err(mismatch("-", &other)),
            },
            Expr::Not(inner) => match inner.eval(scope)? {
                Eval::Missing => Ok(Eval::Missing),
                Eval::Value(Value::Bool(b)) => Ok(Eval::Value(Value::Bool(!b))),
                Eval::Value(other) => Err(mismatch("not", &other)),
            },
            Expr::Binary(op, lhs, rhs) => eval_binary(*op, lhs, rhs, scope),
            Expr::Call(func, args) => eval_call(*func, args, scope),
        }
    }

    /// Evaluates in boolean position: missing reads as false.
    pub fn holds(&self, scope: &dyn Scope) -> Result<bool, EvalError> {
        self.eval(scope)?.truthy()
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(BinaryOp::Or, ..) => 1,
            Expr::Binary(BinaryOp::And, ..) => 2,
            Expr::Not(_) => 3,
            Expr::Binary(op, ..) if op.is_comparison() => 4,
            Expr::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 5,
            Expr::Binary(..) => 6,
            Expr::Neg(_) => 7,
            Expr::Num(n) if *n < 0.0 || (*n == 0.0 && n.is_sign_negative()) => 7,
            _ => 8,
        }
    }
}

fn mismatch(op: &str, v: &Value) -> EvalError {
    EvalError::TypeMismatch {
        op: op.to_string(),
        detail: v.kind().to_string(),
    }
}

fn eval_binary(op: BinaryOp, lhs: &Expr, rhs: &Expr, scope: &dyn Scope) -> Result<Eval, EvalError> {
    match op {
        BinaryOp::And | BinaryOp::Or => {
            let l = logical(op, lhs.eval(scope)?)?;
            let r = logical(op, rhs.eval(scope)?)?;
            let short = op == BinaryOp::Or;
            // Kleene logic: a decisive operand wins over a missing one.
            Ok(match (l, r) {
                (Some(a), _) if a == short => Eval::Value(Value::Bool(short)),
                (_, Some(b)) if b == short => Eval::Value(Value::Bool(short)),
                (Some(_), Some(_)) => Eval::Value(Value::Bool(!short)),
                _ => Eval::Missing,
            })
        }
        _ => {
            let l = lhs.eval(scope)?;
            let r = rhs.eval(scope)?;
            let (l, r) = match (l, r) {
                (Eval::Value(l), Eval::Value(r)) => (l, r),
                _ if op.is_comparison() => return Ok(Eval::Value(Value::Bool(false))),
                _ => return Ok(Eval::Missing),
            };
            if op.is_arithmetic() {
                let (a, b) = match (&l, &r) {
                    (Value::Number(a), Value::Number(b)) => (*a, *b),
                    _ => {
                        return Err(EvalError::TypeMismatch {
                            op: op.symbol().into(),
                            detail: format!("{} and {}", l.kind(), r.kind()),
                        })
                    }
                };
                let out = match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => {
                        if b == 0.0 {
                            return Ok(Eval::Missing);
                        }
                        a / b
                    }
                    _ => unreachable!(),
                };
                return Ok(if out.is_finite() {
                    Eval::Value(Value::Number(out))
                } else {
                    Eval::Missing
                });
            }
            compare(op, &l, &r).map(|b| Eval::Value(Value::Bool(b)))
        }
    }
}

fn logical(op: BinaryOp, e: Eval) -> Result<Option<bool>, EvalError> {
    match e {
        Eval::Missing => Ok(None),
        Eval::Value(Value::Bool(b)) => Ok(Some(b)),
        Eval::Value(other) => Err(mismatch(op.symbol(), &other)),
    }
}

fn compare(op: BinaryOp, l: &Value, r: &Value) -> Result<bool, EvalError> {
    match (l, r) {
        (Value::Number(a), Value::Number(b)) => Ok(match op {
            BinaryOp::Lt => a < b,
            BinaryOp::Le => a <= b,
            BinaryOp::Gt => a > b,
            BinaryOp::Ge => a >= b,
            BinaryOp::Eq => a == b,
            BinaryOp::Ne => a != b,
            _ => unreachable!(),
        }),
        (Value::Bool(a), Value::Bool(b)) if matches!(op, BinaryOp::Eq | BinaryOp::Ne) => {
            Ok((a == b) == (op == BinaryOp::Eq))
        }
        (Value::Label(a), Value::Label(b)) if matches!(op, BinaryOp::Eq | BinaryOp::Ne) => {
            Ok((a == b) == (op == BinaryOp::Eq))
        }
        _ => Err(EvalError::TypeMismatch {
            op: op.symbol().into(),
            detail: format!("{} and {}", l.kind(), r.kind()),
        }),
    }
}

fn eval_call(func: Func, args: &[Expr], scope: &dyn Scope) -> Result<Eval, EvalError> {
    if func == Func::Defined {
        return Ok(Eval::Value(Value::Bool(matches!(
            args[0].eval(scope)?,
            Eval::Value(_)
        ))));
    }
    let mut nums = Vec::with_capacity(args.len());
    for arg in args {
        match arg.eval(scope)? {
            Eval::Missing => return Ok(Eval::Missing),
            Eval::Value(Value::Number(n)) => nums.push(n),
            Eval::Value(other) => return Err(mismatch(func.name(), &other)),
        }
    }
    let out = match func {
        Func::Min => nums[0].min(nums[1]),
        Func::Max => nums[0].max(nums[1]),
        Func::SafeDiv => {
            if nums[1] == 0.0 {
                nums[2]
            } else {
                nums[0] / nums[1]
            }
        }
        Func::Defined => unreachable!(),
    };
    Ok(if out.is_finite() {
        Eval::Value(Value::Number(out))
    } else {
        Eval::Missing
    })
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n:?}"),
            Expr::Bool(b) => write!(f, "{b}"),
            Expr::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            Expr::Ident(name) => f.write_str(name),
            Expr::Neg(inner) => {
                f.write_str("-")?;
                write_child(f, inner, 8)
            }
            Expr::Not(inner) => {
                f.write_str("not ")?;
                write_child(f, inner, 3)
            }
            Expr::Binary(op, lhs, rhs) => {
                let p = self.precedence();
                // Left-associative operators: the right child needs strictly
                // higher precedence; comparisons never chain.
                let left_min = if op.is_comparison() { p + 1 } else { p };
                write_child(f, lhs, left_min)?;
                write!(f, " {} ", op.symbol())?;
                write_child(f, rhs, p + 1)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, child: &Expr, min_precedence: u8) -> fmt::Result {
    if child.precedence() < min_precedence {
        write!(f, "({child})")
    } else {
        write!(f, "{child}")
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Expr::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Str(String),
    Ident(String),
    Op(&'static str),
    LParen,
    RParen,
    Comma,
    End,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Num(n) => format!("number {n}"),
            Token::Str(s) => format!("string {s:?}"),
            Token::Ident(s) => format!("identifier {s:?}"),
            Token::Op(op) => format!("operator {op:?}"),
            Token::LParen => "'('".into(),
            Token::RParen => "')'".into(),
            Token::Comma => "','".into(),
            Token::End => "end of expression".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Token)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || (c == '.' && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit())) {
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
            let slice = &text[start..i];
            let n: f64 = slice.parse().map_err(|_| ParseError::InvalidNumber {
                offset: start,
                text: slice.to_string(),
            })?;
            out.push((start, Token::Num(n)));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Token::Ident(text[start..i].to_string())));
            continue;
        }
        if c == '"' {
            i += 1;
            let mut s = String::new();
            let mut closed = false;
            let mut chars = text[i..].char_indices();
            while let Some((off, ch)) = chars.next() {
                match ch {
                    '"' => {
                        i += off + 1;
                        closed = true;
                        break;
                    }
                    '\\' => match chars.next() {
                        Some((_, esc)) => s.push(esc),
                        None => break,
                    },
                    ch => s.push(ch),
                }
            }
            if !closed {
                return Err(ParseError::UnterminatedString { offset: start });
            }
            out.push((start, Token::Str(s)));
            continue;
        }
        let two = text.get(i..i + 2);
        let op: Option<(&'static str, usize)> = match (two, c) {
            (Some("<="), _) => Some(("<=", 2)),
            (Some(">="), _) => Some((">=", 2)),
            (Some("=="), _) => Some(("==", 2)),
            (Some("!="), _) => Some(("!=", 2)),
            (_, '<') => Some(("<", 1)),
            (_, '>') => Some((">", 1)),
            (_, '+') => Some(("+", 1)),
            (_, '-') => Some(("-", 1)),
            (_, '*') => Some(("*", 1)),
            (_, '/') => Some(("/", 1)),
            _ => None,
        };
        if let Some((op, len)) = op {
            out.push((start, Token::Op(op)));
            i += len;
            continue;
        }
        let tok = match c {
            '(' => Token::LParen,
            ')' => Token::RParen,
            ',' => Token::Comma,
            _ => {
                let found = text[i..].chars().next().unwrap_or(c);
                return Err(ParseError::UnexpectedChar { offset: i, found });
            }
        };
        out.push((start, tok));
        i += 1;
    }
    out.push((text.len(), Token::End));
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos].1
    }

    fn offset(&self) -> usize {
        self.tokens[self.pos].0
    }

    fn bump(&mut self) -> Token {
        let tok = self.tokens[self.pos].1.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        tok
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Token::Ident(s) if s == kw)
    }

    fn expect(&mut self, want: Token, expected: &'static str) -> Result<(), ParseError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(ParseError::Unexpected {
                offset: self.offset(),
                found: self.peek().describe(),
                expected,
            })
        }
    }

    fn parse_or(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_and()?;
        while self.is_keyword("or") {
            self.bump();
            let rhs = self.parse_and()?;
            lhs = Expr::Binary(BinaryOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_not()?;
        while self.is_keyword("and") {
            self.bump();
            let rhs = self.parse_not()?;
            lhs = Expr::Binary(BinaryOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_not(&mut self) -> Result<Expr, ParseError> {
        if self.is_keyword("not") {
            self.bump();
            return Ok(Expr::Not(Box::new(self.parse_not()?)));
        }
        self.parse_cmp()
    }

    fn cmp_op(&self) -> Option<BinaryOp> {
        match self.peek() {
            Token::Op("<") => Some(BinaryOp::Lt),
            Token::Op("<=") => Some(BinaryOp::Le),
            Token::Op(">") => Some(BinaryOp::Gt),
            Token::Op(">=") => Some(BinaryOp::Ge),
            Token::Op("==") => Some(BinaryOp::Eq),
            Token::Op("!=") => Some(BinaryOp::Ne),
            _ => None,
        }
    }

    fn parse_cmp(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.parse_sum()?;
        if let Some(op) = self.cmp_op() {
            self.bump();
            let rhs = self.parse_sum()?;
            if self.cmp_op().is_some() {
                return Err(ParseError::ChainedComparison {
                    offset: self.offset(),
                });
            }
            return Ok(Expr::Binary(op, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn parse_sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_product()?;
        loop {
            let op = match self.peek() {
                Token::Op("+") => BinaryOp::Add,
                Token::Op("-") => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.parse_product()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn parse_product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.parse_unary()?;
        loop {
            let op = match self.peek() {
                Token::Op("*") => BinaryOp::Mul,
                Token::Op("/") => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.parse_unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn parse_unary(&mut self) -> Result<Expr, ParseError> {
        if matches!(self.peek(), Token::Op("-")) {
            self.bump();
            return Ok(match self.parse_unary()? {
                Expr::Num(n) => Expr::Num(-n),
                other => Expr::Neg(Box::new(other)),
            });
        }
        self.parse_primary()
    }

    fn parse_primary(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.bump() {
            Token::Num(n) => Ok(Expr::Num(n)),
            Token::Str(s) => Ok(Expr::Str(s)),
            Token::LParen => {
                let inner = self.parse_or()?;
                self.expect(Token::RParen, "')'")?;
                Ok(inner)
            }
            Token::Ident(name) => match name.as_str() {
                "true" => Ok(Expr::Bool(true)),
                "false" => Ok(Expr::Bool(false)),
                "and" | "or" | "not" => Err(ParseError::Unexpected {
                    offset,
                    found: format!("keyword {name:?}"),
                    expected: "operand",
                }),
                _ if *self.peek() == Token::LParen => self.parse_call(name),
                _ => Ok(Expr::Ident(name)),
            },
            other => Err(ParseError::Unexpected {
                offset,
                found: other.describe(),
                expected: "operand",
            }),
        }
    }

    fn parse_call(&mut self, name: String) -> Result<Expr, ParseError> {
        let func = Func::from_name(&name).ok_or(ParseError::UnknownFunction { name })?;
        self.expect(Token::LParen, "'('")?;
        let mut args = Vec::new();
        if *self.peek() != Token::RParen {
            loop {
                args.push(self.parse_or()?);
                if *self.peek() == Token::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Token::RParen, "')'")?;
        if args.len() != func.arity() {
            return Err(ParseError::Arity {
                func: func.name(),
                expected: func.arity(),
                got: args.len(),
            });
        }
        if func == Func::Defined && !matches!(args[0], Expr::Ident(_)) {
            return Err(ParseError::DefinedArgument);
        }
        Ok(Expr::Call(func, args))
    }
}
