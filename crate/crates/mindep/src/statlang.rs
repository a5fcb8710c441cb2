//! A small expression language for canonical statistics.
//!
//! Grammar (version 1):
//!
//! ```text
//! expr    := term (("+" | "-") term)*
//! term    := unary (("*" | "/") unary)*
//! unary   := "-" unary | power
//! power   := primary ("^" INTEGER)*
//! primary := NUMBER | VAR | FUNC "(" expr ")" | "(" expr ")"
//!          | "ind" "(" VAR "==" (INTEGER | IDENT | STRING) ")"
//! VAR     := "x" INTEGER            (1-based column index)
//! FUNC    := "cos" | "sin" | "exp" | "log" | "abs" | "sqrt"
//! NUMBER  := digits ["." digits] [("e" | "E") ["+" | "-"] digits]
//! STRING  := '"' any character except '"' '"'
//! ```
//!
//! Binary operators of equal precedence associate to the left, including `^`.
//! Exponents are non-negative integer literals so every statistic built from
//! `+ − * ^` is a polynomial.

use std::fmt;

use thiserror::Error;

use crate::model::{CanonicalStatistic, ColumnKind, EvalError};

pub const GRAMMAR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Cos,
    Sin,
    Exp,
    Log,
    Abs,
    Sqrt,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "cos" => Func::Cos,
            "sin" => Func::Sin,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Cos => "cos",
            Func::Sin => "sin",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
        }
    }

    fn is_trig(self) -> bool {
        matches!(self, Func::Cos | Func::Sin)
    }

    #[inline]
    fn apply(self, v: f64) -> Result<f64, EvalError> {
        match self {
            Func::Cos => Ok(v.cos()),
            Func::Sin => Ok(v.sin()),
            Func::Exp => Ok(v.exp()),
            Func::Abs => Ok(v.abs()),
            Func::Log if v > 0.0 => Ok(v.ln()),
            Func::Sqrt if v >= 0.0 => Ok(v.sqrt()),
            f => Err(EvalError::Domain {
                function: f.name(),
                argument: v,
            }),
        }
    }
}

/// Right-hand side of an indicator.
#[derive(Debug, Clone, PartialEq)]
pub enum IndTarget {
    Int(i64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    /// 0-based variable index.
    Var(usize),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Call(Func, Box<Expr>),
    Ind(usize, IndTarget),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("statistic {index}: variable x{var} is {kind} and cannot be used {context}")]
    Type {
        index: usize,
        var: usize,
        kind: &'static str,
        context: &'static str,
    },
    #[error("statistic {index}: x{var} has no level {target}")]
    UnknownLevel {
        index: usize,
        var: usize,
        target: String,
    },
    #[error("statistic {index}: x{var} exceeds the {d} declared columns")]
    OutOfRange { index: usize, var: usize, d: usize },
    #[error("no statistics given")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Int(u64),
    Ident(String),
    Str(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    EqEq,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> ParseError {
        ParseError {
            offset,
            message: message.into(),
        }
    }

    fn next(&mut self) -> Result<(usize, Tok), ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = bytes.get(self.pos) else {
            return Ok((start, Tok::End));
        };
        self.pos += 1;
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'=' if bytes.get(self.pos) == Some(&b'=') => {
                self.pos += 1;
                Tok::EqEq
            }
            b'"' => {
                let rest = &self.src[self.pos..];
                let close = rest
                    .find('"')
                    .ok_or_else(|| self.err(start, "unterminated string"))?;
                self.pos += close + 1;
                Tok::Str(rest[..close].to_string())
            }
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                while end < bytes.len() && bytes[end].is_ascii_digit() {
                    end += 1;
                }
                let mut real = c == b'.';
                if !real && end < bytes.len() && bytes[end] == b'.' {
                    real = true;
                    end += 1;
                    while end < bytes.len() && bytes[end].is_ascii_digit() {
                        end += 1;
                    }
                } else if real {
                    while end < bytes.len() && bytes[end].is_ascii_digit() {
                        end += 1;
                    }
                }
                if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
                    let mut e = end + 1;
                    if e < bytes.len() && (bytes[e] == b'+' || bytes[e] == b'-') {
                        e += 1;
                    }
                    if e < bytes.len() && bytes[e].is_ascii_digit() {
                        while e < bytes.len() && bytes[e].is_ascii_digit() {
                            e += 1;
                        }
                        real = true;
                        end = e;
                    }
                }
                self.pos = end;
                let text = &self.src[start..end];
                if real {
                    Tok::Num(
                        text.parse()
                            .map_err(|_| self.err(start, format!("bad number {text:?}")))?,
                    )
                } else {
                    Tok::Int(
                        text.parse()
                            .map_err(|_| self.err(start, format!("integer {text} too large")))?,
                    )
                }
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut end = self.pos;
                while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_')
                {
                    end += 1;
                }
                self.pos = end;
                Tok::Ident(self.src[start..end].to_string())
            }
            _ => {
                let ch = self.src[start..].chars().next().unwrap_or('?');
                return Err(self.err(start, format!("unexpected character {ch:?}")));
            }
        };
        Ok((start, tok))
    }
}

struct Parser<'a> {
    lex: Lexer<'a>,
    tok: Tok,
    at: usize,
    d: usize,
}

impl<'a> Parser<'a> {
    fn bump(&mut self) -> Result<(), ParseError> {
        let (at, tok) = self.lex.next()?;
        self.at = at;
        self.tok = tok;
        Ok(())
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            offset: self.at,
            message: message.into(),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        if self.tok == tok {
            self.bump()
        } else {
            Err(self.err(format!("expected {what}, found {}", describe(&self.tok))))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump()?;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump()?;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.tok == Tok::Minus {
            self.bump()?;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let mut base = self.primary()?;
        while self.tok == Tok::Caret {
            self.bump()?;
            let k = match self.tok {
                Tok::Int(k) => u32::try_from(k).map_err(|_| self.err("exponent too large"))?,
                _ => {
                    return Err(self.err(format!(
                        "exponent must be a non-negative integer literal, found {}",
                        describe(&self.tok)
                    )))
                }
            };
            self.bump()?;
            base = Expr::Pow(Box::new(base), k);
        }
        Ok(base)
    }

    fn variable(&mut self, name: &str) -> Result<Option<usize>, ParseError> {
        let Some(digits) = name.strip_prefix('x') else {
            return Ok(None);
        };
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Ok(None);
        }
        let j: usize = digits
            .parse()
            .map_err(|_| self.err(format!("bad variable {name}")))?;
        if j == 0 || j > self.d {
            return Err(self.err(format!("variable {name} out of range 1..={}", self.d)));
        }
        Ok(Some(j - 1))
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.tok.clone() {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Expr::Num(v))
            }
            Tok::Int(v) => {
                self.bump()?;
                Ok(Expr::Num(v as f64))
            }
            Tok::LParen => {
                self.bump()?;
                let e = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if let Some(j) = self.variable(&name)? {
                    self.bump()?;
                    return Ok(Expr::Var(j));
                }
                if name == "ind" {
                    self.bump()?;
                    return self.indicator();
                }
                let f = Func::from_name(&name)
                    .ok_or_else(|| self.err(format!("unknown function {name:?}")))?;
                self.bump()?;
                self.expect(Tok::LParen, "'('")?;
                let arg = self.expr()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(Expr::Call(f, Box::new(arg)))
            }
            other => Err(self.err(format!("expected an operand, found {}", describe(&other)))),
        }
    }

    fn indicator(&mut self) -> Result<Expr, ParseError> {
        self.expect(Tok::LParen, "'(' after ind")?;
        let j = match self.tok.clone() {
            Tok::Ident(name) => self.variable(&name)?,
            _ => None,
        }
        .ok_or_else(|| self.err("ind expects a variable"))?;
        self.bump()?;
        self.expect(Tok::EqEq, "'=='")?;
        let target = match self.tok.clone() {
            Tok::Int(v) => IndTarget::Int(
                i64::try_from(v).map_err(|_| self.err("indicator value too large"))?,
            ),
            Tok::Minus => {
                self.bump()?;
                match self.tok {
                    Tok::Int(v) => IndTarget::Int(
                        -i64::try_from(v).map_err(|_| self.err("indicator value too large"))?,
                    ),
                    _ => return Err(self.err("expected an integer after '-'")),
                }
            }
            Tok::Ident(s) | Tok::Str(s) => IndTarget::Label(s),
            other => {
                return Err(self.err(format!(
                    "expected a level or integer, found {}",
                    describe(&other)
                )))
            }
        };
        self.bump()?;
        self.expect(Tok::RParen, "')'")?;
        Ok(Expr::Ind(j, target))
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Num(v) => format!("number {v}"),
        Tok::Int(v) => format!("integer {v}"),
        Tok::Ident(s) => format!("identifier {s:?}"),
        Tok::Str(s) => format!("string {s:?}"),
        Tok::Plus => "'+'".into(),
        Tok::Minus => "'-'".into(),
        Tok::Star => "'*'".into(),
        Tok::Slash => "'/'".into(),
        Tok::Caret => "'^'".into(),
        Tok::LParen => "'('".into(),
        Tok::RParen => "')'".into(),
        Tok::EqEq => "'=='".into(),
        Tok::End => "end of input".into(),
    }
}

/// Parses one statistic over `d` variables.
pub fn parse(source: &str, d: usize) -> Result<Expr, ParseError> {
    let mut p = Parser {
        lex: Lexer { src: source, pos: 0 },
        tok: Tok::End,
        at: 0,
        d,
    };
    p.bump()?;
    let e = p.expr()?;
    if p.tok != Tok::End {
        return Err(p.err(format!("unexpected {}", describe(&p.tok))));
    }
    Ok(e)
}

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Neg(_) => 3,
        Expr::Pow(..) => 4,
        _ => 5,
    }
}

fn write_wrapped(f: &mut fmt::Formatter<'_>, e: &Expr, wrap: bool) -> fmt::Result {
    if wrap {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

/// The canonical printer: minimal parentheses, single spaces around `+ − * /`.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(j) => write!(f, "x{}", j + 1),
            Expr::Neg(e) => {
                f.write_str("-")?;
                write_wrapped(f, e, precedence(e) < 3)
            }
            Expr::Bin(op, l, r) => {
                let p = precedence(self);
                write_wrapped(f, l, precedence(l) < p)?;
                f.write_str(match op {
                    BinOp::Add => " + ",
                    BinOp::Sub => " - ",
                    BinOp::Mul => " * ",
                    BinOp::Div => " / ",
                })?;
                write_wrapped(f, r, precedence(r) <= p)
            }
            Expr::Pow(b, k) => {
                write_wrapped(f, b, precedence(b) < 4)?;
                write!(f, "^{k}")
            }
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
            Expr::Ind(j, IndTarget::Int(v)) => write!(f, "ind(x{} == {v})", j + 1),
            Expr::Ind(j, IndTarget::Label(s)) => write!(f, "ind(x{} == \"{s}\")", j + 1),
        }
    }
}

pub fn print(e: &Expr) -> String {
    e.to_string()
}

/// Quantified value an indicator compares against. For categorical columns
/// an integer is matched against the level labels first and then taken as a
/// level index.
fn resolve_target(kind: &ColumnKind, target: &IndTarget) -> Option<f64> {
    match (kind, target) {
        (ColumnKind::Categorical { levels, .. }, IndTarget::Label(s)) => {
            levels.iter().position(|l| l == s).map(|p| p as f64)
        }
        (ColumnKind::Categorical { levels, .. }, IndTarget::Int(v)) => {
            let label = v.to_string();
            levels
                .iter()
                .position(|l| *l == label)
                .or_else(|| usize::try_from(*v).ok().filter(|&i| i < levels.len()))
                .map(|p| p as f64)
        }
        (_, IndTarget::Int(v)) => Some(*v as f64),
        (_, IndTarget::Label(_)) => None,
    }
}

/// Interprets `e` directly on the AST.
pub fn interpret(e: &Expr, kinds: &[ColumnKind], x: &[f64]) -> Result<f64, EvalError> {
    Ok(match e {
        Expr::Num(v) => *v,
        Expr::Var(j) => x[*j],
        Expr::Neg(a) => -interpret(a, kinds, x)?,
        Expr::Bin(op, l, r) => {
            let a = interpret(l, kinds, x)?;
            let b = interpret(r, kinds, x)?;
            binop(*op, a, b)
        }
        Expr::Pow(b, k) => interpret(b, kinds, x)?.powi(*k as i32),
        Expr::Call(f, a) => f.apply(interpret(a, kinds, x)?)?,
        Expr::Ind(j, t) => {
            let v = resolve_target(&kinds[*j], t).unwrap_or(f64::NAN);
            if x[*j] == v {
                1.0
            } else {
                0.0
            }
        }
    })
}

#[inline]
fn binop(op: BinOp, a: f64, b: f64) -> f64 {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Push(f64),
    Load(usize),
    Neg,
    Bin(BinOp),
    Pow(i32),
    Call(Func),
    Ind(usize, f64),
}

/// A postfix program for one statistic.
#[derive(Debug, Clone)]
pub struct Program {
    ops: Vec<Op>,
    depth: usize,
}

impl Program {
    #[inline]
    pub fn run(&self, x: &[f64], stack: &mut Vec<f64>) -> Result<f64, EvalError> {
        stack.clear();
        for op in &self.ops {
            match *op {
                Op::Push(v) => stack.push(v),
                Op::Load(j) => stack.push(x[j]),
                Op::Neg => {
                    let a = stack.pop().unwrap();
                    stack.push(-a);
                }
                Op::Bin(b) => {
                    let rhs = stack.pop().unwrap();
                    let lhs = stack.pop().unwrap();
                    stack.push(binop(b, lhs, rhs));
                }
                Op::Pow(k) => {
                    let a = stack.pop().unwrap();
                    stack.push(a.powi(k));
                }
                Op::Call(f) => {
                    let a = stack.pop().unwrap();
                    stack.push(f.apply(a)?);
                }
                Op::Ind(j, v) => stack.push(if x[j] == v { 1.0 } else { 0.0 }),
            }
        }
        Ok(stack.pop().unwrap())
    }
}

fn emit(e: &Expr, kinds: &[ColumnKind], ops: &mut Vec<Op>, depth: usize, max: &mut usize) {
    *max = (*max).max(depth + 1);
    match e {
        Expr::Num(v) => ops.push(Op::Push(*v)),
        Expr::Var(j) => ops.push(Op::Load(*j)),
        Expr::Neg(a) => {
            emit(a, kinds, ops, depth, max);
            ops.push(Op::Neg);
        }
        Expr::Bin(op, l, r) => {
            emit(l, kinds, ops, depth, max);
            emit(r, kinds, ops, depth + 1, max);
            ops.push(Op::Bin(*op));
        }
        Expr::Pow(b, k) => {
            emit(b, kinds, ops, depth, max);
            ops.push(Op::Pow(*k as i32));
        }
        Expr::Call(f, a) => {
            emit(a, kinds, ops, depth, max);
            ops.push(Op::Call(*f));
        }
        Expr::Ind(j, t) => ops.push(Op::Ind(
            *j,
            resolve_target(&kinds[*j], t).unwrap_or(f64::NAN),
        )),
    }
}

fn check(
    e: &Expr,
    kinds: &[ColumnKind],
    index: usize,
    in_trig: bool,
) -> Result<(), CompileError> {
    let kind_of = |j: usize| {
        kinds.get(j).ok_or(CompileError::OutOfRange {
            index,
            var: j + 1,
            d: kinds.len(),
        })
    };
    match e {
        Expr::Num(_) => Ok(()),
        Expr::Var(j) => {
            let kind = kind_of(*j)?;
            if in_trig && !matches!(kind, ColumnKind::Continuous | ColumnKind::Circular) {
                return Err(CompileError::Type {
                    index,
                    var: j + 1,
                    kind: kind.name(),
                    context: "inside cos/sin",
                });
            }
            if let ColumnKind::Categorical {
                quantified: false, ..
            } = kind
            {
                return Err(CompileError::Type {
                    index,
                    var: j + 1,
                    kind: kind.name(),
                    context: "outside ind() without a quantification",
                });
            }
            Ok(())
        }
        Expr::Neg(a) | Expr::Pow(a, _) => check(a, kinds, index, in_trig),
        Expr::Bin(_, l, r) => {
            check(l, kinds, index, in_trig)?;
            check(r, kinds, index, in_trig)
        }
        Expr::Call(f, a) => check(a, kinds, index, in_trig || f.is_trig()),
        Expr::Ind(j, t) => {
            let kind = kind_of(*j)?;
            if !matches!(kind, ColumnKind::Count | ColumnKind::Categorical { .. }) {
                return Err(CompileError::Type {
                    index,
                    var: j + 1,
                    kind: kind.name(),
                    context: "in ind()",
                });
            }
            if resolve_target(kind, t).is_none() {
                return Err(CompileError::UnknownLevel {
                    index,
                    var: j + 1,
                    target: match t {
                        IndTarget::Int(v) => v.to_string(),
                        IndTarget::Label(s) => format!("{s:?}"),
                    },
                });
            }
            Ok(())
        }
    }
}

/// Type-checks each statistic against the columns and compiles them into a
/// single evaluator with `K = exprs.len()`.
pub fn compile_programs(
    exprs: &[Expr],
    kinds: &[ColumnKind],
) -> Result<Vec<Program>, CompileError> {
    if exprs.is_empty() {
        return Err(CompileError::Empty);
    }
    exprs
        .iter()
        .enumerate()
        .map(|(index, e)| {
            check(e, kinds, index, false)?;
            let mut ops = Vec::new();
            let mut depth = 0;
            emit(e, kinds, &mut ops, 0, &mut depth);
            Ok(Program { ops, depth })
        })
        .collect()
}

pub fn compile(exprs: &[Expr], kinds: &[ColumnKind]) -> Result<CanonicalStatistic, CompileError> {
    let programs = compile_programs(exprs, kinds)?;
    let depth = programs.iter().map(|p| p.depth).max().unwrap_or(1);
    let labels = exprs.iter().map(print).collect();
    let stat = CanonicalStatistic::from_fn(exprs.len(), kinds.len(), labels, move |x, out| {
        let mut stack = Vec::with_capacity(depth);
        for (o, p) in out.iter_mut().zip(&programs) {
            *o = p.run(x, &mut stack)?;
        }
        Ok(())
    });
    Ok(stat.with_exprs(exprs.to_vec()))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatlangError {
    #[error("statistic {index} ({source_text:?}) {error}")]
    Parse {
        index: usize,
        source_text: String,
        error: ParseError,
    },
    #[error(transparent)]
    Compile(#[from] CompileError),
}

/// Parses and compiles a list of source strings against the column kinds.
pub fn build(sources: &[String], kinds: &[ColumnKind]) -> Result<CanonicalStatistic, StatlangError> {
    let exprs = sources
        .iter()
        .enumerate()
        .map(|(index, s)| {
            parse(s, kinds.len()).map_err(|error| StatlangError::Parse {
                index,
                source_text: s.clone(),
                error,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(compile(&exprs, kinds)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn cont(d: usize) -> Vec<ColumnKind> {
        vec![ColumnKind::Continuous; d]
    }

    fn eval1(src: &str, kinds: &[ColumnKind], x: &[f64]) -> f64 {
        let h = build(&[src.to_string()], kinds).unwrap();
        h.eval(x).unwrap()[0]
    }

    #[test]
    fn product() {
        assert_eq!(eval1("x1*x2", &cont(2), &[2.0, 3.0]), 6.0);
    }

    #[test]
    fn mixed_ratio() {
        let kinds = [ColumnKind::Continuous, ColumnKind::Count];
        assert_eq!(eval1("x1/(1+x2)", &kinds, &[0.5, 3.0]), 0.125);
    }

    #[test]
    fn circular_cosine() {
        let kinds = [ColumnKind::Circular, ColumnKind::Circular];
        assert_eq!(eval1("cos(x1 - x2)", &kinds, &[PI, PI]), 1.0);
    }

    #[test]
    fn precedence_and_associativity() {
        let k = cont(3);
        assert_eq!(eval1("1 + 2 * 3", &k, &[0.0; 3]), 7.0);
        assert_eq!(eval1("8 / 4 / 2", &k, &[0.0; 3]), 1.0);
        assert_eq!(eval1("5 - 3 - 1", &k, &[0.0; 3]), 1.0);
        assert_eq!(eval1("-x1^2", &k, &[3.0, 0.0, 0.0]), -9.0);
        assert_eq!(eval1("(-x1)^2", &k, &[3.0, 0.0, 0.0]), 9.0);
        assert_eq!(eval1("2^3^2", &k, &[0.0; 3]), 64.0);
        assert_eq!(eval1(" x1 *\tx2*x3 ", &k, &[1.0, 2.0, 3.0]), 6.0);
        assert_eq!(eval1("x1^0", &k, &[0.0; 3]), 1.0);
        assert_eq!(eval1("1.5e1 + .5", &k, &[0.0; 3]), 15.5);
    }

    #[test]
    fn penguin_style_statistics() {
        let mut kinds = cont(4);
        kinds.push(ColumnKind::quantified_categorical(["female", "male"]));
        let h = build(&["x1*x4".into(), "x1*x5".into()], &kinds).unwrap();
        assert_eq!(h.dim(), 2);
        assert_eq!(h.eval(&[2.0, 0.0, 0.0, 3.0, 1.0]).unwrap(), vec![6.0, 2.0]);
        assert_eq!(h.eval(&[2.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), vec![6.0, 0.0]);
    }

    #[test]
    fn triple_interaction() {
        assert_eq!(eval1("x1*x2*x3", &cont(3), &[1.0, -2.0, 3.0]), -6.0);
    }

    #[test]
    fn indicators() {
        let kinds = [ColumnKind::Continuous, ColumnKind::Count];
        assert_eq!(eval1("ind(x2 == 1)", &kinds, &[0.0, 1.0]), 1.0);
        assert_eq!(eval1("ind(x2 == 1)", &kinds, &[0.0, 0.0]), 0.0);
        let cat = [ColumnKind::categorical(["a", "b", "c"]), ColumnKind::Count];
        assert_eq!(eval1("ind(x1 == b)", &cat, &[1.0, 0.0]), 1.0);
        assert_eq!(eval1("ind(x1 == \"c\") * x2", &cat, &[2.0, 4.0]), 4.0);
        assert_eq!(eval1("ind(x1 == 2)", &cat, &[2.0, 4.0]), 1.0);
        // labels that look like integers win over indices
        let num_labels = [ColumnKind::categorical(["1", "0"])];
        assert_eq!(eval1("ind(x1 == 0)", &num_labels, &[1.0]), 1.0);
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let e = parse("x1 * foo(x2)", 2).unwrap_err();
        assert_eq!(e.offset, 5);
        assert!(e.message.contains("unknown function"));
        assert_eq!(parse("x1 + x3", 2).unwrap_err().offset, 5);
        assert_eq!(parse("x1 ^ 1.5", 2).unwrap_err().offset, 5);
        assert_eq!(parse("x1 ^ -1", 2).unwrap_err().offset, 5);
        assert_eq!(parse("(x1 + x2", 2).unwrap_err().offset, 8);
        assert_eq!(parse("x1 x2", 2).unwrap_err().offset, 3);
        assert_eq!(parse("x1 # 2", 2).unwrap_err().offset, 3);
        assert!(parse("", 2).is_err());
    }

    #[test]
    fn type_errors() {
        let cat = [ColumnKind::categorical(["a", "b"]), ColumnKind::Count];
        assert!(matches!(
            build(&["x1*x2".into()], &cat),
            Err(StatlangError::Compile(CompileError::Type { var: 1, .. }))
        ));
        assert!(matches!(
            build(&["cos(x2)".into()], &cat),
            Err(StatlangError::Compile(CompileError::Type { var: 2, .. }))
        ));
        assert!(matches!(
            build(&["ind(x1 == z)".into()], &cat),
            Err(StatlangError::Compile(CompileError::UnknownLevel { .. }))
        ));
        assert!(matches!(
            build(&["ind(x1 == 1)".into()], &cont(1)),
            Err(StatlangError::Compile(CompileError::Type { .. }))
        ));
    }

    #[test]
    fn log_of_non_positive_is_an_error() {
        let h = build(&["log(x1)".into()], &cont(1)).unwrap();
        assert!(matches!(
            h.eval(&[0.0]),
            Err(EvalError::Domain { function: "log", .. })
        ));
        assert!(h.eval(&[1.0]).unwrap()[0] == 0.0);
        let h = build(&["sqrt(x1)".into()], &cont(1)).unwrap();
        assert!(h.eval(&[-1.0]).is_err());
    }

    #[test]
    fn printer_examples() {
        let cases = [
            ("x1*x2", "x1 * x2"),
            ("(x1 - x2) - x3", "x1 - x2 - x3"),
            ("x1 - (x2 - x3)", "x1 - (x2 - x3)"),
            ("-(x1+x2)^2", "-(x1 + x2)^2"),
            ("(-x1)^2", "(-x1)^2"),
            ("ind(x2==lab)", "ind(x2 == \"lab\")"),
            ("x1/(1+x2)", "x1 / (1 + x2)"),
        ];
        for (src, printed) in cases {
            assert_eq!(print(&parse(src, 3).unwrap()), printed);
        }
    }

    fn arb_expr(d: usize) -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..1000).prop_map(|v| Expr::Num(v as f64)),
            (0.0f64..1e6).prop_map(Expr::Num),
            (0..d).prop_map(Expr::Var),
            ((0..d), (0i64..5)).prop_map(|(j, v)| Expr::Ind(j, IndTarget::Int(v))),
            ((0..d), "[a-z]{1,4}").prop_map(|(j, s)| Expr::Ind(j, IndTarget::Label(s))),
        ];
        leaf.prop_recursive(6, 64, 2, move |inner| {
            prop_oneof![
                inner.clone().prop_map(|e| Expr::Neg(Box::new(e))),
                (inner.clone(), 0u32..4).prop_map(|(e, k)| Expr::Pow(Box::new(e), k)),
                (
                    prop_oneof![
                        Just(BinOp::Add),
                        Just(BinOp::Sub),
                        Just(BinOp::Mul),
                        Just(BinOp::Div)
                    ],
                    inner.clone(),
                    inner.clone()
                )
                    .prop_map(|(op, l, r)| Expr::Bin(op, Box::new(l), Box::new(r))),
                (
                    prop_oneof![
                        Just(Func::Cos),
                        Just(Func::Sin),
                        Just(Func::Exp),
                        Just(Func::Log),
                        Just(Func::Abs),
                        Just(Func::Sqrt)
                    ],
                    inner
                )
                    .prop_map(|(f, e)| Expr::Call(f, Box::new(e))),
            ]
        })
    }

    fn numeric_only(e: &Expr) -> Expr {
        match e {
            Expr::Ind(j, IndTarget::Label(_)) => Expr::Ind(*j, IndTarget::Int(1)),
            Expr::Neg(a) => Expr::Neg(Box::new(numeric_only(a))),
            Expr::Pow(a, k) => Expr::Pow(Box::new(numeric_only(a)), *k),
            Expr::Call(f, a) => Expr::Call(*f, Box::new(numeric_only(a))),
            Expr::Bin(op, l, r) => {
                Expr::Bin(*op, Box::new(numeric_only(l)), Box::new(numeric_only(r)))
            }
            other => other.clone(),
        }
    }

    proptest! {
        #[test]
        fn print_parse_fixed_point(e in arb_expr(4)) {
            let printed = print(&e);
            let reparsed = parse(&printed, 4).unwrap();
            prop_assert_eq!(&reparsed, &e);
            prop_assert_eq!(print(&reparsed), printed);
        }

        #[test]
        fn compiled_equals_interpreted(e in arb_expr(3), rows in prop::collection::vec(prop::array::uniform3(-3i32..4), 1..40)) {
            let e = numeric_only(&e);
            let kinds = vec![ColumnKind::Count, ColumnKind::Count, ColumnKind::Count];
            // Counts so indicators type-check; trig on counts is rejected,
            // so use continuous kinds when the expression contains trig.
            let kinds = if compile(std::slice::from_ref(&e), &kinds).is_ok() { kinds } else { cont(3) };
            let Ok(programs) = compile_programs(std::slice::from_ref(&e), &kinds) else { return Ok(()); };
            let mut stack = Vec::new();
            for r in rows {
                let x: Vec<f64> = r.iter().map(|&v| v as f64).collect();
                let a = interpret(&e, &kinds, &x);
                let b = programs[0].run(&x, &mut stack);
                match (a, b) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                    (Err(a), Err(b)) => prop_assert_eq!(format!("{a:?}"), format!("{b:?}")),
                    (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
                }
            }
        }
    }
}
