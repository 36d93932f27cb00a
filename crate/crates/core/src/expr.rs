//! Scalar field expressions in `x`, `y`, `theta`.
//!
//! A small recursive-descent parser produces an [`Expr`] tree. Partial
//! derivatives are taken symbolically, so a [`ScalarField`] carries exact
//! first and second partials alongside its value.
//!
//! Grammar:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := primary ('^' unary)?
//! primary := number | 'x' | 'y' | 'theta' | 'pi' | func '(' expr ')' | '(' expr ')'
//! func    := sin | cos | exp | log | sqrt | tanh
//! ```
//!
//! `^` is right-associative and binds tighter than unary minus, so `-x^2`
//! is `-(x^2)` and `2^-1` is `0.5`.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X,
    Y,
    Theta,
}

impl Var {
    pub const ALL: [Var; 3] = [Var::X, Var::Y, Var::Theta];

    fn index(self) -> usize {
        match self {
            Var::X => 0,
            Var::Y => 1,
            Var::Theta => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Y => "y",
            Var::Theta => "theta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Tanh,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Tanh => "tanh",
        }
    }

    fn apply(self, a: f64) -> f64 {
        match self {
            Func::Sin => a.sin(),
            Func::Cos => a.cos(),
            Func::Exp => a.exp(),
            Func::Log => a.ln(),
            Func::Sqrt => a.sqrt(),
            Func::Tanh => a.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("unexpected character '{0}'")]
    UnexpectedChar(char),
    #[error("malformed number '{0}'")]
    BadNumber(String),
    #[error("unknown identifier '{0}'")]
    UnknownIdentifier(String),
    #[error("expected {expected}, found {found}")]
    Unexpected { expected: String, found: String },
    #[error("unexpected end of input, expected {0}")]
    UnexpectedEnd(String),
}

/// Parse failure with the byte offset where it was detected.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind} at position {position}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub position: usize,
}

/// Raised by checked evaluation when an operation leaves its real domain.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("domain error: {op} of {arg} at (x={x}, y={y}, theta={theta})")]
pub struct EvalError {
    pub op: &'static str,
    pub arg: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "number {v}"),
            Tok::Ident(s) => write!(f, "identifier '{s}'"),
            Tok::Plus => f.write_str("'+'"),
            Tok::Minus => f.write_str("'-'"),
            Tok::Star => f.write_str("'*'"),
            Tok::Slash => f.write_str("'/'"),
            Tok::Caret => f.write_str("'^'"),
            Tok::LParen => f.write_str("'('"),
            Tok::RParen => f.write_str("')'"),
        }
    }
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let tok = match c {
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '/' => Tok::Slash,
            '^' => Tok::Caret,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            c if c.is_ascii_digit() || c == '.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                // exponent part: e[+-]digits
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| ParseError {
                    kind: ParseErrorKind::BadNumber(text.to_string()),
                    position: start,
                })?;
                out.push((Tok::Num(v), start));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
                continue;
            }
            other => {
                let ch = src[start..].chars().next().unwrap_or(other);
                return Err(ParseError {
                    kind: ParseErrorKind::UnexpectedChar(ch),
                    position: start,
                });
            }
        };
        out.push((tok, start));
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map(|(_, p)| *p).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        self.pos += 1;
        t
    }

    fn fail(&self, expected: &str) -> ParseError {
        match self.peek() {
            Some(t) => ParseError {
                kind: ParseErrorKind::Unexpected {
                    expected: expected.to_string(),
                    found: t.to_string(),
                },
                position: self.here(),
            },
            None => ParseError {
                kind: ParseErrorKind::UnexpectedEnd(expected.to_string()),
                position: self.end,
            },
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(Tok::Minus) => {
                self.bump();
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Plus) => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if let Some(Tok::Caret) = self.peek() {
            self.bump();
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let at = self.here();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.bump();
                Ok(Expr::Const(v))
            }
            Some(Tok::LParen) => {
                self.bump();
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.bump();
                match name.as_str() {
                    "x" => return Ok(Expr::Var(Var::X)),
                    "y" => return Ok(Expr::Var(Var::Y)),
                    "theta" => return Ok(Expr::Var(Var::Theta)),
                    "pi" => return Ok(Expr::Const(std::f64::consts::PI)),
                    _ => {}
                }
                let Some(func) = Func::from_name(&name) else {
                    return Err(ParseError {
                        kind: ParseErrorKind::UnknownIdentifier(name),
                        position: at,
                    });
                };
                if self.peek() != Some(&Tok::LParen) {
                    return Err(self.fail(&format!("'(' after {}", func.name())));
                }
                self.bump();
                let arg = self.expr()?;
                self.expect_rparen()?;
                Ok(Expr::Call(func, Box::new(arg)))
            }
            _ => Err(self.fail("a number, variable, function or '('")),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ParseError> {
        if self.peek() == Some(&Tok::RParen) {
            self.bump();
            Ok(())
        } else {
            Err(self.fail("')'"))
        }
    }
}

/// Parses `src` into an expression tree.
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let toks = tokenize(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: src.len(),
    };
    let e = p.expr()?;
    if p.pos < p.toks.len() {
        return Err(p.fail("an operator or end of input"));
    }
    Ok(e)
}

// Smart constructors that fold constants and drop neutral elements. They
// keep derivative trees from growing with `0 * ...` and `1 * ...` noise.

pub fn cnst(v: f64) -> Expr {
    Expr::Const(v)
}

pub fn var(v: Var) -> Expr {
    Expr::Var(v)
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(v) => Expr::Const(-v),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

pub fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(z), b) if z == 0.0 => b,
        (a, Expr::Const(z)) if z == 0.0 => a,
        (a, Expr::Neg(b)) => sub(a, *b),
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (a, Expr::Const(z)) if z == 0.0 => a,
        (Expr::Const(z), b) if z == 0.0 => neg(b),
        (a, Expr::Neg(b)) => add(a, *b),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(z), _) | (_, Expr::Const(z)) if z == 0.0 => Expr::Const(0.0),
        (Expr::Const(o), b) if o == 1.0 => b,
        (a, Expr::Const(o)) if o == 1.0 => a,
        (Expr::Const(m), b) if m == -1.0 => neg(b),
        (a, Expr::Const(m)) if m == -1.0 => neg(a),
        (Expr::Neg(a), b) => neg(mul(*a, b)),
        (a, Expr::Neg(b)) => neg(mul(a, *b)),
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) if y != 0.0 => Expr::Const(x / y),
        (Expr::Const(z), _) if z == 0.0 => Expr::Const(0.0),
        (a, Expr::Const(o)) if o == 1.0 => a,
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

pub fn pow(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x.powf(y)),
        (_, Expr::Const(z)) if z == 0.0 => Expr::Const(1.0),
        (a, Expr::Const(o)) if o == 1.0 => a,
        (a, b) => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

pub fn call(f: Func, a: Expr) -> Expr {
    match a {
        Expr::Const(v) => Expr::Const(f.apply(v)),
        a => Expr::Call(f, Box::new(a)),
    }
}

impl Expr {
    pub fn is_const(&self) -> Option<f64> {
        match self {
            Expr::Const(v) => Some(*v),
            _ => None,
        }
    }

    /// True if the variable appears anywhere in the tree.
    pub fn depends_on(&self, v: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(w) => *w == v,
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on(v),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.depends_on(v) || b.depends_on(v),
        }
    }

    /// Unchecked evaluation; leaving the real domain yields NaN or infinity.
    pub fn eval(&self, p: [f64; 3]) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Var(v) => p[v.index()],
            Expr::Neg(a) => -a.eval(p),
            Expr::Add(a, b) => a.eval(p) + b.eval(p),
            Expr::Sub(a, b) => a.eval(p) - b.eval(p),
            Expr::Mul(a, b) => a.eval(p) * b.eval(p),
            Expr::Div(a, b) => a.eval(p) / b.eval(p),
            Expr::Pow(a, b) => powf(a.eval(p), b, p),
            Expr::Call(f, a) => f.apply(a.eval(p)),
        }
    }

    /// Evaluation that reports the first domain violation.
    pub fn try_eval(&self, p: [f64; 3]) -> Result<f64, EvalError> {
        let err = |op, arg| EvalError {
            op,
            arg,
            x: p[0],
            y: p[1],
            theta: p[2],
        };
        Ok(match self {
            Expr::Const(v) => *v,
            Expr::Var(v) => p[v.index()],
            Expr::Neg(a) => -a.try_eval(p)?,
            Expr::Add(a, b) => a.try_eval(p)? + b.try_eval(p)?,
            Expr::Sub(a, b) => a.try_eval(p)? - b.try_eval(p)?,
            Expr::Mul(a, b) => a.try_eval(p)? * b.try_eval(p)?,
            Expr::Div(a, b) => {
                let num = a.try_eval(p)?;
                let den = b.try_eval(p)?;
                if den == 0.0 {
                    return Err(err("division", den));
                }
                num / den
            }
            Expr::Pow(a, b) => {
                let base = a.try_eval(p)?;
                let e = b.try_eval(p)?;
                if base < 0.0 && e.fract() != 0.0 {
                    return Err(err("fractional power", base));
                }
                if base == 0.0 && e < 0.0 {
                    return Err(err("negative power", base));
                }
                base.powf(e)
            }
            Expr::Call(f, a) => {
                let v = a.try_eval(p)?;
                match f {
                    Func::Log if v <= 0.0 => return Err(err("log", v)),
                    Func::Sqrt if v < 0.0 => return Err(err("sqrt", v)),
                    _ => f.apply(v),
                }
            }
        })
    }

    /// Symbolic partial derivative with respect to `v`.
    pub fn diff(&self, v: Var) -> Expr {
        match self {
            Expr::Const(_) => cnst(0.0),
            Expr::Var(w) => cnst(if *w == v { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.diff(v)),
            Expr::Add(a, b) => add(a.diff(v), b.diff(v)),
            Expr::Sub(a, b) => sub(a.diff(v), b.diff(v)),
            Expr::Mul(a, b) => add(
                mul(a.diff(v), (**b).clone()),
                mul((**a).clone(), b.diff(v)),
            ),
            Expr::Div(a, b) => {
                let da = a.diff(v);
                let db = b.diff(v);
                sub(
                    div(da, (**b).clone()),
                    div(mul((**a).clone(), db), pow((**b).clone(), cnst(2.0))),
                )
            }
            Expr::Pow(a, b) => {
                let da = a.diff(v);
                if let Some(c) = b.is_const() {
                    return mul(mul(cnst(c), pow((**a).clone(), cnst(c - 1.0))), da);
                }
                let db = b.diff(v);
                let base_ln = call(Func::Log, (**a).clone());
                if a.is_const().is_some() {
                    return mul(mul(self.clone(), base_ln), db);
                }
                mul(
                    self.clone(),
                    add(
                        mul(db, base_ln),
                        div(mul((**b).clone(), da), (**a).clone()),
                    ),
                )
            }
            Expr::Call(f, a) => {
                let da = a.diff(v);
                let a = (**a).clone();
                let outer = match f {
                    Func::Sin => call(Func::Cos, a),
                    Func::Cos => neg(call(Func::Sin, a)),
                    Func::Exp => call(Func::Exp, a),
                    Func::Log => div(cnst(1.0), a),
                    Func::Sqrt => div(cnst(0.5), call(Func::Sqrt, a)),
                    Func::Tanh => sub(cnst(1.0), pow(call(Func::Tanh, a), cnst(2.0))),
                };
                mul(outer, da)
            }
        }
    }

    /// Replaces every occurrence of `v` by `with`.
    pub fn substitute(&self, v: Var, with: &Expr) -> Expr {
        let s = |e: &Expr| e.substitute(v, with);
        match self {
            Expr::Const(c) => cnst(*c),
            Expr::Var(w) if *w == v => with.clone(),
            Expr::Var(w) => var(*w),
            Expr::Neg(a) => neg(s(a)),
            Expr::Add(a, b) => add(s(a), s(b)),
            Expr::Sub(a, b) => sub(s(a), s(b)),
            Expr::Mul(a, b) => mul(s(a), s(b)),
            Expr::Div(a, b) => div(s(a), s(b)),
            Expr::Pow(a, b) => pow(s(a), s(b)),
            Expr::Call(f, a) => call(*f, s(a)),
        }
    }
}

fn powf(base: f64, exp: &Expr, p: [f64; 3]) -> f64 {
    match exp {
        Expr::Const(c) if *c == 2.0 => base * base,
        Expr::Const(c) if c.fract() == 0.0 && c.abs() <= 16.0 => base.powi(*c as i32),
        e => base.powf(e.eval(p)),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => {
                if *v < 0.0 {
                    write!(f, "({v:?})")
                } else {
                    write!(f, "{v:?}")
                }
            }
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// A parsed field with exact partials up to second order.
///
/// Points are `[x, y, theta]`. Fields that only use `x` and `y` simply
/// have vanishing `theta` partials.
#[derive(Debug, Clone)]
pub struct ScalarField {
    source: String,
    value: Expr,
    d1: [Expr; 3],
    // upper triangle of the Hessian: xx, xy, xθ, yy, yθ, θθ
    d2: [Expr; 6],
}

const HESS_INDEX: [[usize; 3]; 3] = [[0, 1, 2], [1, 3, 4], [2, 4, 5]];

impl ScalarField {
    pub fn parse(src: &str) -> Result<ScalarField, ParseError> {
        let e = parse(src)?;
        Ok(ScalarField::from_expr_with_source(e, src.to_string()))
    }

    pub fn from_expr(e: Expr) -> ScalarField {
        let src = e.to_string();
        ScalarField::from_expr_with_source(e, src)
    }

    pub fn constant(c: f64) -> ScalarField {
        ScalarField::from_expr(cnst(c))
    }

    fn from_expr_with_source(e: Expr, source: String) -> ScalarField {
        let d1 = Var::ALL.map(|v| e.diff(v));
        let d2 = [
            d1[0].diff(Var::X),
            d1[0].diff(Var::Y),
            d1[0].diff(Var::Theta),
            d1[1].diff(Var::Y),
            d1[1].diff(Var::Theta),
            d1[2].diff(Var::Theta),
        ];
        ScalarField {
            source,
            value: e,
            d1,
            d2,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn expr(&self) -> &Expr {
        &self.value
    }

    pub fn depends_on(&self, v: Var) -> bool {
        self.value.depends_on(v)
    }

    pub fn is_constant(&self) -> Option<f64> {
        self.value.is_const()
    }

    pub fn value(&self, p: [f64; 3]) -> f64 {
        self.value.eval(p)
    }

    pub fn try_value(&self, p: [f64; 3]) -> Result<f64, EvalError> {
        self.value.try_eval(p)
    }

    /// Partial derivative in variable `v`.
    pub fn d(&self, v: Var, p: [f64; 3]) -> f64 {
        self.d1[v.index()].eval(p)
    }

    pub fn grad(&self, p: [f64; 3]) -> [f64; 3] {
        [self.d1[0].eval(p), self.d1[1].eval(p), self.d1[2].eval(p)]
    }

    /// Mixed second partial ∂²/∂a∂b.
    pub fn d2(&self, a: Var, b: Var, p: [f64; 3]) -> f64 {
        self.d2[HESS_INDEX[a.index()][b.index()]].eval(p)
    }

    pub fn hessian(&self, p: [f64; 3]) -> [[f64; 3]; 3] {
        let h: [f64; 6] = std::array::from_fn(|i| self.d2[i].eval(p));
        HESS_INDEX.map(|row| row.map(|i| h[i]))
    }

    /// Symbolic partial as a new field.
    pub fn derivative(&self, v: Var) -> ScalarField {
        ScalarField::from_expr(self.d1[v.index()].clone())
    }

    /// Checks every partial at `p` for domain errors.
    pub fn check_at(&self, p: [f64; 3]) -> Result<(), EvalError> {
        self.value.try_eval(p)?;
        for e in self.d1.iter().chain(self.d2.iter()) {
            e.try_eval(p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn field(s: &str) -> ScalarField {
        ScalarField::parse(s).unwrap()
    }

    #[test]
    fn zero_field_has_zero_partials() {
        let f = field("0");
        let p = [0.3, -1.2, 2.0];
        assert_eq!(f.value(p), 0.0);
        assert_eq!(f.grad(p), [0.0; 3]);
        assert_eq!(f.hessian(p), [[0.0; 3]; 3]);
    }

    #[test]
    fn polynomial_partials() {
        let f = field("0.5*(x^2+y^2)");
        let p = [1.0, 0.0, 0.0];
        assert_eq!(f.value(p), 0.5);
        assert_eq!(f.d(Var::X, p), 1.0);
        assert_eq!(f.d(Var::Y, p), 0.0);
        assert_eq!(f.d2(Var::X, Var::X, p), 1.0);
        assert_eq!(f.d2(Var::X, Var::Y, p), 0.0);
    }

    #[test]
    fn precedence_and_associativity() {
        let e = |s: &str| parse(s).unwrap().eval([2.0, 3.0, 0.0]);
        assert_eq!(e("-x^2"), -4.0);
        assert_eq!(e("2^3^2"), 512.0);
        assert_eq!(e("2^-1"), 0.5);
        assert_eq!(e("1 - 2 - 3"), -4.0);
        assert_eq!(e("12 / 3 / 2"), 2.0);
        assert_eq!(e("x*y + 1"), 7.0);
        assert_eq!(e("1.5e1 + .5"), 15.5);
        assert!((e("cos(pi)") + 1.0).abs() < 1e-15);
    }

    #[test]
    fn error_positions() {
        let err = parse("x + * y").unwrap_err();
        assert_eq!(err.position, 4);
        let err = parse("sin(x) + foo").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownIdentifier("foo".into()));
        assert_eq!(err.position, 9);
        let err = parse("(x + y").unwrap_err();
        assert!(matches!(err.kind, ParseErrorKind::UnexpectedEnd(_)));
        assert_eq!(err.position, 6);
        let err = parse("x $ 2").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnexpectedChar('$'));
        assert_eq!(err.position, 2);
        assert!(parse("x y").is_err());
        assert!(parse("sin x").is_err());
        assert!(parse("").is_err());
    }

    #[test]
    fn domain_errors_surface_at_eval() {
        let f = field("log(x)");
        assert!(f.try_value([-1.0, 0.0, 0.0]).is_err());
        assert!(f.try_value([0.0, 0.0, 0.0]).is_err());
        assert!(f.try_value([2.0, 0.0, 0.0]).is_ok());
        assert!(field("sqrt(y)").try_value([0.0, -1.0, 0.0]).is_err());
        assert!(field("1/x").try_value([0.0, 0.0, 0.0]).is_err());
        assert!(field("x^0.5").try_value([-1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn mixed_expression_matches_central_differences() {
        let f = field("sin(x)*cos(theta)");
        let p = [0.0, 0.0, PI / 2.0];
        assert!(f.value(p).abs() < 1e-15);
        assert!(f.d(Var::X, p).abs() < 1e-15);
    }

    #[test]
    fn partials_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let sources = [
            "sin(x)*cos(theta)",
            "exp(0.3*x - y^2)*tanh(x*y) + sqrt(2 + x^2)",
            "log(3 + x*y + cos(theta))/(1 + y^2)",
            "x^3*y - 2*x*theta^2 + (1+x^2)^(0.5 + 0.1*y)",
            "-(x - 2*y)^2 + sin(theta + x)^3",
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for s in sources {
            let f = field(s);
            for _ in 0..100 {
                let p = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..2.0 * PI),
                ];
                for (i, v) in Var::ALL.iter().enumerate() {
                    let mut pp = p;
                    let mut pm = p;
                    pp[i] += h;
                    pm[i] -= h;
                    let fd = (f.value(pp) - f.value(pm)) / (2.0 * h);
                    let an = f.d(*v, p);
                    assert!(
                        (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                        "{s}: d/d{i} fd={fd} analytic={an}"
                    );
                    for (j, w) in Var::ALL.iter().enumerate() {
                        let mut qp = p;
                        let mut qm = p;
                        qp[j] += h;
                        qm[j] -= h;
                        let fd2 = (f.d(*v, qp) - f.d(*v, qm)) / (2.0 * h);
                        let an2 = f.d2(*v, *w, p);
                        assert!(
                            (fd2 - an2).abs() <= 1e-6 * an2.abs().max(1.0),
                            "{s}: d2/d{i}d{j} fd={fd2} analytic={an2}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn substitution_and_display_roundtrip() {
        let e = parse("sin(theta) * x - 2^y").unwrap();
        let shifted = e.substitute(Var::Theta, &add(var(Var::Theta), cnst(PI)));
        let p = [0.7, 0.2, 1.1];
        let expect = (1.1 + PI).sin() * 0.7 - 2f64.powf(0.2);
        assert!((shifted.eval(p) - expect).abs() < 1e-14);
        let reparsed = parse(&shifted.to_string()).unwrap();
        assert_eq!(reparsed.eval(p), shifted.eval(p));
    }
}
