//! Ground-plane trajectories: a small curve DSL, sampling, cubic B-spline
//! resampling to equal chord spacing, and conversion into per-frame root
//! heading changes written back into a motion.
//!
//! DSL:
//!
//! ```text
//! # heart
//! x = 16*sin(t)^3;
//! y = 13*cos(t) - 5*cos(2*t) - 2*cos(3*t) - cos(4*t);
//! t in [0, 2*pi];
//! ```
//!
//! Several `segment { ... }` blocks may replace the top-level statements;
//! their t-ranges must be contiguous. `^` and `**` are right-associative
//! powers; `np.` and `math.` prefixes are accepted and ignored.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::motiondata::{standard_layout, MotionError, MotionSequence};

#[derive(Debug, Error, PartialEq)]
pub enum TrajError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unknown function `{name}` at line {line}, column {col}")]
    UnknownFunction { name: String, line: usize, col: usize },
    #[error("unknown identifier `{name}` at line {line}, column {col}")]
    UnknownIdent { name: String, line: usize, col: usize },
    #[error("segment {index} is missing `{what}`")]
    Incomplete { index: usize, what: &'static str },
    #[error("segment {index} has t-range [{start}, {end}] which is not increasing")]
    BadRange { index: usize, start: f64, end: f64 },
    #[error("segment {index} starts at t={start} but the previous one ends at t={prev_end}")]
    NonContiguous { index: usize, start: f64, prev_end: f64 },
    #[error("curve evaluates to a non-finite value at t={t}")]
    NonFinite { t: f64 },
    #[error("no fenced code block found")]
    NoCodeBlock,
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("all points coincide")]
    Degenerate,
    #[error("zero-length step between points {0} and {1}")]
    ZeroStep(usize, usize),
    #[error("mean speed must be positive and finite, got {0}")]
    BadSpeed(f64),
    #[error("profile has {actual} steps, motion needs {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("motion error: {0}")]
    Motion(String),
}

impl From<MotionError> for TrajError {
    fn from(e: MotionError) -> Self {
        TrajError::Motion(e.to_string())
    }
}

/// Contents of the last fenced code block in `reply`.
pub fn extract_code_block(reply: &str) -> Result<String, TrajError> {
    let mut last = None;
    let mut rest = reply;
    let mut offset = 0;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // Skip the info string on the opening fence line.
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        let Some(close) = body.find("```") else { break };
        last = Some(body[..close].to_string());
        let consumed = open + 3 + body_start + close + 3;
        offset += consumed;
        rest = &reply[offset..];
    }
    last.ok_or(TrajError::NoCodeBlock)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Func {
    Sin,
    Cos,
    Abs,
    Sqrt,
}

impl Func {
    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Abs => v.abs(),
            Func::Sqrt => v.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    T,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::T => t,
            Expr::Neg(a) => -a.eval(t),
            Expr::Add(a, b) => a.eval(t) + b.eval(t),
            Expr::Sub(a, b) => a.eval(t) - b.eval(t),
            Expr::Mul(a, b) => a.eval(t) * b.eval(t),
            Expr::Div(a, b) => a.eval(t) / b.eval(t),
            Expr::Pow(a, b) => a.eval(t).powf(b.eval(t)),
            Expr::Call(f, a) => f.apply(a.eval(t)),
        }
    }

    fn uses_t(&self) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::T => true,
            Expr::Neg(a) | Expr::Call(_, a) => a.uses_t(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.uses_t() || b.uses_t()
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::T => write!(f, "t"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Call(func, a) => write!(f, "{}({a})", format!("{func:?}").to_lowercase()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub x: Expr,
    pub y: Expr,
    pub t_start: f64,
    pub t_end: f64,
}

impl Segment {
    pub fn eval(&self, t: f64) -> Result<(f64, f64), TrajError> {
        let (x, y) = (self.x.eval(t), self.y.eval(t));
        if x.is_finite() && y.is_finite() {
            Ok((x, y))
        } else {
            Err(TrajError::NonFinite { t })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSpec {
    pub segments: Vec<Segment>,
    pub closed_hint: bool,
}

impl CurveSpec {
    pub fn t_range(&self) -> (f64, f64) {
        (self.segments[0].t_start, self.segments.last().unwrap().t_end)
    }

    /// Evaluate at `t`, using the first segment whose range contains it.
    pub fn eval(&self, t: f64) -> Result<(f64, f64), TrajError> {
        let seg = self
            .segments
            .iter()
            .find(|s| t <= s.t_end)
            .unwrap_or_else(|| self.segments.last().unwrap());
        seg.eval(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(&'static str),
}

struct Lexer {
    toks: Vec<(Tok, usize)>,
}

fn line_col(src: &str, pos: usize) -> (usize, usize) {
    let before = &src[..pos.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map(|i| pos - i).unwrap_or(pos + 1);
    (line, col)
}

fn syntax(src: &str, pos: usize, msg: impl Into<String>) -> TrajError {
    let (line, col) = line_col(src, pos);
    TrajError::Syntax {
        line,
        col,
        msg: msg.into(),
    }
}

impl Lexer {
    fn run(src: &str) -> Result<Vec<(Tok, usize)>, TrajError> {
        let mut lx = Lexer { toks: Vec::new() };
        let b = src.as_bytes();
        let mut i = 0;
        while i < b.len() {
            let c = b[i];
            if c.is_ascii_whitespace() {
                i += 1;
            } else if c == b'#' {
                while i < b.len() && b[i] != b'\n' {
                    i += 1;
                }
            } else if c.is_ascii_digit() || (c == b'.' && b.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
                let start = i;
                while i < b.len() && (b[i].is_ascii_digit() || b[i] == b'.') {
                    i += 1;
                }
                if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                    let mut j = i + 1;
                    if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
                        j += 1;
                    }
                    if j < b.len() && b[j].is_ascii_digit() {
                        i = j;
                        while i < b.len() && b[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| syntax(src, start, format!("bad number `{text}`")))?;
                lx.toks.push((Tok::Num(v), start));
            } else if c.is_ascii_alphabetic() || c == b'_' {
                let start = i;
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_' || b[i] == b'.') {
                    i += 1;
                }
                let mut name = &src[start..i];
                for prefix in ["np.", "numpy.", "math."] {
                    if let Some(rest) = name.strip_prefix(prefix) {
                        name = rest;
                    }
                }
                if name.contains('.') || name.is_empty() {
                    return Err(syntax(src, start, format!("bad identifier `{}`", &src[start..i])));
                }
                lx.toks.push((Tok::Ident(name.to_string()), start));
            } else {
                let two = src.get(i..i + 2);
                if two == Some("**") {
                    lx.toks.push((Tok::Sym("^"), i));
                    i += 2;
                    continue;
                }
                let sym = match c {
                    b'+' => "+",
                    b'-' => "-",
                    b'*' => "*",
                    b'/' => "/",
                    b'^' => "^",
                    b'(' => "(",
                    b')' => ")",
                    b'[' => "[",
                    b']' => "]",
                    b',' => ",",
                    b';' => ";",
                    b'=' => "=",
                    b'{' => "{",
                    b'}' => "}",
                    _ => {
                        let ch = src[i..].chars().next().unwrap();
                        return Err(syntax(src, i, format!("unexpected character `{ch}`")));
                    }
                };
                lx.toks.push((Tok::Sym(sym), i));
                i += 1;
            }
        }
        Ok(lx.toks)
    }
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

#[derive(Default)]
struct Partial {
    x: Option<Expr>,
    y: Option<Expr>,
    range: Option<(f64, f64)>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(_, o)| *o).unwrap_or(self.src.len())
    }

    fn err(&self, msg: impl Into<String>) -> TrajError {
        syntax(self.src, self.offset(), msg)
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(x)) if *x == s)
    }

    fn expect(&mut self, s: &str) -> Result<(), TrajError> {
        if self.is_sym(s) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{s}`")))
        }
    }

    /// `;`, optional before `}` or end of input.
    fn terminator(&mut self) -> Result<(), TrajError> {
        if self.peek().is_none() || self.is_sym("}") {
            return Ok(());
        }
        self.expect(";")
    }

    fn expr(&mut self) -> Result<Expr, TrajError> {
        let mut lhs = self.term()?;
        loop {
            if self.is_sym("+") {
                self.pos += 1;
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.is_sym("-") {
                self.pos += 1;
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, TrajError> {
        let mut lhs = self.unary()?;
        loop {
            if self.is_sym("*") {
                self.pos += 1;
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.is_sym("/") {
                self.pos += 1;
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, TrajError> {
        if self.is_sym("-") {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.is_sym("+") {
            self.pos += 1;
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, TrajError> {
        let base = self.atom()?;
        if self.is_sym("^") {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, TrajError> {
        let off = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.is_sym("(") {
                    let (line, col) = line_col(self.src, off);
                    let f = Func::from_name(&name).ok_or(TrajError::UnknownFunction {
                        name: name.clone(),
                        line,
                        col,
                    })?;
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect(")")?;
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                match name.as_str() {
                    "t" => Ok(Expr::T),
                    "pi" => Ok(Expr::Num(PI)),
                    _ => {
                        let (line, col) = line_col(self.src, off);
                        Err(TrajError::UnknownIdent { name, line, col })
                    }
                }
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(")")?;
                Ok(e)
            }
            Some(_) => Err(self.err("expected a number, `t`, `pi`, a function call or `(`")),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn constant(&mut self) -> Result<f64, TrajError> {
        let off = self.offset();
        let e = self.expr()?;
        if e.uses_t() {
            return Err(syntax(self.src, off, "range bounds may not depend on t"));
        }
        Ok(e.eval(0.0))
    }

    /// One statement into `into`; returns false at a `}` or end of input.
    fn stmt(&mut self, into: &mut Partial, closed: &mut bool) -> Result<bool, TrajError> {
        let name = match self.peek().cloned() {
            None => return Ok(false),
            Some(Tok::Sym("}")) => return Ok(false),
            Some(Tok::Ident(n)) => n,
            Some(_) => return Err(self.err("expected a statement")),
        };
        let off = self.offset();
        self.pos += 1;
        match name.as_str() {
            "x" | "y" => {
                self.expect("=")?;
                let e = self.expr()?;
                self.terminator()?;
                let slot = if name == "x" { &mut into.x } else { &mut into.y };
                if slot.is_some() {
                    return Err(syntax(self.src, off, format!("`{name}` assigned twice")));
                }
                *slot = Some(e);
            }
            "t" => {
                match self.peek() {
                    Some(Tok::Ident(k)) if k == "in" => self.pos += 1,
                    _ => return Err(self.err("expected `in`")),
                }
                self.expect("[")?;
                let a = self.constant()?;
                self.expect(",")?;
                let b = self.constant()?;
                self.expect("]")?;
                self.terminator()?;
                if into.range.is_some() {
                    return Err(syntax(self.src, off, "t-range given twice"));
                }
                into.range = Some((a, b));
            }
            "closed" => {
                self.terminator()?;
                *closed = true;
            }
            "segment" => return Err(syntax(self.src, off, "segments may not nest")),
            other => return Err(syntax(self.src, off, format!("unknown statement `{other}`"))),
        }
        Ok(true)
    }
}

fn finish(index: usize, p: Partial) -> Result<Segment, TrajError> {
    let x = p.x.ok_or(TrajError::Incomplete { index, what: "x" })?;
    let y = p.y.ok_or(TrajError::Incomplete { index, what: "y" })?;
    let (t_start, t_end) = p.range.ok_or(TrajError::Incomplete { index, what: "t in [..]" })?;
    if !(t_start.is_finite() && t_end.is_finite() && t_start < t_end) {
        return Err(TrajError::BadRange {
            index,
            start: t_start,
            end: t_end,
        });
    }
    Ok(Segment { x, y, t_start, t_end })
}

pub fn parse_curve_spec(text: &str) -> Result<CurveSpec, TrajError> {
    let toks = Lexer::run(text)?;
    let mut p = Parser { src: text, toks, pos: 0 };
    let mut closed = false;
    let mut top = Partial::default();
    let mut top_used = false;
    let mut segments = Vec::new();
    loop {
        match p.peek() {
            None => break,
            Some(Tok::Ident(k)) if k == "segment" => {
                p.pos += 1;
                p.expect("{")?;
                let mut part = Partial::default();
                while p.stmt(&mut part, &mut closed)? {}
                p.expect("}")?;
                segments.push(finish(segments.len(), part)?);
            }
            Some(Tok::Sym("}")) => return Err(p.err("unmatched `}`")),
            _ => {
                let is_closed = matches!(p.peek(), Some(Tok::Ident(k)) if k == "closed");
                p.stmt(&mut top, &mut closed)?;
                top_used |= !is_closed;
            }
        }
    }
    if top_used {
        if !segments.is_empty() {
            return Err(syntax(text, 0, "top-level x/y/t statements cannot be mixed with segment blocks"));
        }
        segments.push(finish(0, top)?);
    }
    if segments.is_empty() {
        return Err(syntax(text, text.len(), "empty curve definition"));
    }
    for i in 1..segments.len() {
        let prev_end = segments[i - 1].t_end;
        let start = segments[i].t_start;
        if (start - prev_end).abs() > 1e-9 * (1.0 + prev_end.abs()) {
            return Err(TrajError::NonContiguous { index: i, start, prev_end });
        }
    }
    Ok(CurveSpec {
        segments,
        closed_hint: closed,
    })
}

pub type Point = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct PolyLine {
    pub points: Vec<Point>,
}

impl PolyLine {
    pub fn is_closed(&self, tol: f64) -> bool {
        let (a, b) = (self.points[0], *self.points.last().unwrap());
        (a.0 - b.0).hypot(a.1 - b.1) <= tol
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| dist(w[0], w[1])).sum()
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

pub const DEFAULT_SAMPLES: usize = 200;

/// Evaluate at `n_samples` evenly spaced t values, endpoints included.
pub fn sample_curve(spec: &CurveSpec, n_samples: usize) -> Result<PolyLine, TrajError> {
    if n_samples < 2 {
        return Err(TrajError::TooFewPoints {
            need: 2,
            got: n_samples,
        });
    }
    let (a, b) = spec.t_range();
    let points = (0..n_samples)
        .map(|i| {
            let t = if i == n_samples - 1 {
                b
            } else {
                a + (b - a) * i as f64 / (n_samples - 1) as f64
            };
            spec.eval(t)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PolyLine { points })
}

/// Clamped cubic B-spline interpolating a point sequence.
#[derive(Debug, Clone)]
pub struct BSpline {
    pub knots: Vec<f64>,
    pub control: Vec<Point>,
    pub degree: usize,
}

fn find_span(knots: &[f64], degree: usize, n_ctrl: usize, u: f64) -> usize {
    let n = n_ctrl - 1;
    if u >= knots[n + 1] {
        return n;
    }
    let (mut lo, mut hi) = (degree, n + 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if u < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

fn basis(knots: &[f64], degree: usize, span: usize, u: f64) -> Vec<f64> {
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let tmp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    n
}

impl BSpline {
    /// Global interpolation with chord-length parameters and averaged knots.
    /// Consecutive duplicate points must already be removed.
    pub fn interpolate(points: &[Point]) -> Result<(Self, Vec<f64>), TrajError> {
        let m = points.len();
        if m < 4 {
            return Err(TrajError::TooFewPoints { need: 4, got: m });
        }
        let degree = 3;
        let total: f64 = points.windows(2).map(|w| dist(w[0], w[1])).sum();
        if total == 0.0 {
            return Err(TrajError::Degenerate);
        }
        let mut params = Vec::with_capacity(m);
        let mut acc = 0.0;
        params.push(0.0);
        for w in points.windows(2) {
            acc += dist(w[0], w[1]);
            params.push(acc / total);
        }
        params[m - 1] = 1.0;
        let mut knots = vec![0.0; degree + 1];
        for j in 1..m - degree {
            knots.push(params[j..j + degree].iter().sum::<f64>() / degree as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        let mut a = DMatrix::<f64>::zeros(m, m);
        for (i, &u) in params.iter().enumerate() {
            let span = find_span(&knots, degree, m, u);
            for (k, v) in basis(&knots, degree, span, u).into_iter().enumerate() {
                a[(i, span - degree + k)] = v;
            }
        }
        let lu = a.lu();
        let bx = DVector::from_iterator(m, points.iter().map(|p| p.0));
        let by = DVector::from_iterator(m, points.iter().map(|p| p.1));
        let (Some(cx), Some(cy)) = (lu.solve(&bx), lu.solve(&by)) else {
            return Err(TrajError::Degenerate);
        };
        let control = cx.iter().zip(cy.iter()).map(|(&x, &y)| (x, y)).collect();
        Ok((Self { knots, control, degree }, params))
    }

    pub fn eval(&self, u: f64) -> Point {
        let u = u.clamp(0.0, 1.0);
        let span = find_span(&self.knots, self.degree, self.control.len(), u);
        let b = basis(&self.knots, self.degree, span, u);
        let mut p = (0.0, 0.0);
        for (k, w) in b.iter().enumerate() {
            let c = self.control[span - self.degree + k];
            p.0 += w * c.0;
            p.1 += w * c.1;
        }
        p
    }
}

/// Dense polyline approximation used for marching.
fn densify(spline: &BSpline, params: &[f64], per_span: usize) -> Vec<Point> {
    let mut out = Vec::with_capacity(params.len() * per_span);
    for w in params.windows(2) {
        for s in 0..per_span {
            out.push(spline.eval(w[0] + (w[1] - w[0]) * s as f64 / per_span as f64));
        }
    }
    out.push(spline.eval(1.0));
    out
}

/// Position along `dense` (segment index, fraction) at Euclidean distance
/// `chord` from `from`, searching forward from `(seg, frac)`.
fn march(dense: &[Point], from: Point, seg: usize, frac: f64, chord: f64) -> Option<(usize, f64, Point)> {
    let mut s = seg;
    let mut f0 = frac;
    while s + 1 < dense.len() {
        let (a, b) = (dense[s], dense[s + 1]);
        let p0 = (a.0 + (b.0 - a.0) * f0, a.1 + (b.1 - a.1) * f0);
        if dist(from, b) >= chord {
            // Solve |p0 + λ(b − p0) − from| = chord for the smallest λ ∈ [0,1].
            let d = (b.0 - p0.0, b.1 - p0.1);
            let w = (p0.0 - from.0, p0.1 - from.1);
            let qa = d.0 * d.0 + d.1 * d.1;
            let qb = 2.0 * (d.0 * w.0 + d.1 * w.1);
            let qc = w.0 * w.0 + w.1 * w.1 - chord * chord;
            let lambda = if qa == 0.0 {
                0.0
            } else {
                let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
                ((-qb + disc.sqrt()) / (2.0 * qa)).clamp(0.0, 1.0)
            };
            let p = (p0.0 + d.0 * lambda, p0.1 + d.1 * lambda);
            let f = f0 + (1.0 - f0) * lambda;
            return Some((s, f, p));
        }
        s += 1;
        f0 = 0.0;
    }
    None
}

/// Marches `steps` equal chords from the start. Returns the points and their
/// arc positions, or `Err(())` when the curve ends first.
fn march_all(curve: &ArcCurve, chord: f64, steps: usize) -> Result<(Vec<Point>, Vec<f64>), ()> {
    let dense = &curve.points;
    let mut pts = vec![dense[0]];
    let mut arcs = vec![0.0];
    let (mut seg, mut frac) = (0usize, 0.0f64);
    for _ in 0..steps {
        let from = *pts.last().unwrap();
        match march(dense, from, seg, frac, chord) {
            Some((s, f, p)) => {
                seg = s;
                frac = f;
                pts.push(p);
                arcs.push(curve.cum[s] + f * (curve.cum[s + 1] - curve.cum[s]));
            }
            None => return Err(()),
        }
    }
    Ok((pts, arcs))
}

/// Piecewise-linear curve addressed by arc length.
struct ArcCurve {
    points: Vec<Point>,
    cum: Vec<f64>,
}

impl ArcCurve {
    fn new(points: Vec<Point>) -> Self {
        let mut cum = vec![0.0];
        for w in points.windows(2) {
            cum.push(cum.last().unwrap() + dist(w[0], w[1]));
        }
        Self { points, cum }
    }

    fn total(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point and unit tangent at arc position `s`.
    fn at(&self, s: f64) -> (Point, Point) {
        let s = s.clamp(0.0, self.total());
        let mut i = self.cum.partition_point(|&c| c <= s).saturating_sub(1);
        while i + 1 < self.cum.len() && self.cum[i + 1] == self.cum[i] {
            i += 1;
        }
        let i = i.min(self.points.len() - 2);
        let len = self.cum[i + 1] - self.cum[i];
        let (a, b) = (self.points[i], self.points[i + 1]);
        let tan = if len > 0.0 { ((b.0 - a.0) / len, (b.1 - a.1) / len) } else { (0.0, 0.0) };
        let f = if len > 0.0 { (s - self.cum[i]) / len } else { 0.0 };
        ((a.0 + (b.0 - a.0) * f, a.1 + (b.1 - a.1) * f), tan)
    }

    /// Chord residuals `|P(s_i) − P(s_{i−1})| − L` for the given positions.
    fn residuals(&self, arcs: &[f64], chord: f64) -> Vec<f64> {
        let pts: Vec<Point> = arcs.iter().map(|&s| self.at(s).0).collect();
        pts.windows(2).map(|w| dist(w[0], w[1]) - chord).collect()
    }
}

fn worst(r: &[f64], chord: f64) -> f64 {
    r.iter().fold(0.0f64, |m, x| m.max(x.abs())) / chord
}

/// Damped Gauss-Newton on the interior arc positions and the common chord
/// length. Endpoints stay fixed and positions stay strictly ordered.
fn refine_chords(curve: &ArcCurve, mut arcs: Vec<f64>, mut chord: f64) -> (Vec<f64>, f64) {
    let n = arcs.len();
    let m = n - 1;
    let cost = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>();
    let mut r = curve.residuals(&arcs, chord);
    let mut lambda = 1e-6;
    for _ in 0..500 {
        if worst(&r, chord) < 1e-12 {
            break;
        }
        let pts: Vec<(Point, Point)> = arcs.iter().map(|&s| curve.at(s)).collect();
        // Unknowns: s_1..s_{n−2}, then L.
        let mut j = DMatrix::<f64>::zeros(m, m);
        for i in 1..n {
            let (p0, t0) = pts[i - 1];
            let (p1, t1) = pts[i];
            let d = dist(p0, p1).max(1e-300);
            let u = ((p1.0 - p0.0) / d, (p1.1 - p0.1) / d);
            if i < n - 1 {
                j[(i - 1, i - 1)] = u.0 * t1.0 + u.1 * t1.1;
            }
            if i > 1 {
                j[(i - 1, i - 2)] = -(u.0 * t0.0 + u.1 * t0.1);
            }
            j[(i - 1, m - 1)] = -1.0;
        }
        let rv = DVector::from_column_slice(&r);
        let jt = j.transpose();
        let jtj = &jt * &j;
        let g = &jt * &rv;
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..m {
                a[(k, k)] += lambda * (1.0 + jtj[(k, k)]);
            }
            let Some(delta) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let mut cand = arcs.clone();
            for k in 1..n - 1 {
                cand[k] += delta[k - 1];
            }
            let cand_chord = chord + delta[m - 1];
            let ordered = cand.windows(2).all(|w| w[1] > w[0]);
            if ordered && cand_chord > 0.0 {
                let rc = curve.residuals(&cand, cand_chord);
                if cost(&rc) < cost(&r) {
                    arcs = cand;
                    chord = cand_chord;
                    r = rc;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
            }
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    (arcs, chord)
}

/// Refit `poly` with a cubic B-spline and emit `n_out` points with equal
/// consecutive chord length, first and last points kept.
pub fn resample_uniform(poly: &PolyLine, n_out: usize) -> Result<PolyLine, TrajError> {
    let mut pts: Vec<Point> = Vec::with_capacity(poly.points.len());
    for &p in &poly.points {
        if pts.last().is_none_or(|&q| dist(p, q) > 1e-12) {
            pts.push(p);
        }
    }
    if pts.len() < 2 {
        return Err(TrajError::Degenerate);
    }
    if poly.points.len() < 4 {
        return Err(TrajError::TooFewPoints {
            need: 4,
            got: poly.points.len(),
        });
    }
    if n_out < 2 {
        return Err(TrajError::TooFewPoints { need: 2, got: n_out });
    }
    let first = poly.points[0];
    let last = *poly.points.last().unwrap();
    if n_out == 2 {
        return Ok(PolyLine {
            points: vec![first, last],
        });
    }
    if pts.len() < 4 {
        // Too few distinct points for a cubic fit; march on the raw line.
        return Ok(PolyLine {
            points: equal_chords(&pts, n_out, first, last),
        });
    }
    let (spline, params) = BSpline::interpolate(&pts)?;
    let per_span = (4000 / pts.len()).clamp(8, 64);
    let dense = densify(&spline, &params, per_span);
    Ok(PolyLine {
        points: equal_chords(&dense, n_out, first, last),
    })
}

fn equal_chords(dense: &[Point], n_out: usize, first: Point, last: Point) -> Vec<Point> {
    let curve = ArcCurve::new(dense.to_vec());
    let arc = curve.total();
    let steps = n_out - 2;
    let end = *dense.last().unwrap();
    // g(L) > 0 when the final chord to the end is longer than L.
    let gap = |l: f64| -> f64 {
        match march_all(&curve, l, steps) {
            Ok((pts, _)) => dist(*pts.last().unwrap(), end) - l,
            Err(()) => -l,
        }
    };
    let (mut lo, mut hi) = (0.0, arc / (n_out - 1) as f64 * 1.5 + 1e-12);
    while gap(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * arc.max(1.0) {
            break;
        }
    }
    let (_, mut arcs) = march_all(&curve, lo, steps).expect("lower bracket always marches");
    arcs.push(arc);
    let chord = lo;
    // Near a cusp the marched gap jumps across zero and no first-crossing
    // solution exists; solve for all positions jointly instead.
    if worst(&curve.residuals(&arcs, chord), chord) > 1e-9 {
        let uniform: Vec<f64> = (0..n_out).map(|i| arc * i as f64 / (n_out - 1) as f64).collect();
        let mut best = (f64::INFINITY, arcs.clone());
        for (start, l0) in [(arcs, chord), (uniform, arc / (n_out - 1) as f64)] {
            let (a, l) = refine_chords(&curve, start, l0);
            let w = worst(&curve.residuals(&a, l), l);
            if w < best.0 {
                best = (w, a);
            }
        }
        arcs = best.1;
    }
    let mut pts: Vec<Point> = arcs.iter().map(|&s| curve.at(s).0).collect();
    pts[0] = first;
    *pts.last_mut().unwrap() = last;
    pts
}

/// Per-step heading change (radians, counter-clockwise positive) and speed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryProfile {
    pub heading_delta: Vec<f64>,
    pub speed: Vec<f64>,
}

impl TrajectoryProfile {
    pub fn len(&self) -> usize {
        self.heading_delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heading_delta.is_empty()
    }
}

/// Largest heading change kept; a full reversal is clamped just below π.
const MAX_TURN: f64 = PI - 1e-9;

fn signed_angle(a: Point, b: Point) -> f64 {
    let cross = a.0 * b.1 - a.1 * b.0;
    let dot = a.0 * b.0 + a.1 * b.1;
    cross.atan2(dot).clamp(-MAX_TURN, MAX_TURN)
}

/// Heading changes between consecutive step directions. The first step turns
/// from the last direction on a closed curve, and not at all on an open one.
pub fn derive_profile(poly: &PolyLine, v_bar: f64) -> Result<TrajectoryProfile, TrajError> {
    if !(v_bar.is_finite() && v_bar > 0.0) {
        return Err(TrajError::BadSpeed(v_bar));
    }
    let pts = &poly.points;
    if pts.len() < 2 {
        return Err(TrajError::TooFewPoints { need: 2, got: pts.len() });
    }
    let dirs: Vec<Point> = pts.windows(2).map(|w| (w[1].0 - w[0].0, w[1].1 - w[0].1)).collect();
    for (i, d) in dirs.iter().enumerate() {
        if d.0 == 0.0 && d.1 == 0.0 {
            return Err(TrajError::ZeroStep(i, i + 1));
        }
    }
    let closed = pts.len() > 2 && poly.is_closed(1e-9);
    let steps = dirs.len();
    let heading_delta = (0..steps)
        .map(|i| {
            let prev = if i > 0 {
                dirs[i - 1]
            } else if closed {
                dirs[steps - 1]
            } else {
                dirs[0]
            };
            signed_angle(prev, dirs[i])
        })
        .collect();
    Ok(TrajectoryProfile {
        heading_delta,
        speed: vec![v_bar; steps],
    })
}

/// Stretch a profile to `len` steps, preserving total turning by
/// interpolating the cumulative heading.
pub fn resample_profile(p: &TrajectoryProfile, len: usize) -> Result<TrajectoryProfile, TrajError> {
    if len == 0 || p.is_empty() {
        return Err(TrajError::LengthMismatch {
            expected: len,
            actual: p.len(),
        });
    }
    if len == p.len() {
        return Ok(p.clone());
    }
    let mut cum = vec![0.0];
    for d in &p.heading_delta {
        cum.push(cum.last().unwrap() + d);
    }
    let at = |x: f64| -> f64 {
        let x = x.clamp(0.0, p.len() as f64);
        let i = (x.floor() as usize).min(p.len() - 1);
        let f = x - i as f64;
        cum[i] + (cum[i + 1] - cum[i]) * f
    };
    let scale = p.len() as f64 / len as f64;
    let heading_delta = (0..len)
        .map(|k| (at((k + 1) as f64 * scale) - at(k as f64 * scale)).clamp(-MAX_TURN, MAX_TURN))
        .collect();
    let mean_speed = p.speed.iter().sum::<f64>() / p.speed.len() as f64;
    Ok(TrajectoryProfile {
        heading_delta,
        speed: vec![mean_speed; len],
    })
}

/// Write `profile` into the root rotational velocity of `m`: frame 0 gets 0,
/// frame `i ≥ 1` gets `heading_delta[i-1]`. With `overwrite_speed`, the root
/// planar velocity of frame `i ≥ 1` is rescaled to `speed[i-1]` (frames with
/// zero velocity move straight ahead).
pub fn apply_trajectory_with(
    m: &MotionSequence,
    profile: &TrajectoryProfile,
    overwrite_speed: bool,
) -> Result<MotionSequence, TrajError> {
    let need = m.len().saturating_sub(1);
    if profile.len() != need || need == 0 {
        return Err(TrajError::LengthMismatch {
            expected: need,
            actual: profile.len(),
        });
    }
    let layout = standard_layout();
    let rot = layout.root_rot_vel.start;
    let lin = layout.root_lin_vel.start;
    let mut out = m.clone();
    out.frame_mut(0)[rot] = 0.0;
    for i in 1..m.len() {
        let f = out.frame_mut(i);
        f[rot] = profile.heading_delta[i - 1] as f32;
        if overwrite_speed {
            let (vx, vz) = (f[lin] as f64, f[lin + 1] as f64);
            let norm = vx.hypot(vz);
            let s = profile.speed[i - 1];
            if norm > 0.0 {
                f[lin] = (vx / norm * s) as f32;
                f[lin + 1] = (vz / norm * s) as f32;
            } else {
                f[lin] = 0.0;
                f[lin + 1] = s as f32;
            }
        }
    }
    Ok(out)
}

pub fn apply_trajectory(m: &MotionSequence, profile: &TrajectoryProfile) -> Result<MotionSequence, TrajError> {
    apply_trajectory_with(m, profile, false)
}

/// Heading changes stored in a motion's root rotational velocity, frames 1..T.
pub fn read_back_profile(m: &MotionSequence) -> Vec<f64> {
    let rot = standard_layout().root_rot_vel.start;
    (1..m.len()).map(|i| m.get(i, rot) as f64).collect()
}

/// DSL text to a `frames − 1` step profile at mean speed `v_bar`.
pub fn profile_from_spec(text: &str, frames: usize, v_bar: f64) -> Result<TrajectoryProfile, TrajError> {
    if frames < 2 {
        return Err(TrajError::TooFewPoints { need: 2, got: frames });
    }
    let spec = parse_curve_spec(text)?;
    let poly = sample_curve(&spec, DEFAULT_SAMPLES)?;
    let uniform = resample_uniform(&poly, frames)?;
    derive_profile(&uniform, v_bar)
}
