//! Expression trees for discretized cells: construction, simplification,
//! rendering, parsing and evaluation.
//!
//! Rendering has two styles. [`Style::Display`] rounds coefficients to four
//! decimals for reading; [`Style::Exact`] prints shortest round-trip floats,
//! so parsing it back evaluates to the same function up to reassociation.

use std::fmt::Write as _;

use thiserror::Error;

use crate::ops::{scalar, BinaryOpId, Dual, UnaryOpId};

/// Named scalar functions. Each evaluates exactly like the unary op of the
/// same name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    SignedSqrt,
    Exp,
    Abs,
    Sigmoid,
    Softplus,
    Sinh,
    Tanh,
    Arcsinh,
    Arctan,
    Erf,
    Relu,
    Gelu,
    Silu,
    Elu,
}

impl Func {
    const ALL: [Func; 14] = [
        Self::SignedSqrt,
        Self::Exp,
        Self::Abs,
        Self::Sigmoid,
        Self::Softplus,
        Self::Sinh,
        Self::Tanh,
        Self::Arcsinh,
        Self::Arctan,
        Self::Erf,
        Self::Relu,
        Self::Gelu,
        Self::Silu,
        Self::Elu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SignedSqrt => "sgnsqrt",
            Self::Exp => "exp",
            Self::Abs => "abs",
            Self::Sigmoid => "sigmoid",
            Self::Softplus => "softplus",
            Self::Sinh => "sinh",
            Self::Tanh => "tanh",
            Self::Arcsinh => "arcsinh",
            Self::Arctan => "arctan",
            Self::Erf => "erf",
            Self::Relu => "ReLU",
            Self::Gelu => "GELU",
            Self::Silu => "SiLU",
            Self::Elu => "ELU",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    fn op(self) -> UnaryOpId {
        match self {
            Self::SignedSqrt => UnaryOpId::Sqrt,
            Self::Exp => UnaryOpId::Exp,
            Self::Abs => UnaryOpId::Abs,
            Self::Sigmoid => UnaryOpId::Sigmoid,
            Self::Softplus => UnaryOpId::Softplus,
            Self::Sinh => UnaryOpId::Sinh,
            Self::Tanh => UnaryOpId::Tanh,
            Self::Arcsinh => UnaryOpId::Arcsinh,
            Self::Arctan => UnaryOpId::Arctan,
            Self::Erf => UnaryOpId::Erf,
            Self::Relu => UnaryOpId::MaxZero,
            Self::Gelu => UnaryOpId::Gelu,
            Self::Silu => UnaryOpId::Silu,
            Self::Elu => UnaryOpId::Elu,
        }
    }

    pub fn eval(self, x: f64) -> (f64, f64) {
        let e = self.op().eval(x, 0.0);
        (e.value, e.dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    X,
    Const(f64),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    /// `c·e`
    Scale(f64, Box<Expr>),
    /// `s·a + (1 − s)·b`
    Mix(f64, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
    /// LeakyReLU with the given negative slope.
    LeakyRelu(f64, Box<Expr>),
}

fn bx(e: Expr) -> Box<Expr> {
    Box::new(e)
}

impl Expr {
    /// Applies a unary cell op to `e`. Identity is folded away.
    pub fn unary(op: UnaryOpId, gamma: f64, e: Expr) -> Expr {
        use UnaryOpId::*;
        match op {
            Identity => e,
            Negation => Expr::Neg(bx(e)),
            Square => Expr::Pow(bx(e), 2),
            Cube => Expr::Pow(bx(e), 3),
            Constant => Expr::Const(gamma),
            Scale => Expr::Scale(gamma, bx(e)),
            Shift => Expr::Add(bx(e), bx(Expr::Const(gamma))),
            MinZero => Expr::Min(bx(e), bx(Expr::Const(0.0))),
            LeakyRelu => Expr::LeakyRelu(scalar::LEAKY_SLOPE, bx(e)),
            Sqrt => Expr::Call(Func::SignedSqrt, bx(e)),
            Exp => Expr::Call(Func::Exp, bx(e)),
            Abs => Expr::Call(Func::Abs, bx(e)),
            Sigmoid => Expr::Call(Func::Sigmoid, bx(e)),
            Softplus => Expr::Call(Func::Softplus, bx(e)),
            Sinh => Expr::Call(Func::Sinh, bx(e)),
            Tanh => Expr::Call(Func::Tanh, bx(e)),
            Arcsinh => Expr::Call(Func::Arcsinh, bx(e)),
            Arctan => Expr::Call(Func::Arctan, bx(e)),
            Erf => Expr::Call(Func::Erf, bx(e)),
            MaxZero => Expr::Call(Func::Relu, bx(e)),
            Gelu => Expr::Call(Func::Gelu, bx(e)),
            Silu => Expr::Call(Func::Silu, bx(e)),
            Elu => Expr::Call(Func::Elu, bx(e)),
        }
    }

    /// Applies a binary cell op. Projections drop the unused operand.
    pub fn binary(op: BinaryOpId, gamma: f64, a: Expr, b: Expr) -> Expr {
        use BinaryOpId::*;
        match op {
            Add => Expr::Add(bx(a), bx(b)),
            Sub => Expr::Sub(bx(a), bx(b)),
            Mul => Expr::Mul(bx(a), bx(b)),
            Max => Expr::Max(bx(a), bx(b)),
            Min => Expr::Min(bx(a), bx(b)),
            Gated => Expr::Mul(bx(Expr::Call(Func::Sigmoid, bx(a))), bx(b)),
            WeightedAvg => Expr::Mix(scalar::sigmoid(gamma), bx(a), bx(b)),
            Left => a,
            Right => b,
        }
    }

    /// The cell wiring with the given ops and γ values.
    pub fn from_cell(unary: &[(UnaryOpId, f64); 4], binary: &[(BinaryOpId, f64); 2]) -> Expr {
        let u = |i: usize, e: Expr| Expr::unary(unary[i].0, unary[i].1, e);
        let bottom = Expr::binary(binary[0].0, binary[0].1, u(0, Expr::X), u(1, Expr::X));
        Expr::binary(binary[1].0, binary[1].1, u(2, bottom), u(3, Expr::X))
    }

    pub fn contains_x(&self) -> bool {
        match self {
            Expr::X => true,
            Expr::Const(_) => false,
            Expr::Neg(e) | Expr::Scale(_, e) | Expr::Pow(e, _) | Expr::Call(_, e) | Expr::LeakyRelu(_, e) => {
                e.contains_x()
            }
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Max(a, b)
            | Expr::Min(a, b)
            | Expr::Mix(_, a, b) => a.contains_x() || b.contains_x(),
        }
    }

    pub fn eval_dual(&self, x: Dual) -> Dual {
        match self {
            Expr::X => x,
            Expr::Const(c) => Dual::constant(*c),
            Expr::Neg(e) => -e.eval_dual(x),
            Expr::Add(a, b) => a.eval_dual(x) + b.eval_dual(x),
            Expr::Sub(a, b) => a.eval_dual(x) - b.eval_dual(x),
            Expr::Mul(a, b) => a.eval_dual(x) * b.eval_dual(x),
            Expr::Max(a, b) => {
                let (a, b) = (a.eval_dual(x), b.eval_dual(x));
                if a.v >= b.v {
                    a
                } else {
                    b
                }
            }
            Expr::Min(a, b) => {
                let (a, b) = (a.eval_dual(x), b.eval_dual(x));
                if a.v <= b.v {
                    a
                } else {
                    b
                }
            }
            Expr::Scale(c, e) => *c * e.eval_dual(x),
            Expr::Mix(s, a, b) => *s * a.eval_dual(x) + (1.0 - *s) * b.eval_dual(x),
            Expr::Pow(e, n) => {
                let v = e.eval_dual(x);
                match n {
                    2 => v * v,
                    3 => v * v * v,
                    _ => v.powi(*n),
                }
            }
            Expr::Call(f, e) => e.eval_dual(x).apply(|v| f.eval(v)),
            Expr::LeakyRelu(slope, e) => e.eval_dual(x).apply(|v| scalar::leaky_relu(v, *slope)),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_dual(Dual::constant(x)).v
    }

    /// `(f(x), f'(x))`.
    pub fn eval_with_grad(&self, x: f64) -> (f64, f64) {
        let d = self.eval_dual(Dual::var(x));
        (d.v, d.d)
    }

    /// Rewrites to a fixpoint: constant folding, `Mul` by a constant into
    /// `Scale`, unit/zero elimination, double negation, scale merging and
    /// nested LeakyReLU slope products.
    pub fn simplify(&self) -> Expr {
        let mut cur = self.clone();
        loop {
            let next = cur.simplify_once();
            if next == cur {
                return next;
            }
            cur = next;
        }
    }

    fn simplify_once(&self) -> Expr {
        let s = |e: &Expr| e.simplify_once();
        let node = match self {
            Expr::X | Expr::Const(_) => return self.clone(),
            Expr::Neg(e) => Expr::Neg(bx(s(e))),
            Expr::Add(a, b) => Expr::Add(bx(s(a)), bx(s(b))),
            Expr::Sub(a, b) => Expr::Sub(bx(s(a)), bx(s(b))),
            Expr::Mul(a, b) => Expr::Mul(bx(s(a)), bx(s(b))),
            Expr::Max(a, b) => Expr::Max(bx(s(a)), bx(s(b))),
            Expr::Min(a, b) => Expr::Min(bx(s(a)), bx(s(b))),
            Expr::Scale(c, e) => Expr::Scale(*c, bx(s(e))),
            Expr::Mix(w, a, b) => Expr::Mix(*w, bx(s(a)), bx(s(b))),
            Expr::Pow(e, n) => Expr::Pow(bx(s(e)), *n),
            Expr::Call(f, e) => Expr::Call(*f, bx(s(e))),
            Expr::LeakyRelu(k, e) => Expr::LeakyRelu(*k, bx(s(e))),
        };
        if !node.contains_x() {
            return Expr::Const(node.eval(0.0));
        }
        rewrite(node)
    }
}

fn is_const(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Const(c) if *c == v)
}

fn rewrite(node: Expr) -> Expr {
    match node {
        Expr::Neg(e) => match *e {
            Expr::Neg(inner) => *inner,
            Expr::Scale(c, inner) => Expr::Scale(-c, inner),
            other => Expr::Neg(bx(other)),
        },
        Expr::Add(a, b) if is_const(&b, 0.0) => *a,
        Expr::Add(a, b) if is_const(&a, 0.0) => *b,
        Expr::Sub(a, b) if is_const(&b, 0.0) => *a,
        Expr::Sub(a, b) if is_const(&a, 0.0) => Expr::Neg(b),
        Expr::Mul(a, b) => match (*a, *b) {
            (Expr::Const(c), e) | (e, Expr::Const(c)) => Expr::Scale(c, bx(e)),
            (a, b) => Expr::Mul(bx(a), bx(b)),
        },
        Expr::Scale(1.0, e) => *e,
        Expr::Scale(c, e) => match *e {
            Expr::Scale(d, inner) => Expr::Scale(c * d, inner),
            Expr::Neg(inner) => Expr::Scale(-c, inner),
            other => Expr::Scale(c, bx(other)),
        },
        // Equal operands: exact for max/min, within rounding for the mix.
        Expr::Mix(_, a, b) | Expr::Max(a, b) | Expr::Min(a, b) if a == b => *a,
        Expr::Pow(e, 1) => *e,
        Expr::LeakyRelu(k, e) => match *e {
            Expr::LeakyRelu(j, inner) if k > 0.0 && j > 0.0 => Expr::LeakyRelu(k * j, inner),
            other => Expr::LeakyRelu(k, bx(other)),
        },
        Expr::Call(Func::Relu, e) => match *e {
            Expr::Call(Func::Relu, inner) => Expr::Call(Func::Relu, inner),
            other => Expr::Call(Func::Relu, bx(other)),
        },
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Style {
    /// Four-decimal coefficients.
    Display,
    /// Shortest round-trip coefficients.
    Exact,
}

const PREC_SUM: u8 = 1;
const PREC_PRODUCT: u8 = 2;
const PREC_PREFIX: u8 = 3;
const PREC_POWER: u8 = 4;
const PREC_ATOM: u8 = 5;

fn trim_decimal(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" {
        "0".into()
    } else {
        t.to_string()
    }
}

fn fmt_number(v: f64, style: Style) -> String {
    match style {
        Style::Display => trim_decimal(format!("{v:.4}")),
        Style::Exact => format!("{v}"),
    }
}

fn fmt_slope(v: f64, style: Style) -> String {
    match style {
        Style::Display => {
            let s = format!("{v:.3e}");
            let (mantissa, exp) = s.split_once('e').unwrap_or((&s, "0"));
            format!("{}e{exp}", trim_decimal(mantissa.to_string()))
        }
        Style::Exact => format!("{v:e}"),
    }
}

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) | Expr::Mix(..) => PREC_SUM,
            Expr::Mul(..) => PREC_PRODUCT,
            Expr::Scale(c, _) if *c < 0.0 => PREC_PREFIX - 1,
            Expr::Scale(..) => PREC_PRODUCT,
            Expr::Neg(_) => PREC_PREFIX,
            Expr::Const(c) if c.is_sign_negative() => PREC_PREFIX,
            Expr::Pow(..) => PREC_POWER,
            _ => PREC_ATOM,
        }
    }

    pub fn render(&self, style: Style) -> String {
        let mut out = String::new();
        self.write(&mut out, style, 0);
        out
    }

    fn write(&self, out: &mut String, style: Style, min_prec: u8) {
        let paren = self.precedence() < min_prec;
        if paren {
            out.push('(');
        }
        self.write_bare(out, style);
        if paren {
            out.push(')');
        }
    }

    fn write_term(out: &mut String, style: Style, coeff: f64, e: &Expr) {
        out.push_str(&fmt_number(coeff, style));
        out.push('·');
        e.write(out, style, PREC_PREFIX);
    }

    fn write_bare(&self, out: &mut String, style: Style) {
        match self {
            Expr::X => out.push('x'),
            Expr::Const(c) => out.push_str(&fmt_number(*c, style)),
            Expr::Neg(e) => {
                out.push('-');
                e.write(out, style, PREC_PREFIX);
            }
            Expr::Add(a, b) => {
                a.write(out, style, PREC_SUM);
                match b.as_ref() {
                    Expr::Const(c) if c.is_sign_negative() => {
                        let _ = write!(out, " - {}", fmt_number(-c, style));
                    }
                    Expr::Scale(c, e) if *c < 0.0 => {
                        out.push_str(" - ");
                        Self::write_term(out, style, -c, e);
                    }
                    _ => {
                        out.push_str(" + ");
                        b.write(out, style, PREC_PRODUCT);
                    }
                }
            }
            Expr::Sub(a, b) => {
                a.write(out, style, PREC_SUM);
                out.push_str(" - ");
                b.write(out, style, PREC_PRODUCT);
            }
            Expr::Mul(a, b) => {
                a.write(out, style, PREC_PRODUCT);
                out.push('·');
                b.write(out, style, PREC_PREFIX);
            }
            Expr::Scale(c, e) => Self::write_term(out, style, *c, e),
            Expr::Mix(s, a, b) => {
                let (s, rest) = match style {
                    Style::Display => {
                        let r = (s * 1e4).round() / 1e4;
                        (r, 1.0 - r)
                    }
                    Style::Exact => (*s, 1.0 - s),
                };
                Self::write_term(out, style, s, a);
                out.push_str(" + ");
                Self::write_term(out, style, rest, b);
            }
            Expr::Pow(e, n) => {
                e.write(out, style, PREC_ATOM);
                let _ = write!(out, "^{n}");
            }
            Expr::Call(f, e) => {
                let _ = write!(out, "{}(", f.name());
                e.write(out, style, 0);
                out.push(')');
            }
            Expr::LeakyRelu(k, e) => {
                out.push_str("LeakyReLU");
                if *k != scalar::LEAKY_SLOPE {
                    let _ = write!(out, "_{{{}}}", fmt_slope(*k, style));
                }
                out.push('(');
                e.write(out, style, 0);
                out.push(')');
            }
            Expr::Max(a, b) | Expr::Min(a, b) => {
                out.push_str(if matches!(self, Expr::Max(..)) { "max(" } else { "min(" });
                a.write(out, style, 0);
                out.push_str(", ");
                b.write(out, style, 0);
                out.push(')');
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("formula parse error at character {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Sym(char),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && matches!(chars[i], 'e' | 'E') {
                let mut j = i + 1;
                if j < chars.len() && matches!(chars[j], '+' | '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse().map_err(|_| ParseError {
                position: start,
                message: format!("bad number {text:?}"),
            })?;
            out.push((start, Token::Num(v)));
        } else if c.is_alphabetic() {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((start, Token::Ident(chars[start..i].iter().collect())));
        } else if "+-*·^(),{}".contains(c) {
            out.push((i, Token::Sym(if c == '*' { '·' } else { c })));
            i += 1;
        } else {
            return Err(ParseError {
                position: i,
                message: format!("unexpected character {c:?}"),
            });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            position: self.here(),
            message: message.into(),
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Token::Sym(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(format!("expected {c:?}")))
        }
    }

    fn sum(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.product()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(bx(lhs), bx(self.product()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(bx(lhs), bx(self.product()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.prefix()?;
        while self.eat('·') {
            lhs = Expr::Mul(bx(lhs), bx(self.prefix()?));
        }
        Ok(lhs)
    }

    fn prefix(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            Ok(Expr::Neg(bx(self.prefix()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.eat('^') {
            match self.peek() {
                Some(Token::Num(n)) if n.fract() == 0.0 && n.abs() < 64.0 => {
                    let n = *n as i32;
                    self.pos += 1;
                    Ok(Expr::Pow(bx(base), n))
                }
                _ => Err(self.error("expected a small integer exponent")),
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let token = self.peek().cloned();
        match token {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Token::Sym('(')) => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                let start = self.here();
                self.pos += 1;
                self.named(&name, start)
            }
            _ => Err(self.error("expected a number, x, a function or '('")),
        }
    }

    fn call_arg(&mut self) -> Result<Expr, ParseError> {
        self.expect('(')?;
        let e = self.sum()?;
        self.expect(')')?;
        Ok(e)
    }

    fn named(&mut self, name: &str, start: usize) -> Result<Expr, ParseError> {
        match name {
            "x" => Ok(Expr::X),
            "LeakyReLU" => Ok(Expr::LeakyRelu(scalar::LEAKY_SLOPE, bx(self.call_arg()?))),
            "LeakyReLU_" => {
                self.expect('{')?;
                let k = match self.peek() {
                    Some(Token::Num(k)) => *k,
                    _ => return Err(self.error("expected a slope")),
                };
                self.pos += 1;
                self.expect('}')?;
                Ok(Expr::LeakyRelu(k, bx(self.call_arg()?)))
            }
            "max" | "min" => {
                self.expect('(')?;
                let a = self.sum()?;
                self.expect(',')?;
                let b = self.sum()?;
                self.expect(')')?;
                Ok(if name == "max" {
                    Expr::Max(bx(a), bx(b))
                } else {
                    Expr::Min(bx(a), bx(b))
                })
            }
            _ => match Func::from_name(name) {
                Some(f) => Ok(Expr::Call(f, bx(self.call_arg()?))),
                None => Err(ParseError {
                    position: start,
                    message: format!("unknown function {name:?}"),
                }),
            },
        }
    }
}

/// Parses the rendered grammar (either style; `*` is accepted for `·`).
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let tokens = tokenize(src)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        end: src.chars().count(),
    };
    let e = p.sum()?;
    if p.pos != p.tokens.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(e)
}
