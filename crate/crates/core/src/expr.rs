//! Predictor formulas: parsing, evaluation over named effect vectors,
//! linearity detection and the formula-level chain rule.
//!
//! Grammar:
//!
//! ```text
//! formula := [ident] '~' sum | sum
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | '+' unary | primary
//! primary := number | '.' | ident | ident '(' args ')' | '(' sum ')'
//! ```
//!
//! Only `exp` and `log` are callable, plus `<name>_eval(...)` whose
//! arguments are numeric literals, `c(...)` lists or `a:b` ranges.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Ref(String),
    /// `name_eval(...)`: component effect at literal input values.
    EvalCall { component: String, args: Vec<f64> },
    /// `.`: the sum of every component.
    Dot,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
}

/// A parsed formula with its optional response name.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorExpr {
    pub response: Option<String>,
    pub body: Expr,
}

pub fn parse_expr(text: &str) -> Result<PredictorExpr> {
    let (response, rhs, offset) = match text.find('~') {
        Some(p) => {
            let lhs = text[..p].trim();
            let response = if lhs.is_empty() {
                None
            } else {
                if !lhs.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.') {
                    return Err(Error::Syntax { pos: 0, msg: format!("invalid response name {lhs:?}") });
                }
                Some(lhs.to_string())
            };
            (response, &text[p + 1..], p + 1)
        }
        None => (None, text, 0),
    };
    let mut p = Parser { src: rhs.as_bytes(), pos: 0, offset };
    let body = p.sum()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(PredictorExpr { response, body })
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    offset: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Syntax { pos: self.pos + self.offset, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.product()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.product()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(b'.') if !self.src.get(self.pos + 1).is_some_and(u8::is_ascii_digit) => {
                self.pos += 1;
                Ok(Expr::Dot)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::Num(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                let name = self.ident();
                if self.peek() != Some(b'(') {
                    return Ok(Expr::Ref(name));
                }
                self.pos += 1;
                match name.as_str() {
                    "exp" | "log" => {
                        let arg = self.sum()?;
                        self.expect(b')')?;
                        Ok(if name == "exp" { Expr::Exp(Box::new(arg)) } else { Expr::Log(Box::new(arg)) })
                    }
                    _ => match name.strip_suffix("_eval") {
                        Some(component) if !component.is_empty() => {
                            let mut args = Vec::new();
                            self.literal_list(&mut args, b')')?;
                            Ok(Expr::EvalCall { component: component.to_string(), args })
                        }
                        _ => {
                            self.pos = start;
                            Err(Error::UnknownFunction(name))
                        }
                    },
                }
            }
            Some(c) => Err(self.err(&format!("unexpected character '{}'", c as char))),
        }
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c.is_ascii_alphanumeric() || c == b'_' || c == b'.' {
                self.pos += 1;
            } else {
                break;
            }
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        let digits = |p: &mut Self| {
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
        };
        digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            digits(self);
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let save = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if self.src.get(self.pos).is_some_and(u8::is_ascii_digit) {
                digits(self);
            } else {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        text.parse::<f64>().map_err(|_| Error::Syntax { pos: start + self.offset, msg: format!("bad number {text:?}") })
    }

    fn signed_number(&mut self) -> Result<f64> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(-self.signed_number()?)
            }
            Some(b'+') => {
                self.pos += 1;
                self.signed_number()
            }
            _ => self.number(),
        }
    }

    // items separated by commas until `close`; each is a number, an a:b
    // range or a nested c(...)
    fn literal_list(&mut self, out: &mut Vec<f64>, close: u8) -> Result<()> {
        if self.peek() == Some(close) {
            self.pos += 1;
            return Ok(());
        }
        loop {
            if self.peek() == Some(b'c') && self.src.get(self.pos + 1) == Some(&b'(') {
                self.pos += 2;
                self.literal_list(out, b')')?;
            } else {
                let a = self.signed_number()?;
                if self.peek() == Some(b':') {
                    self.pos += 1;
                    let b = self.signed_number()?;
                    if a.fract() != 0.0 || b.fract() != 0.0 {
                        return Err(self.err("range bounds must be integers"));
                    }
                    let (a, b) = (a as i64, b as i64);
                    if a <= b {
                        out.extend((a..=b).map(|v| v as f64));
                    } else {
                        out.extend((b..=a).rev().map(|v| v as f64));
                    }
                } else {
                    out.push(a);
                }
            }
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(c) if c == close => {
                    self.pos += 1;
                    return Ok(());
                }
                _ => return Err(self.err("expected ',' or closing parenthesis")),
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Ref(n) => f.write_str(n),
            Expr::EvalCall { component, args } => {
                write!(f, "{component}_eval(c(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a:?}")?;
                }
                f.write_str("))")
            }
            Expr::Dot => f.write_str("."),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Log(a) => write!(f, "log({a})"),
        }
    }
}

impl fmt::Display for PredictorExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.response {
            Some(r) => write!(f, "{r} ~ {}", self.body),
            None => write!(f, "{}", self.body),
        }
    }
}

impl Expr {
    /// Leaf keys under which [`eval_expr`] looks up effect vectors:
    /// component names, `name_latent` names, and printed `_eval` calls.
    pub fn leaves(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| match e {
            Expr::Ref(n) => {
                out.insert(n.clone());
            }
            Expr::EvalCall { .. } => {
                out.insert(e.to_string());
            }
            _ => {}
        });
        out
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Neg(a) | Expr::Exp(a) | Expr::Log(a) => a.visit(f),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            _ => {}
        }
    }

    pub fn contains_dot(&self) -> bool {
        let mut found = false;
        self.visit(&mut |e| found |= matches!(e, Expr::Dot));
        found
    }

    /// Replace `.` by the sum of `names`.
    pub fn expand_dot(&self, names: &[String]) -> Expr {
        match self {
            Expr::Dot => {
                let mut it = names.iter().map(|n| Expr::Ref(n.clone()));
                match it.next() {
                    None => Expr::Num(0.0),
                    Some(first) => it.fold(first, |acc, r| Expr::Add(Box::new(acc), Box::new(r))),
                }
            }
            Expr::Neg(a) => Expr::Neg(Box::new(a.expand_dot(names))),
            Expr::Exp(a) => Expr::Exp(Box::new(a.expand_dot(names))),
            Expr::Log(a) => Expr::Log(Box::new(a.expand_dot(names))),
            Expr::Add(a, b) => Expr::Add(Box::new(a.expand_dot(names)), Box::new(b.expand_dot(names))),
            Expr::Sub(a, b) => Expr::Sub(Box::new(a.expand_dot(names)), Box::new(b.expand_dot(names))),
            Expr::Mul(a, b) => Expr::Mul(Box::new(a.expand_dot(names)), Box::new(b.expand_dot(names))),
            Expr::Div(a, b) => Expr::Div(Box::new(a.expand_dot(names)), Box::new(b.expand_dot(names))),
            other => other.clone(),
        }
    }

    /// `Some(coefficients)` when the expression is a signed sum of distinct
    /// references plus literals; each coefficient is ±1.
    pub fn linear_coefficients(&self) -> Option<Vec<(String, f64)>> {
        fn walk(e: &Expr, sign: f64, out: &mut Vec<(String, f64)>) -> bool {
            match e {
                Expr::Num(_) => true,
                Expr::Ref(n) => {
                    out.push((n.clone(), sign));
                    true
                }
                Expr::Neg(a) => walk(a, -sign, out),
                Expr::Add(a, b) => walk(a, sign, out) && walk(b, sign, out),
                Expr::Sub(a, b) => walk(a, sign, out) && walk(b, -sign, out),
                _ => false,
            }
        }
        let mut out = Vec::new();
        if !walk(self, 1.0, &mut out) {
            return None;
        }
        let distinct: BTreeSet<_> = out.iter().map(|(n, _)| n).collect();
        (distinct.len() == out.len()).then_some(out)
    }
}

/// True for a signed sum of distinct component references with optional
/// literal offsets, and for the `.` formula.
pub fn detect_linear(e: &PredictorExpr) -> bool {
    matches!(e.body, Expr::Dot) || e.body.linear_coefficients().is_some()
}

/// Evaluate elementwise over `rows`; effect vectors of length 1 broadcast.
pub fn eval_expr(e: &Expr, effects: &BTreeMap<String, Vec<f64>>, rows: usize) -> Result<Vec<f64>> {
    let get = |key: &str| -> Result<&Vec<f64>> {
        let v = effects.get(key).ok_or_else(|| Error::UnknownComponent(key.to_string()))?;
        if v.len() != rows && v.len() != 1 {
            return Err(Error::DimensionMismatch { expected: rows, got: v.len() });
        }
        Ok(v)
    };
    let broadcast = |v: &Vec<f64>| if v.len() == rows { v.clone() } else { vec![v[0]; rows] };
    let zip = |a: Vec<f64>, b: Vec<f64>, f: fn(f64, f64) -> f64| a.into_iter().zip(b).map(|(x, y)| f(x, y)).collect();
    Ok(match e {
        Expr::Num(v) => vec![*v; rows],
        Expr::Ref(n) => broadcast(get(n)?),
        Expr::EvalCall { .. } => broadcast(get(&e.to_string())?),
        Expr::Dot => return Err(Error::Eval { row: 0, msg: "'.' must be expanded before evaluation".into() }),
        Expr::Neg(a) => eval_expr(a, effects, rows)?.into_iter().map(|x| -x).collect(),
        Expr::Add(a, b) => zip(eval_expr(a, effects, rows)?, eval_expr(b, effects, rows)?, |x, y| x + y),
        Expr::Sub(a, b) => zip(eval_expr(a, effects, rows)?, eval_expr(b, effects, rows)?, |x, y| x - y),
        Expr::Mul(a, b) => zip(eval_expr(a, effects, rows)?, eval_expr(b, effects, rows)?, |x, y| x * y),
        Expr::Div(a, b) => {
            let num = eval_expr(a, effects, rows)?;
            let den = eval_expr(b, effects, rows)?;
            if let Some(row) = den.iter().position(|&d| d == 0.0) {
                return Err(Error::Eval { row, msg: "division by zero".into() });
            }
            zip(num, den, |x, y| x / y)
        }
        Expr::Exp(a) => eval_expr(a, effects, rows)?.into_iter().map(f64::exp).collect(),
        Expr::Log(a) => {
            let v = eval_expr(a, effects, rows)?;
            if let Some(row) = v.iter().position(|&x| !(x > 0.0)) {
                return Err(Error::Eval { row, msg: format!("log of non-positive value {}", v[row]) });
            }
            v.into_iter().map(f64::ln).collect()
        }
    })
}

/// Formula-level partial derivatives `∂η̃_i / ∂effect_j[i]` for every
/// referenced component, by central differences with step
/// `1e-4·max(1, |effect|)`. Linear formulas get their exact ±1 partials.
pub fn expr_partials(e: &Expr, effects: &BTreeMap<String, Vec<f64>>, rows: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    if let Some(coefs) = e.linear_coefficients() {
        for (name, c) in coefs {
            out.insert(name, vec![c; rows]);
        }
        return Ok(out);
    }
    let names: BTreeSet<String> = e.leaves().into_iter().filter(|k| contains_ref(e, k)).collect();
    let mut work = effects.clone();
    for name in names {
        if !effects.contains_key(&name) {
            return Err(Error::UnknownComponent(name));
        }
        let base = effects[&name].clone();
        let base = if base.len() == rows { base } else { vec![base[0]; rows] };
        let h: Vec<f64> = base.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
        work.insert(name.clone(), base.iter().zip(&h).map(|(v, h)| v + h).collect());
        let plus = eval_expr(e, &work, rows)?;
        work.insert(name.clone(), base.iter().zip(&h).map(|(v, h)| v - h).collect());
        let minus = eval_expr(e, &work, rows)?;
        work.insert(name.clone(), effects[&name].clone());
        let d: Vec<f64> = (0..rows).map(|i| (plus[i] - minus[i]) / (2.0 * h[i])).collect();
        if let Some(row) = d.iter().position(|v| !v.is_finite()) {
            return Err(Error::Eval { row, msg: format!("non-finite derivative with respect to {name}") });
        }
        out.insert(name, d);
    }
    Ok(out)
}

fn contains_ref(e: &Expr, name: &str) -> bool {
    let mut found = false;
    e.visit(&mut |x| found |= matches!(x, Expr::Ref(n) if n == name));
    found
}

/// Chain rule `B^(j) = diag(∂η̃/∂effect_j)·A^(j)` for every component the
/// formula references.
pub fn expr_jacobian(
    e: &Expr,
    effects: &BTreeMap<String, Vec<f64>>,
    component_jacobians: &BTreeMap<String, SparseMatrix>,
    rows: usize,
) -> Result<BTreeMap<String, SparseMatrix>> {
    let partials = expr_partials(e, effects, rows)?;
    let mut out = BTreeMap::new();
    for (name, d) in partials {
        let a = component_jacobians.get(&name).ok_or_else(|| Error::UnknownComponent(name.clone()))?;
        if a.nrows() != rows {
            return Err(Error::DimensionMismatch { expected: rows, got: a.nrows() });
        }
        out.insert(name, a.scale_rows(&d));
    }
    Ok(out)
}
