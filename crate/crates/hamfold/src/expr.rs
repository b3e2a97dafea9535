//! Expression trees over time, coordinates, and velocities.
//!
//! The grammar (whitespace insignificant):
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := atom ('^' factor)?
//! atom   := number | symbol | func '(' expr ')' | '(' expr ')' | '-' atom
//! func   := 'sin'|'cos'|'exp'|'log'|'sqrt'
//! symbol := 't' | 'q' digits | 'qd' digits
//! ```
//!
//! Lagrangians treat `q<k>` and `qd<k>` as independent symbols; differentiation
//! never relates them. Trees are immutable values: structural equality is value
//! equality, and every operation here is pure.

use std::fmt;

use crate::error::{Error, Result};

/// Unary functions admitted by the grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl UnaryFn {
    pub fn name(self) -> &'static str {
        match self {
            UnaryFn::Sin => "sin",
            UnaryFn::Cos => "cos",
            UnaryFn::Exp => "exp",
            UnaryFn::Log => "log",
            UnaryFn::Sqrt => "sqrt",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => UnaryFn::Sin,
            "cos" => UnaryFn::Cos,
            "exp" => UnaryFn::Exp,
            "log" => UnaryFn::Log,
            "sqrt" => UnaryFn::Sqrt,
            _ => return None,
        })
    }
}

/// Immutable expression tree. Sums and products are n-ary with ordered
/// children; evaluation folds children left to right.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Sym(String),
    Sum(Vec<Expr>),
    Prod(Vec<Expr>),
    Quot(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Func(UnaryFn, Box<Expr>),
}

impl Expr {
    pub fn zero() -> Expr {
        Expr::Const(0.0)
    }

    pub fn one() -> Expr {
        Expr::Const(1.0)
    }

    pub fn sym(name: &str) -> Expr {
        Expr::Sym(name.to_string())
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    /// True if the symbol occurs anywhere in the tree.
    pub fn references(&self, name: &str) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Sym(s) => s == name,
            Expr::Sum(cs) | Expr::Prod(cs) => cs.iter().any(|c| c.references(name)),
            Expr::Quot(a, b) | Expr::Pow(a, b) => a.references(name) || b.references(name),
            Expr::Neg(a) | Expr::Func(_, a) => a.references(name),
        }
    }

    /// Collect every distinct symbol name, in first-occurrence order.
    pub fn symbols(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols(&self, out: &mut Vec<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Sym(s) => {
                if !out.iter().any(|x| x == s) {
                    out.push(s.clone());
                }
            }
            Expr::Sum(cs) | Expr::Prod(cs) => cs.iter().for_each(|c| c.collect_symbols(out)),
            Expr::Quot(a, b) | Expr::Pow(a, b) => {
                a.collect_symbols(out);
                b.collect_symbols(out);
            }
            Expr::Neg(a) | Expr::Func(_, a) => a.collect_symbols(out),
        }
    }
}

// ---------------------------------------------------------------------------
// Smart constructors: conservative simplification only (constant folding,
// additive/multiplicative identity and annihilator, double negation).
// ---------------------------------------------------------------------------

/// Sum of `children` with flattening, zero dropping, and constant folding.
pub fn add(children: Vec<Expr>) -> Expr {
    let mut flat: Vec<Expr> = Vec::new();
    let mut total = 0.0_f64;
    let mut saw_const = false;
    let mut stack: Vec<Expr> = children.into_iter().rev().collect();
    while let Some(c) = stack.pop() {
        match c {
            Expr::Sum(cs) => stack.extend(cs.into_iter().rev()),
            Expr::Const(v) => {
                total += v;
                saw_const = true;
            }
            other => flat.push(other),
        }
    }
    if saw_const && total.is_finite() && total != 0.0 {
        flat.push(Expr::Const(total));
    } else if saw_const && !total.is_finite() {
        // refuse to fold an overflowing constant sum
        flat.push(Expr::Const(f64::MAX));
    }
    match flat.len() {
        0 => Expr::zero(),
        1 => flat.into_iter().next().unwrap(),
        _ => Expr::Sum(flat),
    }
}

/// Product with flattening, unit dropping, zero annihilation, constant folding.
pub fn mul(children: Vec<Expr>) -> Expr {
    let mut flat: Vec<Expr> = Vec::new();
    let mut coeff = 1.0_f64;
    let mut stack: Vec<Expr> = children.into_iter().rev().collect();
    while let Some(c) = stack.pop() {
        match c {
            Expr::Prod(cs) => stack.extend(cs.into_iter().rev()),
            Expr::Const(v) => coeff *= v,
            other => flat.push(other),
        }
    }
    if coeff == 0.0 {
        return Expr::zero();
    }
    if coeff.is_finite() && coeff != 1.0 {
        flat.insert(0, Expr::Const(coeff));
    }
    match flat.len() {
        0 => Expr::one(),
        1 => flat.into_iter().next().unwrap(),
        _ => Expr::Prod(flat),
    }
}

pub fn neg(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    add(vec![a, neg(b)])
}

pub fn pow(base: Expr, exponent: Expr) -> Expr {
    if let Expr::Const(c) = exponent {
        if c == 0.0 {
            return Expr::one();
        }
        if c == 1.0 {
            return base;
        }
        if let Expr::Const(b) = base {
            let v = b.powf(c);
            if v.is_finite() && !(b < 0.0 && c.fract() != 0.0) {
                return Expr::Const(v);
            }
        }
        return Expr::Pow(Box::new(base), Box::new(Expr::Const(c)));
    }
    if matches!(base, Expr::Const(c) if c == 1.0) {
        return Expr::one();
    }
    Expr::Pow(Box::new(base), Box::new(exponent))
}

pub fn quot(num: Expr, den: Expr) -> Expr {
    if let Expr::Const(d) = den {
        if d == 1.0 {
            return num;
        }
        if d != 0.0 {
            match num {
                Expr::Const(n) => {
                    let v = n / d;
                    if v.is_finite() {
                        return Expr::Const(v);
                    }
                    return Expr::Quot(Box::new(Expr::Const(n)), Box::new(Expr::Const(d)));
                }
                Expr::Prod(mut cs) => {
                    // fold a leading constant factor through the division
                    if let Some(Expr::Const(k)) = cs.first().copied_const() {
                        let v = k / d;
                        if v.is_finite() {
                            cs.remove(0);
                            cs.insert(0, Expr::Const(v));
                            return mul(cs);
                        }
                    }
                    return Expr::Quot(Box::new(Expr::Prod(cs)), Box::new(Expr::Const(d)));
                }
                other => return Expr::Quot(Box::new(other), Box::new(Expr::Const(d))),
            }
        }
    }
    Expr::Quot(Box::new(num), Box::new(den))
}

// helper so the borrow in `quot` stays readable
trait CopiedConst {
    fn copied_const(&self) -> Option<Expr>;
}
impl CopiedConst for Option<&Expr> {
    fn copied_const(&self) -> Option<Expr> {
        match self {
            Some(Expr::Const(c)) => Some(Expr::Const(*c)),
            _ => None,
        }
    }
}

pub fn func(f: UnaryFn, arg: Expr) -> Expr {
    if let Expr::Const(c) = arg {
        let v = match f {
            UnaryFn::Sin => c.sin(),
            UnaryFn::Cos => c.cos(),
            UnaryFn::Exp => c.exp(),
            UnaryFn::Log if c > 0.0 => c.ln(),
            UnaryFn::Sqrt if c >= 0.0 => c.sqrt(),
            _ => f64::NAN,
        };
        if v.is_finite() {
            return Expr::Const(v);
        }
        return Expr::Func(f, Box::new(Expr::Const(c)));
    }
    Expr::Func(f, Box::new(arg))
}

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

/// Exact partial derivative with respect to the symbol `wrt`.
///
/// The result is simplified by the smart constructors; correctness is defined
/// by evaluation, not by canonical form.
pub fn differentiate(e: &Expr, wrt: &str) -> Expr {
    match e {
        Expr::Const(_) => Expr::zero(),
        Expr::Sym(s) => {
            if s == wrt {
                Expr::one()
            } else {
                Expr::zero()
            }
        }
        Expr::Sum(cs) => add(cs.iter().map(|c| differentiate(c, wrt)).collect()),
        Expr::Prod(cs) => {
            let mut terms = Vec::new();
            for (i, ci) in cs.iter().enumerate() {
                let di = differentiate(ci, wrt);
                if di.is_zero() {
                    continue;
                }
                let mut factors: Vec<Expr> = Vec::with_capacity(cs.len());
                for (j, cj) in cs.iter().enumerate() {
                    factors.push(if i == j { di.clone() } else { cj.clone() });
                }
                terms.push(mul(factors));
            }
            add(terms)
        }
        Expr::Quot(a, b) => {
            let da = differentiate(a, wrt);
            let db = differentiate(b, wrt);
            if db.is_zero() {
                quot(da, (**b).clone())
            } else {
                let num = sub(mul(vec![da, (**b).clone()]), mul(vec![(**a).clone(), db]));
                quot(num, pow((**b).clone(), Expr::Const(2.0)))
            }
        }
        Expr::Pow(a, b) => {
            let da = differentiate(a, wrt);
            match &**b {
                Expr::Const(c) => mul(vec![
                    Expr::Const(*c),
                    pow((**a).clone(), Expr::Const(c - 1.0)),
                    da,
                ]),
                _ => {
                    let db = differentiate(b, wrt);
                    let log_term = mul(vec![db, func(UnaryFn::Log, (**a).clone())]);
                    let ratio_term = quot(mul(vec![(**b).clone(), da]), (**a).clone());
                    mul(vec![e.clone(), add(vec![log_term, ratio_term])])
                }
            }
        }
        Expr::Neg(a) => neg(differentiate(a, wrt)),
        Expr::Func(f, a) => {
            let da = differentiate(a, wrt);
            if da.is_zero() {
                return Expr::zero();
            }
            match f {
                UnaryFn::Sin => mul(vec![func(UnaryFn::Cos, (**a).clone()), da]),
                UnaryFn::Cos => neg(mul(vec![func(UnaryFn::Sin, (**a).clone()), da])),
                UnaryFn::Exp => mul(vec![e.clone(), da]),
                UnaryFn::Log => quot(da, (**a).clone()),
                UnaryFn::Sqrt => quot(
                    da,
                    mul(vec![Expr::Const(2.0), func(UnaryFn::Sqrt, (**a).clone())]),
                ),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluation point for a Lagrangian expression: time, coordinates, velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl Binding {
    pub fn new(t: f64, q: Vec<f64>, qd: Vec<f64>) -> Self {
        Binding { t, q, qd }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    fn resolve(&self, name: &str) -> Option<f64> {
        if name == "t" {
            return Some(self.t);
        }
        if let Some(rest) = name.strip_prefix("qd") {
            let k: usize = rest.parse().ok()?;
            return self.qd.get(k.checked_sub(1)?).copied();
        }
        if let Some(rest) = name.strip_prefix('q') {
            let k: usize = rest.parse().ok()?;
            return self.q.get(k.checked_sub(1)?).copied();
        }
        None
    }
}

fn domain_error(reason: &str, subexpr: &Expr) -> Error {
    Error::EvalDomain {
        reason: reason.to_string(),
        subexpr: subexpr.to_string(),
    }
}

/// Evaluate against an arbitrary symbol resolver.
pub fn evaluate_with(e: &Expr, resolve: &dyn Fn(&str) -> Option<f64>) -> Result<f64> {
    let v = match e {
        Expr::Const(c) => *c,
        Expr::Sym(s) => resolve(s).ok_or_else(|| Error::UnboundSymbol { name: s.clone() })?,
        Expr::Sum(cs) => {
            let mut acc = 0.0;
            for c in cs {
                acc += evaluate_with(c, resolve)?;
            }
            acc
        }
        Expr::Prod(cs) => {
            let mut acc = 1.0;
            for c in cs {
                acc *= evaluate_with(c, resolve)?;
            }
            acc
        }
        Expr::Quot(a, b) => {
            let den = evaluate_with(b, resolve)?;
            if den == 0.0 {
                return Err(domain_error("division by zero", e));
            }
            evaluate_with(a, resolve)? / den
        }
        Expr::Pow(a, b) => {
            let base = evaluate_with(a, resolve)?;
            let exp = evaluate_with(b, resolve)?;
            if base < 0.0 && exp.fract() != 0.0 {
                return Err(domain_error("non-integer power of a negative base", e));
            }
            if base == 0.0 && exp < 0.0 {
                return Err(domain_error("zero base with negative exponent", e));
            }
            base.powf(exp)
        }
        Expr::Neg(a) => -evaluate_with(a, resolve)?,
        Expr::Func(f, a) => {
            let x = evaluate_with(a, resolve)?;
            match f {
                UnaryFn::Sin => x.sin(),
                UnaryFn::Cos => x.cos(),
                UnaryFn::Exp => x.exp(),
                UnaryFn::Log => {
                    if x <= 0.0 {
                        return Err(domain_error("logarithm of a nonpositive value", e));
                    }
                    x.ln()
                }
                UnaryFn::Sqrt => {
                    if x < 0.0 {
                        return Err(domain_error("square root of a negative value", e));
                    }
                    x.sqrt()
                }
            }
        }
    };
    if !v.is_finite() {
        return Err(domain_error("non-finite result", e));
    }
    Ok(v)
}

/// Evaluate a Lagrangian expression at a [`Binding`].
pub fn evaluate(e: &Expr, at: &Binding) -> Result<f64> {
    evaluate_with(e, &|name| at.resolve(name))
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// True for names of the Lagrangian symbol grammar: `t`, `q<k>`, `qd<k>`
/// with `k` a positive integer without leading zeros.
pub fn is_lagrangian_symbol(name: &str) -> bool {
    if name == "t" {
        return true;
    }
    let digits = name
        .strip_prefix("qd")
        .or_else(|| name.strip_prefix('q'));
    match digits {
        Some(d) => {
            !d.is_empty()
                && d.bytes().all(|b| b.is_ascii_digit())
                && !d.starts_with('0')
        }
        None => false,
    }
}

/// True for names over a reduced or extended phase space:
/// `t`, `q<i>`, `p<i>`, `Q<a>`, `P<a>`.
pub fn is_phase_symbol(name: &str) -> bool {
    if name == "t" {
        return true;
    }
    let mut chars = name.chars();
    match chars.next() {
        Some('q') | Some('p') | Some('Q') | Some('P') => {
            let d = &name[1..];
            !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()) && !d.starts_with('0')
        }
        _ => false,
    }
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
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number `{v}`"),
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Caret => "`^`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b' ' | b'\t' | b'\r' | b'\n' => i += 1,
            b'+' => {
                toks.push((Tok::Plus, i));
                i += 1;
            }
            b'-' => {
                toks.push((Tok::Minus, i));
                i += 1;
            }
            b'*' => {
                toks.push((Tok::Star, i));
                i += 1;
            }
            b'/' => {
                toks.push((Tok::Slash, i));
                i += 1;
            }
            b'^' => {
                toks.push((Tok::Caret, i));
                i += 1;
            }
            b'(' => {
                toks.push((Tok::LParen, i));
                i += 1;
            }
            b')' => {
                toks.push((Tok::RParen, i));
                i += 1;
            }
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                // exponent only when followed by a digit (with optional sign)
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
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| Error::Syntax {
                    offset: start,
                    expected: "number".into(),
                    found: format!("`{text}`"),
                })?;
                toks.push((Tok::Num(v), start));
            }
            b'a'..=b'z' | b'A'..=b'Z' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric()) {
                    i += 1;
                }
                toks.push((Tok::Ident(src[start..i].to_string()), start));
            }
            _ => {
                return Err(Error::Syntax {
                    offset: i,
                    expected: "number, symbol, function, `(`, or operator".into(),
                    found: format!("`{}`", &src[i..i + 1]),
                })
            }
        }
    }
    toks.push((Tok::Eof, src.len()));
    Ok(toks)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    validate: &'a dyn Fn(&str) -> bool,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok, expected: &str) -> Result<()> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(Error::Syntax {
                offset: self.offset(),
                expected: expected.into(),
                found: self.peek().describe(),
            })
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let first = self.term()?;
        let mut children = vec![first];
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    children.push(self.term()?);
                }
                Tok::Minus => {
                    self.bump();
                    children.push(Expr::Neg(Box::new(self.term()?)));
                }
                _ => break,
            }
        }
        Ok(if children.len() == 1 {
            children.into_iter().next().unwrap()
        } else {
            Expr::Sum(children)
        })
    }

    fn term(&mut self) -> Result<Expr> {
        let mut acc = self.factor()?;
        loop {
            match self.peek() {
                Tok::Star => {
                    self.bump();
                    let rhs = self.factor()?;
                    acc = match acc {
                        Expr::Prod(mut cs) => {
                            cs.push(rhs);
                            Expr::Prod(cs)
                        }
                        other => Expr::Prod(vec![other, rhs]),
                    };
                }
                Tok::Slash => {
                    self.bump();
                    let rhs = self.factor()?;
                    acc = Expr::Quot(Box::new(acc), Box::new(rhs));
                }
                _ => break,
            }
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if *self.peek() == Tok::Caret {
            self.bump();
            let exp = self.factor()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let offset = self.offset();
        match self.bump() {
            Tok::Num(v) => Ok(Expr::Const(v)),
            Tok::Minus => Ok(Expr::Neg(Box::new(self.atom()?))),
            Tok::LParen => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if *self.peek() == Tok::LParen {
                    let f = UnaryFn::from_name(&name)
                        .ok_or(Error::UnknownFunction { name: name.clone(), offset })?;
                    self.bump();
                    let arg = self.expr()?;
                    self.expect(Tok::RParen, "`)`")?;
                    Ok(Expr::Func(f, Box::new(arg)))
                } else {
                    if !(self.validate)(&name) {
                        return Err(Error::MalformedSymbol { name, offset });
                    }
                    Ok(Expr::Sym(name))
                }
            }
            other => Err(Error::Syntax {
                offset,
                expected: "number, symbol, function call, `(`, or `-`".into(),
                found: other.describe(),
            }),
        }
    }
}

/// Parse with a caller-supplied symbol validator.
pub fn parse_with(source: &str, validate: &dyn Fn(&str) -> bool) -> Result<Expr> {
    let toks = tokenize(source)?;
    let mut p = Parser { toks, pos: 0, validate };
    let e = p.expr()?;
    if *p.peek() != Tok::Eof {
        return Err(Error::Syntax {
            offset: p.offset(),
            expected: "operator or end of input".into(),
            found: p.peek().describe(),
        });
    }
    Ok(e)
}

/// Parse a Lagrangian expression (symbols `t`, `q<k>`, `qd<k>`).
pub fn parse(source: &str) -> Result<Expr> {
    parse_with(source, &is_lagrangian_symbol)
}

/// Parse a phase-space expression (symbols `t`, `q<i>`, `p<i>`, `Q<a>`, `P<a>`).
pub fn parse_phase(source: &str) -> Result<Expr> {
    parse_with(source, &is_phase_symbol)
}

// ---------------------------------------------------------------------------
// Printing (round-trips through the parser)
// ---------------------------------------------------------------------------

impl Expr {
    fn is_atomic(&self) -> bool {
        matches!(
            self,
            Expr::Sym(_) | Expr::Func(_, _)
        ) || matches!(self, Expr::Const(c) if *c >= 0.0)
    }

    fn fmt_paren(&self, f: &mut fmt::Formatter<'_>, paren: bool) -> fmt::Result {
        if paren {
            write!(f, "(")?;
            write!(f, "{self}")?;
            write!(f, ")")
        } else {
            write!(f, "{self}")
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Sym(s) => write!(f, "{s}"),
            Expr::Sum(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    if i == 0 {
                        c.fmt_paren(f, matches!(c, Expr::Sum(_)))?;
                    } else if let Expr::Neg(inner) = c {
                        write!(f, " - ")?;
                        inner.fmt_paren(f, matches!(**inner, Expr::Sum(_)))?;
                    } else {
                        write!(f, " + ")?;
                        c.fmt_paren(f, matches!(c, Expr::Sum(_)))?;
                    }
                }
                Ok(())
            }
            Expr::Prod(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        write!(f, "*")?;
                    }
                    let needs = matches!(c, Expr::Sum(_) | Expr::Neg(_))
                        || (i > 0 && matches!(c, Expr::Quot(_, _)));
                    c.fmt_paren(f, needs)?;
                }
                Ok(())
            }
            Expr::Quot(a, b) => {
                a.fmt_paren(f, matches!(**a, Expr::Sum(_) | Expr::Neg(_)))?;
                write!(f, "/")?;
                b.fmt_paren(
                    f,
                    matches!(**b, Expr::Sum(_) | Expr::Prod(_) | Expr::Quot(_, _) | Expr::Neg(_)),
                )
            }
            Expr::Pow(a, b) => {
                a.fmt_paren(f, !a.is_atomic())?;
                write!(f, "^")?;
                b.fmt_paren(f, matches!(**b, Expr::Sum(_) | Expr::Prod(_) | Expr::Quot(_, _)))
            }
            Expr::Neg(a) => {
                write!(f, "-")?;
                a.fmt_paren(f, !a.is_atomic())
            }
            Expr::Func(fun, a) => write!(f, "{}({})", fun.name(), a),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn b1(q1: f64, qd1: f64) -> Binding {
        Binding::new(0.0, vec![q1], vec![qd1])
    }

    #[test]
    fn parse_oscillator_lagrangian() {
        let e = parse("qd1^2/2 - q1^2/2").unwrap();
        let v = evaluate(&e, &b1(1.0, 2.0)).unwrap();
        assert_eq!(v, 1.5);
    }

    #[test]
    fn parse_first_order_lagrangian() {
        let e = parse("q2*qd1 - 0.5*(q1^2+q2^2)").unwrap();
        let at = Binding::new(0.0, vec![1.0, 3.0], vec![-2.0, 0.0]);
        assert_eq!(evaluate(&e, &at).unwrap(), 3.0 * -2.0 - 0.5 * 10.0);
        let syms = e.symbols();
        assert!(syms.contains(&"q1".to_string()));
        assert!(syms.contains(&"q2".to_string()));
        assert!(syms.contains(&"qd1".to_string()));
    }

    #[test]
    fn malformed_symbols_rejected() {
        assert!(matches!(
            parse("sin(qq1)"),
            Err(Error::MalformedSymbol { name, .. }) if name == "qq1"
        ));
        assert!(matches!(
            parse("q0 + 1"),
            Err(Error::MalformedSymbol { name, .. }) if name == "q0"
        ));
        assert!(matches!(
            parse("qdx"),
            Err(Error::MalformedSymbol { name, .. }) if name == "qdx"
        ));
        assert!(matches!(
            parse("q01"),
            Err(Error::MalformedSymbol { name, .. }) if name == "q01"
        ));
    }

    #[test]
    fn unknown_function_rejected() {
        assert!(matches!(
            parse("tan(q1)"),
            Err(Error::UnknownFunction { name, offset }) if name == "tan" && offset == 0
        ));
    }

    #[test]
    fn syntax_error_carries_offset() {
        match parse("q1 + * q2") {
            Err(Error::Syntax { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn derivative_power_rule() {
        let e = parse("qd1^2/2").unwrap();
        let d = differentiate(&e, "qd1");
        assert_eq!(d, parse("qd1").unwrap());
    }

    #[test]
    fn derivative_product_rule() {
        let e = parse("q2*qd1").unwrap();
        assert_eq!(differentiate(&e, "q2"), parse("qd1").unwrap());
        assert_eq!(differentiate(&e, "qd2"), Expr::zero());
    }

    #[test]
    fn evaluate_examples() {
        let e = parse("q2*qd1").unwrap();
        let at = Binding::new(0.0, vec![0.0, 3.0], vec![-2.0, 0.0]);
        assert_eq!(evaluate(&e, &at).unwrap(), -6.0);

        let e = parse("log(q1)").unwrap();
        assert!(matches!(
            evaluate(&e, &b1(0.0, 0.0)),
            Err(Error::EvalDomain { .. })
        ));
    }

    #[test]
    fn division_by_zero_reports_subexpression() {
        let e = parse("1/(q1 - 1)").unwrap();
        match evaluate(&e, &b1(1.0, 0.0)) {
            Err(Error::EvalDomain { reason, subexpr }) => {
                assert!(reason.contains("division"));
                assert!(subexpr.contains("q1"));
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn negative_base_fractional_power_is_domain_error() {
        let e = parse("q1^0.5").unwrap();
        assert!(evaluate(&e, &b1(-1.0, 0.0)).is_err());
        assert!(evaluate(&e, &b1(4.0, 0.0)).is_ok());
    }

    // Bounded random expression generator for the numeric invariants. Avoids
    // log/sqrt/fractional powers so every draw is total on the sample box.
    fn random_expr(rng: &mut StdRng, depth: usize) -> Expr {
        let symbols = ["t", "q1", "q2", "qd1", "qd2"];
        let choice: u32 = if depth == 0 {
            rng.gen_range(0..2)
        } else {
            rng.gen_range(0..8)
        };
        match choice {
            0 => Expr::Const(rng.gen_range(-2.0..2.0)),
            1 => Expr::sym(symbols[rng.gen_range(0..symbols.len())]),
            2 => Expr::Sum(vec![random_expr(rng, depth - 1), random_expr(rng, depth - 1)]),
            3 => Expr::Prod(vec![random_expr(rng, depth - 1), random_expr(rng, depth - 1)]),
            4 => Expr::Neg(Box::new(random_expr(rng, depth - 1))),
            5 => Expr::Func(UnaryFn::Sin, Box::new(random_expr(rng, depth - 1))),
            6 => Expr::Pow(
                Box::new(random_expr(rng, depth - 1)),
                Box::new(Expr::Const(rng.gen_range(2..4) as f64)),
            ),
            // denominator bounded away from zero
            _ => Expr::Quot(
                Box::new(random_expr(rng, depth - 1)),
                Box::new(Expr::Sum(vec![
                    Expr::Const(3.0),
                    Expr::Pow(
                        Box::new(Expr::sym(symbols[rng.gen_range(0..symbols.len())])),
                        Box::new(Expr::Const(2.0)),
                    ),
                ])),
            ),
        }
    }

    fn random_binding(rng: &mut StdRng) -> Binding {
        Binding::new(
            rng.gen_range(-1.0..1.0),
            vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        )
    }

    #[test]
    fn derivative_matches_central_difference() {
        let mut rng = StdRng::seed_from_u64(42);
        let symbols = ["t", "q1", "q2", "qd1", "qd2"];
        let mut checked = 0;
        while checked < 200 {
            let e = random_expr(&mut rng, 3);
            let at = random_binding(&mut rng);
            let wrt = symbols[rng.gen_range(0..symbols.len())];
            let d = differentiate(&e, wrt);
            let (Ok(analytic), Ok(_)) = (evaluate(&d, &at), evaluate(&e, &at)) else {
                continue;
            };
            if analytic.abs() > 1e6 {
                continue; // steep draw: finite differences meaningless
            }
            let numeric = central_diff(&e, &at, wrt, 1e-6);
            let tol = 1e-5 * (1.0 + analytic.abs());
            assert!(
                (analytic - numeric).abs() <= tol,
                "d/d{wrt} of {e}: analytic {analytic}, numeric {numeric}"
            );
            checked += 1;
        }
    }

    #[test]
    fn derivative_is_linear() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let e1 = random_expr(&mut rng, 3);
            let e2 = random_expr(&mut rng, 3);
            let a = rng.gen_range(-2.0..2.0);
            let combo = add(vec![mul(vec![Expr::Const(a), e1.clone()]), e2.clone()]);
            let lhs = differentiate(&combo, "q1");
            let rhs = add(vec![
                mul(vec![Expr::Const(a), differentiate(&e1, "q1")]),
                differentiate(&e2, "q1"),
            ]);
            let at = random_binding(&mut rng);
            let (Ok(l), Ok(r)) = (evaluate(&lhs, &at), evaluate(&rhs, &at)) else {
                continue;
            };
            assert!((l - r).abs() <= 1e-12 * (1.0 + l.abs().max(r.abs())));
        }
    }

    #[test]
    fn mixed_partials_commute() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let e = random_expr(&mut rng, 3);
            let dxy = differentiate(&differentiate(&e, "q1"), "qd2");
            let dyx = differentiate(&differentiate(&e, "qd2"), "q1");
            let at = random_binding(&mut rng);
            let (Ok(a), Ok(b)) = (evaluate(&dxy, &at), evaluate(&dyx, &at)) else {
                continue;
            };
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs())));
        }
    }

    #[test]
    fn log_sqrt_derivatives() {
        let e = parse("log(2 + q1^2)").unwrap();
        let d = differentiate(&e, "q1");
        let at = b1(0.7, 0.0);
        let expected = 2.0 * 0.7 / (2.0 + 0.49);
        assert!((evaluate(&d, &at).unwrap() - expected).abs() < 1e-12);

        let e = parse("sqrt(2 + qd1^2)").unwrap();
        let d = differentiate(&e, "qd1");
        let at = b1(0.0, 0.3);
        let expected = 0.3 / (2.0_f64 + 0.09).sqrt();
        assert!((evaluate(&d, &at).unwrap() - expected).abs() < 1e-12);
    }

    fn central_diff(e: &Expr, at: &Binding, wrt: &str, h: f64) -> f64 {
        let mut plus = at.clone();
        let mut minus = at.clone();
        let bump = |b: &mut Binding, dir: f64| {
            if wrt == "t" {
                b.t += dir * h;
            } else if let Some(rest) = wrt.strip_prefix("qd") {
                let k: usize = rest.parse().unwrap();
                b.qd[k - 1] += dir * h;
            } else {
                let k: usize = wrt[1..].parse().unwrap();
                b.q[k - 1] += dir * h;
            }
        };
        bump(&mut plus, 1.0);
        bump(&mut minus, -1.0);
        (evaluate(e, &plus).unwrap() - evaluate(e, &minus).unwrap()) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(src in source_strategy()) {
            let tree = parse(&src).unwrap();
            let printed = tree.to_string();
            let reparsed = parse(&printed).unwrap();
            prop_assert_eq!(tree, reparsed);
        }
    }

    // Strategy over well-formed source strings: the round-trip invariant is
    // stated for parser output.
    fn source_strategy() -> impl Strategy<Value = String> {
        let leaf = prop_oneof![
            Just("q1".to_string()),
            Just("q2".to_string()),
            Just("qd1".to_string()),
            Just("qd2".to_string()),
            Just("t".to_string()),
            (0u32..1000, 0u32..100).prop_map(|(a, b)| format!("{a}.{b}")),
        ];
        leaf.prop_recursive(4, 48, 4, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a} + {b}")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a} - {b}")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a}*{b}")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a}/({b} + 7)")),
                inner.clone().prop_map(|a| format!("-({a})")),
                inner.clone().prop_map(|a| format!("sin({a})")),
                inner.clone().prop_map(|a| format!("cos({a})")),
                inner.clone().prop_map(|a| format!("({a})^2")),
                inner.clone().prop_map(|a| format!("exp({a}/10)")),
            ]
        })
    }
}
