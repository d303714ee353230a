//! Scalar field expressions over chart coordinates `x1..xn`.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' int)?
//! int    := ['-'] digits | '(' ['-'] digits ')'
//! atom   := number | var | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! Functions are `sin`, `cos`, `exp`, `sqrt`, `log`. Expressions are compiled to a
//! postfix tape which is evaluated either on plain floats or on [`Jet`]s.

use std::fmt;

use crate::error::{Error, Result};
use crate::jet::{compose_into, jet_len, mul_into, Jet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Log,
}

impl Func {
    fn from_name(s: &str) -> Option<Func> {
        match s {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            "sqrt" => Some(Func::Sqrt),
            "log" => Some(Func::Log),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Log => "log",
        }
    }

    /// Value and first three derivatives at `u`.
    fn derivs(self, u: f64, order: usize) -> Result<[f64; 4]> {
        Ok(match self {
            Func::Sin => {
                let (s, c) = u.sin_cos();
                [s, c, -s, -c]
            }
            Func::Cos => {
                let (s, c) = u.sin_cos();
                [c, -s, -c, s]
            }
            Func::Exp => {
                let e = u.exp();
                [e; 4]
            }
            Func::Log => {
                if u <= 0.0 {
                    return Err(Error::Singularity(format!("log of non-positive value {u}")));
                }
                let r = 1.0 / u;
                [u.ln(), r, -r * r, 2.0 * r * r * r]
            }
            Func::Sqrt => {
                if u < 0.0 || (u == 0.0 && order > 0) {
                    return Err(Error::Singularity(format!("sqrt of non-positive value {u}")));
                }
                let s = u.sqrt();
                if order == 0 {
                    [s, 0.0, 0.0, 0.0]
                } else {
                    [s, 0.5 / s, -0.25 / (s * u), 0.375 / (s * u * u)]
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ast {
    Num(f64),
    Var(usize),
    Neg(Box<Ast>),
    Add(Box<Ast>, Box<Ast>),
    Sub(Box<Ast>, Box<Ast>),
    Mul(Box<Ast>, Box<Ast>),
    Div(Box<Ast>, Box<Ast>),
    Pow(Box<Ast>, i32),
    Call(Func, Box<Ast>),
}

impl Ast {
    fn prec(&self) -> u8 {
        match self {
            Ast::Add(..) | Ast::Sub(..) => 1,
            Ast::Mul(..) | Ast::Div(..) => 2,
            Ast::Neg(..) => 3,
            Ast::Pow(..) => 4,
            Ast::Num(v) if *v < 0.0 => 3,
            _ => 5,
        }
    }

    fn max_var(&self) -> Option<usize> {
        match self {
            Ast::Num(_) => None,
            Ast::Var(i) => Some(*i),
            Ast::Neg(a) | Ast::Pow(a, _) | Ast::Call(_, a) => a.max_var(),
            Ast::Add(a, b) | Ast::Sub(a, b) | Ast::Mul(a, b) | Ast::Div(a, b) => {
                match (a.max_var(), b.max_var()) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                }
            }
        }
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, child: &Ast, min_prec: u8) -> fmt::Result {
    if child.prec() < min_prec {
        write!(f, "({child})")
    } else {
        write!(f, "{child}")
    }
}

impl fmt::Display for Ast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ast::Num(v) => write!(f, "{v:?}"),
            Ast::Var(i) => write!(f, "x{}", i + 1),
            Ast::Neg(a) => {
                write!(f, "-")?;
                write_child(f, a, 3)
            }
            Ast::Add(a, b) => {
                write_child(f, a, 1)?;
                write!(f, " + ")?;
                write_child(f, b, 2)
            }
            Ast::Sub(a, b) => {
                write_child(f, a, 1)?;
                write!(f, " - ")?;
                write_child(f, b, 2)
            }
            Ast::Mul(a, b) => {
                write_child(f, a, 2)?;
                write!(f, "*")?;
                write_child(f, b, 3)
            }
            Ast::Div(a, b) => {
                write_child(f, a, 2)?;
                write!(f, "/")?;
                write_child(f, b, 3)
            }
            Ast::Pow(a, k) => {
                write_child(f, a, 5)?;
                if *k < 0 {
                    write!(f, "^({k})")
                } else {
                    write!(f, "^{k}")
                }
            }
            Ast::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    pos: usize,
    text: String,
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = text.chars().collect();
    let mut toks = Vec::new();
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
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v: f64 = s.parse().map_err(|_| Error::Syntax {
                pos: start,
                token: s.clone(),
                msg: "malformed number".into(),
            })?;
            toks.push(Token { tok: Tok::Num(v), pos: start, text: s });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            toks.push(Token { tok: Tok::Ident(s.clone()), pos: start, text: s });
        } else if "+-*/^(),".contains(c) {
            toks.push(Token { tok: Tok::Op(c), pos: i, text: c.to_string() });
            i += 1;
        } else {
            return Err(Error::Syntax {
                pos: i,
                token: c.to_string(),
                msg: "unexpected character".into(),
            });
        }
    }
    toks.push(Token { tok: Tok::End, pos: chars.len(), text: "<end>".into() });
    Ok(toks)
}

struct Parser<'a> {
    toks: &'a [Token],
    i: usize,
    n: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &Token {
        &self.toks[self.i]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.i].clone();
        if self.i + 1 < self.toks.len() {
            self.i += 1;
        }
        t
    }

    fn err<T>(&self, t: &Token, msg: &str) -> Result<T> {
        Err(Error::Syntax { pos: t.pos, token: t.text.clone(), msg: msg.into() })
    }

    fn is_op(&self, c: char) -> bool {
        self.peek().tok == Tok::Op(c)
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.is_op(c) {
            self.bump();
            Ok(())
        } else {
            let t = self.peek().clone();
            self.err(&t, &format!("expected '{c}'"))
        }
    }

    fn expr(&mut self) -> Result<Ast> {
        let mut lhs = self.term()?;
        loop {
            if self.is_op('+') {
                self.bump();
                lhs = Ast::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.is_op('-') {
                self.bump();
                lhs = Ast::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Ast> {
        let mut lhs = self.unary()?;
        loop {
            if self.is_op('*') {
                self.bump();
                lhs = Ast::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.is_op('/') {
                self.bump();
                lhs = Ast::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Ast> {
        if self.is_op('-') {
            self.bump();
            return Ok(Ast::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Ast> {
        let base = self.atom()?;
        if self.is_op('^') {
            self.bump();
            let k = self.int_exponent()?;
            return Ok(Ast::Pow(Box::new(base), k));
        }
        Ok(base)
    }

    fn int_exponent(&mut self) -> Result<i32> {
        let paren = self.is_op('(');
        if paren {
            self.bump();
        }
        let neg = self.is_op('-');
        if neg {
            self.bump();
        }
        let t = self.bump();
        let k = match t.tok {
            Tok::Num(v) if v.fract() == 0.0 && v.abs() <= 1024.0 && !t.text.contains('.') => v as i32,
            _ => return self.err(&t, "exponent must be an integer literal"),
        };
        if paren {
            self.expect(')')?;
        }
        Ok(if neg { -k } else { k })
    }

    fn atom(&mut self) -> Result<Ast> {
        let t = self.bump();
        match &t.tok {
            Tok::Num(v) => Ok(Ast::Num(*v)),
            Tok::Ident(name) => {
                if let Some(func) = Func::from_name(name) {
                    if !self.is_op('(') {
                        let nt = self.peek().clone();
                        return self.err(&nt, &format!("expected '(' after {name}"));
                    }
                    self.bump();
                    if self.is_op(')') {
                        return Err(Error::Arity { name: name.clone(), got: 0, pos: t.pos });
                    }
                    let arg = self.expr()?;
                    let mut got = 1;
                    while self.is_op(',') {
                        self.bump();
                        self.expr()?;
                        got += 1;
                    }
                    if got != 1 {
                        return Err(Error::Arity { name: name.clone(), got, pos: t.pos });
                    }
                    self.expect(')')?;
                    return Ok(Ast::Call(func, Box::new(arg)));
                }
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(k) = rest.parse::<usize>() {
                        if k >= 1 && k <= self.n && !rest.starts_with('0') {
                            return Ok(Ast::Var(k - 1));
                        }
                    }
                }
                Err(Error::UnknownIdentifier { name: name.clone(), pos: t.pos })
            }
            Tok::Op('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::End => self.err(&t, "unexpected end of input"),
            Tok::Op(_) => self.err(&t, "unexpected token"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Instr {
    Num(f64),
    Var(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow(i32),
    Call(Func),
}

fn compile(ast: &Ast, tape: &mut Vec<Instr>) {
    match ast {
        Ast::Num(v) => tape.push(Instr::Num(*v)),
        Ast::Var(i) => tape.push(Instr::Var(*i)),
        Ast::Neg(a) => {
            compile(a, tape);
            tape.push(Instr::Neg);
        }
        Ast::Add(a, b) | Ast::Sub(a, b) | Ast::Mul(a, b) | Ast::Div(a, b) => {
            compile(a, tape);
            compile(b, tape);
            tape.push(match ast {
                Ast::Add(..) => Instr::Add,
                Ast::Sub(..) => Instr::Sub,
                Ast::Mul(..) => Instr::Mul,
                _ => Instr::Div,
            });
        }
        Ast::Pow(a, k) => {
            compile(a, tape);
            tape.push(Instr::Pow(*k));
        }
        Ast::Call(f, a) => {
            compile(a, tape);
            tape.push(Instr::Call(*f));
        }
    }
}

fn stack_depth(tape: &[Instr]) -> usize {
    let (mut d, mut max) = (0usize, 0usize);
    for ins in tape {
        match ins {
            Instr::Num(_) | Instr::Var(_) => d += 1,
            Instr::Add | Instr::Sub | Instr::Mul | Instr::Div => d -= 1,
            _ => {}
        }
        max = max.max(d);
    }
    max
}

fn powi_derivs(u: f64, k: i32) -> Result<[f64; 4]> {
    if u == 0.0 && k < 0 {
        return Err(Error::Singularity("negative power of zero".into()));
    }
    let kf = k as f64;
    let p = |e: i32| if e == 0 { 1.0 } else { u.powi(e) };
    let d1 = if k == 0 { 0.0 } else { kf * p(k - 1) };
    let d2 = if k == 0 || k == 1 { 0.0 } else { kf * (kf - 1.0) * p(k - 2) };
    let d3 = if (0..=2).contains(&k) { 0.0 } else { kf * (kf - 1.0) * (kf - 2.0) * p(k - 3) };
    Ok([p(k), d1, d2, d3])
}

/// A parsed analytic scalar field on an `n`-dimensional chart.
#[derive(Clone, Debug)]
pub struct ScalarFieldExpr {
    ast: Ast,
    n: usize,
    tape: Vec<Instr>,
    depth: usize,
}

impl PartialEq for ScalarFieldExpr {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.ast == other.ast
    }
}

impl fmt::Display for ScalarFieldExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.ast)
    }
}

/// Parse `text` as a field on an `n`-dimensional chart.
pub fn parse(text: &str, n: usize) -> Result<ScalarFieldExpr> {
    let toks = lex(text)?;
    if toks.len() == 1 {
        return Err(Error::Syntax { pos: 0, token: "<end>".into(), msg: "empty expression".into() });
    }
    let mut p = Parser { toks: &toks, i: 0, n };
    let ast = p.expr()?;
    let t = p.peek().clone();
    if t.tok != Tok::End {
        return p.err(&t, "unexpected token");
    }
    Ok(ScalarFieldExpr::from_ast(ast, n))
}

impl ScalarFieldExpr {
    pub fn from_ast(ast: Ast, n: usize) -> Self {
        if let Some(m) = ast.max_var() {
            assert!(m < n, "variable x{} exceeds chart dimension {n}", m + 1);
        }
        let mut tape = Vec::new();
        compile(&ast, &mut tape);
        let depth = stack_depth(&tape);
        ScalarFieldExpr { ast, n, tape, depth }
    }

    pub fn constant(c: f64, n: usize) -> Self {
        Self::from_ast(Ast::Num(c), n)
    }

    pub fn var(i: usize, n: usize) -> Self {
        Self::from_ast(Ast::Var(i), n)
    }

    pub fn ast(&self) -> &Ast {
        &self.ast
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_zero_constant(&self) -> bool {
        matches!(self.ast, Ast::Num(v) if v == 0.0)
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self.ast {
            Ast::Num(v) => Some(v),
            _ => None,
        }
    }

    /// Value at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        debug_assert_eq!(x.len(), self.n);
        let mut stack: Vec<f64> = Vec::with_capacity(self.depth);
        for ins in &self.tape {
            match *ins {
                Instr::Num(v) => stack.push(v),
                Instr::Var(i) => stack.push(x[i]),
                Instr::Neg => {
                    let a = stack.last_mut().unwrap();
                    *a = -*a;
                }
                Instr::Add | Instr::Sub | Instr::Mul | Instr::Div => {
                    let b = stack.pop().unwrap();
                    let a = stack.last_mut().unwrap();
                    match ins {
                        Instr::Add => *a += b,
                        Instr::Sub => *a -= b,
                        Instr::Mul => *a *= b,
                        _ => {
                            if b == 0.0 {
                                return Err(Error::Singularity("division by zero".into()));
                            }
                            *a /= b
                        }
                    }
                }
                Instr::Pow(k) => {
                    let a = stack.last_mut().unwrap();
                    *a = powi_derivs(*a, k)?[0];
                }
                Instr::Call(f) => {
                    let a = stack.last_mut().unwrap();
                    *a = f.derivs(*a, 0)?[0];
                }
            }
        }
        let v = stack[0];
        if !v.is_finite() {
            return Err(Error::Singularity(format!("non-finite value at {x:?}")));
        }
        Ok(v)
    }

    /// Exact Taylor jet of order `order` (at most 3) at `x`.
    pub fn eval_jet(&self, x: &[f64], order: usize) -> Result<Jet> {
        assert!(order <= 3, "jets are limited to order 3");
        let n = self.n;
        if let Some(c) = self.constant_value() {
            return Ok(Jet::constant(n, order, c));
        }
        let len = jet_len(n, order);
        let mut buf = vec![0.0; len * (self.depth + 1)];
        let mut sp = 0usize;
        for ins in &self.tape {
            match *ins {
                Instr::Num(v) => {
                    let s = &mut buf[sp * len..(sp + 1) * len];
                    s.fill(0.0);
                    s[0] = v;
                    sp += 1;
                }
                Instr::Var(i) => {
                    let s = &mut buf[sp * len..(sp + 1) * len];
                    s.fill(0.0);
                    s[0] = x[i];
                    if order >= 1 {
                        s[1 + i] = 1.0;
                    }
                    sp += 1;
                }
                Instr::Neg => {
                    for v in &mut buf[(sp - 1) * len..sp * len] {
                        *v = -*v;
                    }
                }
                Instr::Add | Instr::Sub => {
                    let (lo, hi) = buf.split_at_mut((sp - 1) * len);
                    let a = &mut lo[(sp - 2) * len..];
                    let b = &hi[..len];
                    if *ins == Instr::Add {
                        a.iter_mut().zip(b).for_each(|(p, q)| *p += q);
                    } else {
                        a.iter_mut().zip(b).for_each(|(p, q)| *p -= q);
                    }
                    sp -= 1;
                }
                Instr::Mul | Instr::Div => {
                    // Result goes into the scratch slot at `sp`, then copied down.
                    let (lo, hi) = buf.split_at_mut(sp * len);
                    let out = &mut hi[..len];
                    let a = &lo[(sp - 2) * len..(sp - 1) * len];
                    let b = &lo[(sp - 1) * len..sp * len];
                    if *ins == Instr::Mul {
                        mul_into(n, order, a, b, out);
                    } else {
                        let bv = b[0];
                        if bv == 0.0 {
                            return Err(Error::Singularity("division by zero".into()));
                        }
                        let r = 1.0 / bv;
                        let mut rec = vec![0.0; len];
                        compose_into(n, order, b, [r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r], &mut rec);
                        mul_into(n, order, a, &rec, out);
                    }
                    buf.copy_within(sp * len..(sp + 1) * len, (sp - 2) * len);
                    sp -= 1;
                }
                Instr::Pow(_) | Instr::Call(_) => {
                    let u0 = buf[(sp - 1) * len];
                    let d = match *ins {
                        Instr::Pow(k) => powi_derivs(u0, k)?,
                        Instr::Call(f) => f.derivs(u0, order)?,
                        _ => unreachable!(),
                    };
                    let (lo, hi) = buf.split_at_mut(sp * len);
                    compose_into(n, order, &lo[(sp - 1) * len..], d, &mut hi[..len]);
                    buf.copy_within(sp * len..(sp + 1) * len, (sp - 1) * len);
                }
            }
        }
        buf.truncate(len);
        let j = Jet::from_data(n, order, buf);
        if !j.is_finite() {
            return Err(Error::Singularity(format!("non-finite derivative at {x:?}")));
        }
        Ok(j)
    }
}
