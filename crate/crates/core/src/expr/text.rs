//! Infix text form of expressions.
//!
//! Grammar accepted by [`parse_expression`]:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' integer)?
//! atom    := number | 't' | 'x' index | func '(' expr ')' | '(' expr ')'
//! func    := 'exp' | 'sin' | 'cos'
//! ```
//!
//! Numbers are decimal literals with optional exponent, printed by
//! [`format_expression`] in shortest round-trip form.

use super::{Expression, InputLayout, Op, ParamVector, UnaryOp};
use crate::error::{FexError, Result};
use crate::symbolic::{Graph, NodeId, SymbolicExpr};

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Renders an expression with its parameters inlined.
pub fn format_expression(expr: &Expression) -> String {
    format_node(expr, 0)
}

fn apply_text(op: UnaryOp, arg: &str, wrap: bool) -> String {
    let a = if wrap { format!("({arg})") } else { arg.to_string() };
    match op {
        UnaryOp::Identity => a,
        UnaryOp::Square => format!("{a}^2"),
        UnaryOp::Cube => format!("{a}^3"),
        UnaryOp::Quartic => format!("{a}^4"),
        UnaryOp::Exp => format!("exp({arg})"),
        UnaryOp::Sin => format!("sin({arg})"),
        UnaryOp::Cos => format!("cos({arg})"),
        UnaryOp::Const0 | UnaryOp::Const1 => unreachable!("constants are folded"),
    }
}

fn format_node(expr: &Expression, i: usize) -> String {
    let t = expr.template();
    let node = &t.nodes()[i];
    let p = expr.params();
    let off = t.param_offset(i);
    match expr.ops().ops()[i] {
        Op::Binary(b) => {
            let l = format_node(expr, node.children[0]);
            let r = format_node(expr, node.children[1]);
            format!("({l}){}({r})", b.symbol())
        }
        Op::Unary(u) if node.is_leaf() => {
            let dim = t.input_dim();
            let layout = t.layout();
            let beta = p[off + dim];
            match u {
                UnaryOp::Const0 => num(beta),
                UnaryOp::Const1 => {
                    // same summation order as evaluation
                    let mut s = p[off];
                    for j in 1..dim {
                        s += p[off + j];
                    }
                    num(s + beta)
                }
                _ => {
                    let terms: Vec<String> = (0..dim)
                        .map(|j| format!("{}*{}", num(p[off + j]), apply_text(u, &layout.var_name(j), false)))
                        .collect();
                    format!("{}+{}", terms.join("+"), num(beta))
                }
            }
        }
        Op::Unary(u) => {
            let (alpha, beta) = (p[off], p[off + 1]);
            match u {
                UnaryOp::Const0 => num(beta),
                UnaryOp::Const1 => num(alpha + beta),
                _ => {
                    let inner = format_node(expr, node.children[0]);
                    format!("{}*{}+{}", num(alpha), apply_text(u, &inner, true), num(beta))
                }
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    layout: InputLayout,
    graph: Graph,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(FexError::Parse { pos: self.pos, msg: msg.into() })
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
            self.err(format!("expected `{}`", c as char))
        }
    }

    fn expr(&mut self) -> Result<NodeId> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let r = self.term()?;
                    acc = self.graph.add(acc, r);
                }
                Some(b'-') => {
                    self.pos += 1;
                    let r = self.term()?;
                    acc = self.graph.sub(acc, r);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<NodeId> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let r = self.unary()?;
                    acc = self.graph.mul(acc, r);
                }
                Some(b'/') => {
                    self.pos += 1;
                    let r = self.unary()?;
                    acc = self.graph.div(acc, r);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<NodeId> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(self.graph.neg(inner));
        }
        self.power()
    }

    fn power(&mut self) -> Result<NodeId> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            let digits = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
            let n: i32 = match digits.parse() {
                Ok(n) => n,
                Err(_) => return self.err("exponent must be a non-negative integer"),
            };
            return Ok(self.graph.powi(base, n));
        }
        Ok(base)
    }

    fn ident(&mut self) -> &'a str {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos]).expect("ascii")
    }

    fn atom(&mut self) -> Result<NodeId> {
        match self.peek() {
            None => self.err("unexpected end of input"),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                let name = self.ident();
                match name {
                    "exp" | "sin" | "cos" => {
                        self.expect(b'(')?;
                        let a = self.expr()?;
                        self.expect(b')')?;
                        Ok(match name {
                            "exp" => self.graph.exp(a),
                            "sin" => self.graph.sin(a),
                            _ => self.graph.cos(a),
                        })
                    }
                    "t" if self.layout.timed => Ok(self.graph.var(0)),
                    _ => {
                        let idx = name
                            .strip_prefix('x')
                            .and_then(|k| k.parse::<usize>().ok())
                            .filter(|&k| k >= 1 && k <= self.layout.spatial_dim);
                        match idx {
                            Some(k) => Ok(self.graph.var(self.layout.spatial_index(k - 1))),
                            None => {
                                self.pos = start;
                                self.err(format!("unknown identifier `{name}`"))
                            }
                        }
                    }
                }
            }
            Some(c) => self.err(format!("unexpected character `{}`", c as char)),
        }
    }

    fn number(&mut self) -> Result<NodeId> {
        let start = self.pos;
        let s = self.src;
        let digits = |p: &mut usize| {
            while *p < s.len() && s[*p].is_ascii_digit() {
                *p += 1;
            }
        };
        digits(&mut self.pos);
        if self.pos < s.len() && s[self.pos] == b'.' {
            self.pos += 1;
            digits(&mut self.pos);
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            self.pos += 1;
            if self.pos < s.len() && (s[self.pos] == b'+' || s[self.pos] == b'-') {
                self.pos += 1;
            }
            digits(&mut self.pos);
        }
        let text = std::str::from_utf8(&s[start..self.pos]).expect("ascii");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(self.graph.constant(v)),
            _ => {
                self.pos = start;
                self.err(format!("invalid number `{text}`"))
            }
        }
    }
}

/// Parses infix text into a parameter-free symbolic expression.
pub fn parse_expression(text: &str, layout: InputLayout) -> Result<SymbolicExpr> {
    let mut p = Parser { src: text.as_bytes(), pos: 0, layout, graph: Graph::new(layout.dim(), 0) };
    let root = p.expr()?;
    if p.peek().is_some() {
        return p.err("trailing input");
    }
    Ok(SymbolicExpr::new(p.graph, root, layout, ParamVector::default()))
}
