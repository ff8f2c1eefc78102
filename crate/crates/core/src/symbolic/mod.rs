//! Hash-consed expression graphs with symbolic x-differentiation.
//!
//! Nodes are appended in topological order (children always precede their
//! parents), so a graph doubles as its own evaluation schedule. Literal
//! constants are folded at construction (`x*0`, `x+0`, `x*1`, constant
//! arithmetic); nothing involving parameters or variables is rewritten, so
//! parameter gradients keep the structure of the source expression.

mod tape;

use std::collections::HashMap;
use std::fmt;

use crate::error::{FexError, Result};
use crate::expr::{InputLayout, ParamVector};
use crate::points::PointSet;

pub use tape::{Tape, CHUNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sym {
    /// Bit pattern of an `f64` literal (negative zero normalized).
    Const(u64),
    Var(u32),
    Param(u32),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Powi(NodeId, i32),
    Exp(NodeId),
    Sin(NodeId),
    Cos(NodeId),
}

impl Sym {
    fn children(&self) -> (Option<NodeId>, Option<NodeId>) {
        match *self {
            Sym::Const(_) | Sym::Var(_) | Sym::Param(_) => (None, None),
            Sym::Add(a, b) | Sym::Sub(a, b) | Sym::Mul(a, b) | Sym::Div(a, b) => (Some(a), Some(b)),
            Sym::Neg(a) | Sym::Powi(a, _) | Sym::Exp(a) | Sym::Sin(a) | Sym::Cos(a) => (Some(a), None),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    n_vars: usize,
    n_params: usize,
    nodes: Vec<Sym>,
    varying: Vec<bool>,
    index: HashMap<Sym, NodeId>,
    diff_memo: HashMap<(NodeId, usize), NodeId>,
}

impl Graph {
    pub fn new(n_vars: usize, n_params: usize) -> Self {
        Self {
            n_vars,
            n_params,
            nodes: Vec::new(),
            varying: Vec::new(),
            index: HashMap::new(),
            diff_memo: HashMap::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Sym {
        self.nodes[id.index()]
    }

    /// Whether the node depends on any input variable.
    pub fn is_varying(&self, id: NodeId) -> bool {
        self.varying[id.index()]
    }

    pub fn as_const(&self, id: NodeId) -> Option<f64> {
        match self.nodes[id.index()] {
            Sym::Const(bits) => Some(f64::from_bits(bits)),
            _ => None,
        }
    }

    fn intern(&mut self, sym: Sym) -> NodeId {
        if let Some(&id) = self.index.get(&sym) {
            return id;
        }
        let varying = match sym {
            Sym::Var(_) => true,
            _ => {
                let (a, b) = sym.children();
                a.is_some_and(|a| self.varying[a.index()]) || b.is_some_and(|b| self.varying[b.index()])
            }
        };
        let id = NodeId(u32::try_from(self.nodes.len()).expect("graph exceeds u32 nodes"));
        self.nodes.push(sym);
        self.varying.push(varying);
        self.index.insert(sym, id);
        id
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        let v = if v == 0.0 { 0.0 } else { v };
        self.intern(Sym::Const(v.to_bits()))
    }

    pub fn var(&mut self, k: usize) -> NodeId {
        assert!(k < self.n_vars, "variable {k} out of range");
        self.intern(Sym::Var(k as u32))
    }

    pub fn param(&mut self, k: usize) -> NodeId {
        assert!(k < self.n_params, "parameter {k} out of range");
        self.intern(Sym::Param(k as u32))
    }

    fn is(&self, id: NodeId, v: f64) -> bool {
        self.as_const(id) == Some(v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.as_const(a), self.as_const(b)) {
            (Some(x), Some(y)) => self.constant(x + y),
            (Some(x), _) if x == 0.0 => b,
            (_, Some(y)) if y == 0.0 => a,
            _ => self.intern(Sym::Add(a.min(b), a.max(b))),
        }
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.as_const(a), self.as_const(b)) {
            (Some(x), Some(y)) => self.constant(x - y),
            (_, Some(y)) if y == 0.0 => a,
            (Some(x), _) if x == 0.0 => self.neg(b),
            _ => self.intern(Sym::Sub(a, b)),
        }
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        match (self.as_const(a), self.as_const(b)) {
            (Some(x), Some(y)) => self.constant(x * y),
            (Some(x), _) if x == 0.0 => self.constant(0.0),
            (_, Some(y)) if y == 0.0 => self.constant(0.0),
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            (Some(x), _) if x == -1.0 => self.neg(b),
            (_, Some(y)) if y == -1.0 => self.neg(a),
            _ => self.intern(Sym::Mul(a.min(b), a.max(b))),
        }
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        if self.is(b, 1.0) {
            return a;
        }
        match (self.as_const(a), self.as_const(b)) {
            (Some(x), Some(y)) if y != 0.0 => self.constant(x / y),
            _ => self.intern(Sym::Div(a, b)),
        }
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        match self.nodes[a.index()] {
            Sym::Const(bits) => self.constant(-f64::from_bits(bits)),
            Sym::Neg(inner) => inner,
            _ => self.intern(Sym::Neg(a)),
        }
    }

    pub fn powi(&mut self, a: NodeId, n: i32) -> NodeId {
        match n {
            0 => self.constant(1.0),
            1 => a,
            _ => match self.as_const(a) {
                Some(x) => self.constant(x.powi(n)),
                None => self.intern(Sym::Powi(a, n)),
            },
        }
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        match self.as_const(a) {
            Some(x) => self.constant(x.exp()),
            None => self.intern(Sym::Exp(a)),
        }
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        match self.as_const(a) {
            Some(x) => self.constant(x.sin()),
            None => self.intern(Sym::Sin(a)),
        }
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        match self.as_const(a) {
            Some(x) => self.constant(x.cos()),
            None => self.intern(Sym::Cos(a)),
        }
    }

    /// Left-to-right sum; an empty iterator gives the constant 0.
    pub fn sum<I: IntoIterator<Item = NodeId>>(&mut self, terms: I) -> NodeId {
        let mut acc: Option<NodeId> = None;
        for t in terms {
            acc = Some(match acc {
                None => t,
                Some(s) => self.add(s, t),
            });
        }
        acc.unwrap_or_else(|| self.constant(0.0))
    }

    pub fn scale(&mut self, c: f64, a: NodeId) -> NodeId {
        let c = self.constant(c);
        self.mul(c, a)
    }

    /// Exact partial derivative of `node` with respect to input variable `var`.
    pub fn diff(&mut self, node: NodeId, var: usize) -> NodeId {
        if !self.varying[node.index()] {
            return self.constant(0.0);
        }
        if let Some(&d) = self.diff_memo.get(&(node, var)) {
            return d;
        }
        let d = match self.nodes[node.index()] {
            Sym::Const(_) | Sym::Param(_) => self.constant(0.0),
            Sym::Var(k) => self.constant(if k as usize == var { 1.0 } else { 0.0 }),
            Sym::Add(a, b) => {
                let (da, db) = (self.diff(a, var), self.diff(b, var));
                self.add(da, db)
            }
            Sym::Sub(a, b) => {
                let (da, db) = (self.diff(a, var), self.diff(b, var));
                self.sub(da, db)
            }
            Sym::Mul(a, b) => {
                let (da, db) = (self.diff(a, var), self.diff(b, var));
                let l = self.mul(da, b);
                let r = self.mul(a, db);
                self.add(l, r)
            }
            Sym::Div(a, b) => {
                // (a' b - a b') / b^2
                let (da, db) = (self.diff(a, var), self.diff(b, var));
                let l = self.mul(da, b);
                let r = self.mul(a, db);
                let num = self.sub(l, r);
                let den = self.powi(b, 2);
                self.div(num, den)
            }
            Sym::Neg(a) => {
                let da = self.diff(a, var);
                self.neg(da)
            }
            Sym::Powi(a, n) => {
                let da = self.diff(a, var);
                let p = self.powi(a, n - 1);
                let np = self.scale(n as f64, p);
                self.mul(np, da)
            }
            Sym::Exp(a) => {
                let da = self.diff(a, var);
                self.mul(node, da)
            }
            Sym::Sin(a) => {
                let da = self.diff(a, var);
                let c = self.cos(a);
                self.mul(c, da)
            }
            Sym::Cos(a) => {
                let da = self.diff(a, var);
                let s = self.sin(a);
                let ns = self.neg(s);
                self.mul(ns, da)
            }
        };
        self.diff_memo.insert((node, var), d);
        d
    }

    /// `sum_i d^2 node / d var_i^2` over the given variables.
    pub fn laplacian<I: IntoIterator<Item = usize>>(&mut self, node: NodeId, vars: I) -> NodeId {
        let terms: Vec<NodeId> = vars
            .into_iter()
            .map(|v| {
                let d = self.diff(node, v);
                self.diff(d, v)
            })
            .collect();
        self.sum(terms)
    }

    /// `sum_i (d node / d var_i)^2` over the given variables.
    pub fn grad_norm_sq<I: IntoIterator<Item = usize>>(&mut self, node: NodeId, vars: I) -> NodeId {
        let terms: Vec<NodeId> = vars
            .into_iter()
            .map(|v| {
                let d = self.diff(node, v);
                self.powi(d, 2)
            })
            .collect();
        self.sum(terms)
    }

    /// `sum_i var_i^2` over the given variables.
    pub fn norm_sq<I: IntoIterator<Item = usize>>(&mut self, vars: I) -> NodeId {
        let terms: Vec<NodeId> = vars
            .into_iter()
            .map(|v| {
                let x = self.var(v);
                self.powi(x, 2)
            })
            .collect();
        self.sum(terms)
    }

    /// Number of operator applications in the tree expansion of `node`.
    pub fn count_operators(&self, node: NodeId) -> u64 {
        let mut counts = vec![0u64; node.index() + 1];
        for i in 0..=node.index() {
            let sym = self.nodes[i];
            let (a, b) = sym.children();
            let own = match sym {
                Sym::Const(_) | Sym::Var(_) | Sym::Param(_) => 0,
                _ => 1,
            };
            counts[i] = own
                + a.map_or(0, |a| counts[a.index()])
                + b.map_or(0, |b| counts[b.index()]);
        }
        counts[node.index()]
    }

    /// Copy of the subgraph under `root` with every parameter replaced by its
    /// value, so that constant subexpressions fold.
    fn bind(&self, root: NodeId, params: &[f64]) -> (Graph, NodeId) {
        let mut g = Graph::new(self.n_vars, 0);
        let mut map: Vec<NodeId> = Vec::with_capacity(root.index() + 1);
        for i in 0..=root.index() {
            let m = |id: NodeId| map[id.index()];
            let n = match self.nodes[i] {
                Sym::Const(bits) => g.constant(f64::from_bits(bits)),
                Sym::Var(k) => g.var(k as usize),
                Sym::Param(k) => g.constant(params[k as usize]),
                Sym::Add(a, b) => g.add(m(a), m(b)),
                Sym::Sub(a, b) => g.sub(m(a), m(b)),
                Sym::Mul(a, b) => g.mul(m(a), m(b)),
                Sym::Div(a, b) => g.div(m(a), m(b)),
                Sym::Neg(a) => g.neg(m(a)),
                Sym::Powi(a, n) => g.powi(m(a), n),
                Sym::Exp(a) => g.exp(m(a)),
                Sym::Sin(a) => g.sin(m(a)),
                Sym::Cos(a) => g.cos(m(a)),
            };
            map.push(n);
        }
        (g, map[root.index()])
    }

    fn render(&self, id: NodeId, names: &dyn Fn(usize) -> String, params: &[f64], out: &mut String) {
        let bin = |a, b, op: &str, out: &mut String| {
            out.push('(');
            self.render(a, names, params, out);
            out.push_str(op);
            self.render(b, names, params, out);
            out.push(')');
        };
        match self.nodes[id.index()] {
            Sym::Const(bits) => out.push_str(&format!("{:?}", f64::from_bits(bits))),
            Sym::Var(k) => out.push_str(&names(k as usize)),
            Sym::Param(k) => match params.get(k as usize) {
                Some(v) => out.push_str(&format!("{v:?}")),
                None => out.push_str(&format!("p{k}")),
            },
            Sym::Add(a, b) => bin(a, b, "+", out),
            Sym::Sub(a, b) => bin(a, b, "-", out),
            // literal coefficients first
            Sym::Mul(a, b) if self.as_const(b).is_some() => bin(b, a, "*", out),
            Sym::Mul(a, b) => bin(a, b, "*", out),
            Sym::Div(a, b) => bin(a, b, "/", out),
            Sym::Neg(a) => {
                out.push_str("(-");
                self.render(a, names, params, out);
                out.push(')');
            }
            Sym::Powi(a, n) => {
                out.push('(');
                self.render(a, names, params, out);
                out.push_str(&format!(")^{n}"));
            }
            Sym::Exp(a) | Sym::Sin(a) | Sym::Cos(a) => {
                out.push_str(match self.nodes[id.index()] {
                    Sym::Exp(_) => "exp(",
                    Sym::Sin(_) => "sin(",
                    _ => "cos(",
                });
                self.render(a, names, params, out);
                out.push(')');
            }
        }
    }
}

/// Which x-derivative to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffSelector {
    /// First partial with respect to input coordinate `k`.
    Partial(usize),
    /// Second partial `d^2 / dx_i dx_j` (input coordinates).
    Second(usize, usize),
    /// Sum of unmixed second partials over the spatial coordinates.
    Laplacian,
}

/// A symbolic function of the input point, possibly referencing parameters.
#[derive(Debug, Clone)]
pub struct SymbolicExpr {
    graph: Graph,
    root: NodeId,
    layout: InputLayout,
    params: ParamVector,
}

impl SymbolicExpr {
    pub fn new(graph: Graph, root: NodeId, layout: InputLayout, params: ParamVector) -> Self {
        assert_eq!(graph.n_params(), params.len(), "parameter count mismatch");
        Self { graph, root, layout, params }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn layout(&self) -> InputLayout {
        self.layout
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn into_parts(self) -> (Graph, NodeId, ParamVector) {
        (self.graph, self.root, self.params)
    }

    /// Same function with a different parameter vector.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(FexError::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        Ok(Self { params, ..self.clone() })
    }

    /// Parameter-free copy with the current parameters folded in as literals.
    pub fn bind_params(&self) -> Self {
        let (graph, root) = self.graph.bind(self.root, &self.params);
        Self { graph, root, layout: self.layout, params: ParamVector::default() }
    }

    fn derived(&self, f: impl FnOnce(&mut Graph, NodeId) -> NodeId) -> Self {
        let mut graph = self.graph.clone();
        let root = f(&mut graph, self.root);
        Self { graph, root, layout: self.layout, params: self.params.clone() }
    }

    pub fn diff_x(&self, selector: DiffSelector) -> Result<Self> {
        let dim = self.layout.dim();
        let check = |k: usize| {
            if k < dim {
                Ok(())
            } else {
                Err(FexError::DimensionMismatch { expected: dim, got: k + 1 })
            }
        };
        Ok(match selector {
            DiffSelector::Partial(k) => {
                check(k)?;
                self.derived(|g, r| g.diff(r, k))
            }
            DiffSelector::Second(i, j) => {
                check(i)?;
                check(j)?;
                self.derived(|g, r| {
                    let d = g.diff(r, i);
                    g.diff(d, j)
                })
            }
            DiffSelector::Laplacian => {
                let layout = self.layout;
                self.derived(|g, r| g.laplacian(r, (0..layout.spatial_dim).map(|i| layout.spatial_index(i))))
            }
        })
    }

    /// First partials with respect to every input coordinate.
    pub fn gradient(&self) -> Vec<Self> {
        (0..self.layout.dim())
            .map(|k| self.derived(|g, r| g.diff(r, k)))
            .collect()
    }

    /// Applies `exp` at the root.
    pub fn exp(&self) -> Self {
        self.derived(|g, r| g.exp(r))
    }

    pub fn eval_batch(&self, points: &PointSet) -> Result<Vec<f64>> {
        if points.dim() != self.layout.dim() {
            return Err(FexError::DimensionMismatch { expected: self.layout.dim(), got: points.dim() });
        }
        let tape = Tape::compile(&self.graph, &[self.root]);
        let mut out = tape.evaluate(&self.params, points)?;
        Ok(out.swap_remove(0))
    }

    pub fn eval_point(&self, x: &[f64]) -> Result<f64> {
        let pts = PointSet::new(x.len(), x.to_vec());
        Ok(self.eval_batch(&pts)?[0])
    }

    pub fn count_operators(&self) -> u64 {
        self.graph.count_operators(self.root)
    }
}

impl fmt::Display for SymbolicExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let layout = self.layout;
        let names = move |k: usize| layout.var_name(k);
        let mut out = String::new();
        self.graph.render(self.root, &names, &self.params, &mut out);
        f.write_str(&out)
    }
}
