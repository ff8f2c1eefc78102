//! Finite expressions as parameterized binary trees.
//!
//! A [`TreeTemplate`] fixes the arity structure, an [`OperatorSequence`]
//! assigns one operator per node in pre-order, and a [`ParamVector`] holds
//! the scaling/bias pairs of every unary node. Unary nodes compute
//! `alpha * f(input) + beta`; leaves apply `f` to each coordinate of the
//! input point and contract with a vector `alpha`. Binary nodes carry no
//! parameters.

mod eval;
mod text;

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FexError, Result};
use crate::points::PointSet;
use crate::rng::Rng;
use crate::symbolic::{DiffSelector, Graph, NodeId, SymbolicExpr};

pub use text::{format_expression, parse_expression};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    #[serde(rename = "add")]
    Add,
    #[serde(rename = "sub")]
    Sub,
    #[serde(rename = "mul")]
    Mul,
    #[serde(rename = "div")]
    Div,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    pub fn symbol(self) -> char {
        match self {
            BinaryOp::Add => '+',
            BinaryOp::Sub => '-',
            BinaryOp::Mul => '*',
            BinaryOp::Div => '/',
        }
    }

    /// Applies the operator. Division by `|b| < 1e-12` is an error.
    pub fn apply(self, a: f64, b: f64) -> Result<f64> {
        Ok(match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => {
                if b.abs() < DIV_GUARD {
                    return Err(FexError::NonFinite("division"));
                }
                a / b
            }
        })
    }
}

/// Denominators smaller than this in magnitude are treated as a domain violation.
pub const DIV_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    #[serde(rename = "const0")]
    Const0,
    #[serde(rename = "const1")]
    Const1,
    #[serde(rename = "id")]
    Identity,
    #[serde(rename = "square")]
    Square,
    #[serde(rename = "cube")]
    Cube,
    #[serde(rename = "quartic")]
    Quartic,
    #[serde(rename = "exp")]
    Exp,
    #[serde(rename = "sin")]
    Sin,
    #[serde(rename = "cos")]
    Cos,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 9] = [
        UnaryOp::Const0,
        UnaryOp::Const1,
        UnaryOp::Identity,
        UnaryOp::Square,
        UnaryOp::Cube,
        UnaryOp::Quartic,
        UnaryOp::Exp,
        UnaryOp::Sin,
        UnaryOp::Cos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Const0 => "const0",
            UnaryOp::Const1 => "const1",
            UnaryOp::Identity => "id",
            UnaryOp::Square => "square",
            UnaryOp::Cube => "cube",
            UnaryOp::Quartic => "quartic",
            UnaryOp::Exp => "exp",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            UnaryOp::Const0 => 0.0,
            UnaryOp::Const1 => 1.0,
            UnaryOp::Identity => z,
            UnaryOp::Square => z * z,
            UnaryOp::Cube => z * z * z,
            UnaryOp::Quartic => {
                let s = z * z;
                s * s
            }
            UnaryOp::Exp => z.exp(),
            UnaryOp::Sin => z.sin(),
            UnaryOp::Cos => z.cos(),
        }
    }

    /// First derivative of the operator at `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            UnaryOp::Const0 | UnaryOp::Const1 => 0.0,
            UnaryOp::Identity => 1.0,
            UnaryOp::Square => 2.0 * z,
            UnaryOp::Cube => 3.0 * z * z,
            UnaryOp::Quartic => 4.0 * z * z * z,
            UnaryOp::Exp => z.exp(),
            UnaryOp::Sin => z.cos(),
            UnaryOp::Cos => -z.sin(),
        }
    }

    /// Builds `f(z)` in a symbolic graph.
    pub fn build(self, g: &mut Graph, z: NodeId) -> NodeId {
        match self {
            UnaryOp::Const0 => g.constant(0.0),
            UnaryOp::Const1 => g.constant(1.0),
            UnaryOp::Identity => z,
            UnaryOp::Square => g.powi(z, 2),
            UnaryOp::Cube => g.powi(z, 3),
            UnaryOp::Quartic => g.powi(z, 4),
            UnaryOp::Exp => g.exp(z),
            UnaryOp::Sin => g.sin(z),
            UnaryOp::Cos => g.cos(z),
        }
    }
}

impl FromStr for BinaryOp {
    type Err = FexError;
    fn from_str(s: &str) -> Result<Self> {
        BinaryOp::ALL
            .into_iter()
            .find(|op| op.name() == s || s.len() == 1 && op.symbol().to_string() == s)
            .ok_or_else(|| FexError::UnsupportedOperator(s.to_string()))
    }
}

impl FromStr for UnaryOp {
    type Err = FexError;
    fn from_str(s: &str) -> Result<Self> {
        UnaryOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| FexError::UnsupportedOperator(s.to_string()))
    }
}

/// Operator tag assigned to one tree node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Op {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Unary(u) => u.name(),
            Op::Binary(b) => b.name(),
        }
    }

    pub fn arity(self) -> Arity {
        match self {
            Op::Unary(_) => Arity::Unary,
            Op::Binary(_) => Arity::Binary,
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The binary and unary operator alphabets. Ordering indexes controller outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorSet {
    binary: Vec<BinaryOp>,
    unary: Vec<UnaryOp>,
}

impl OperatorSet {
    pub fn new(binary: Vec<BinaryOp>, unary: Vec<UnaryOp>) -> Result<Self> {
        if binary.is_empty() || unary.is_empty() {
            return Err(FexError::Config("operator sets must be non-empty".into()));
        }
        for (i, b) in binary.iter().enumerate() {
            if binary[..i].contains(b) {
                return Err(FexError::Config(format!("duplicate binary operator `{}`", b.name())));
            }
        }
        for (i, u) in unary.iter().enumerate() {
            if unary[..i].contains(u) {
                return Err(FexError::Config(format!("duplicate unary operator `{}`", u.name())));
            }
        }
        Ok(Self { binary, unary })
    }

    /// `{+, -, *}` and `{0, 1, Id, ^2, ^3, ^4, exp, sin, cos}`.
    pub fn standard() -> Self {
        Self {
            binary: vec![BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul],
            unary: UnaryOp::ALL.to_vec(),
        }
    }

    pub fn from_names<S: AsRef<str>>(binary: &[S], unary: &[S]) -> Result<Self> {
        let b = binary.iter().map(|s| s.as_ref().parse()).collect::<Result<Vec<_>>>()?;
        let u = unary.iter().map(|s| s.as_ref().parse()).collect::<Result<Vec<_>>>()?;
        Self::new(b, u)
    }

    /// Copy of this set with `op` removed from the unary alphabet.
    pub fn without_unary(&self, op: UnaryOp) -> Result<Self> {
        Self::new(
            self.binary.clone(),
            self.unary.iter().copied().filter(|&u| u != op).collect(),
        )
    }

    pub fn binary(&self) -> &[BinaryOp] {
        &self.binary
    }

    pub fn unary(&self) -> &[UnaryOp] {
        &self.unary
    }

    /// Number of choices available at a node of the given arity.
    pub fn width(&self, arity: Arity) -> usize {
        match arity {
            Arity::Unary => self.unary.len(),
            Arity::Binary => self.binary.len(),
        }
    }

    pub fn op_at(&self, arity: Arity, index: usize) -> Op {
        match arity {
            Arity::Unary => Op::Unary(self.unary[index]),
            Arity::Binary => Op::Binary(self.binary[index]),
        }
    }

    pub fn index_of(&self, op: Op) -> Option<usize> {
        match op {
            Op::Unary(u) => self.unary.iter().position(|&x| x == u),
            Op::Binary(b) => self.binary.iter().position(|&x| x == b),
        }
    }
}

/// How the tree input is laid out: optional time coordinate first, then space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputLayout {
    pub spatial_dim: usize,
    pub timed: bool,
}

impl InputLayout {
    pub fn spatial(d: usize) -> Self {
        Self { spatial_dim: d, timed: false }
    }

    pub fn timed(d: usize) -> Self {
        Self { spatial_dim: d, timed: true }
    }

    /// Total input dimension.
    pub fn dim(&self) -> usize {
        self.spatial_dim + self.timed as usize
    }

    /// Index of the input coordinate holding spatial coordinate `i` (0-based).
    pub fn spatial_index(&self, i: usize) -> usize {
        i + self.timed as usize
    }

    pub fn time_index(&self) -> Option<usize> {
        self.timed.then_some(0)
    }

    /// Display name of input coordinate `k`: `t`, `x1`, `x2`, ...
    pub fn var_name(&self, k: usize) -> String {
        if self.timed {
            if k == 0 {
                "t".into()
            } else {
                format!("x{k}")
            }
        } else {
            format!("x{}", k + 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arity {
    Unary,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateNode {
    pub arity: Arity,
    pub children: Vec<usize>,
}

impl TemplateNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Arity structure of an expression tree; node 0 is the root, nodes are in pre-order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeTemplate {
    nodes: Vec<TemplateNode>,
    layout: InputLayout,
    param_offsets: Vec<usize>,
    n_params: usize,
}

impl TreeTemplate {
    pub fn from_nodes(nodes: Vec<TemplateNode>, layout: InputLayout) -> Result<Self> {
        let bad = |m: String| Err(FexError::Config(format!("invalid tree template: {m}")));
        if nodes.is_empty() {
            return bad("no nodes".into());
        }
        if layout.dim() == 0 {
            return bad("input dimension must be positive".into());
        }
        let mut parent_count = vec![0usize; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            let want = match n.arity {
                Arity::Binary => 2..=2,
                Arity::Unary => 0..=1,
            };
            if !want.contains(&n.children.len()) {
                return bad(format!("node {i} has {} children", n.children.len()));
            }
            for &c in &n.children {
                if c <= i || c >= nodes.len() {
                    return bad(format!("node {i} has out-of-order child {c}"));
                }
                parent_count[c] += 1;
            }
        }
        if parent_count[0] != 0 || parent_count[1..].iter().any(|&p| p != 1) {
            return bad("nodes do not form a single rooted tree".into());
        }
        // Pre-order: each subtree occupies a contiguous index range.
        let mut next = 0;
        if !Self::check_preorder(&nodes, 0, &mut next) || next != nodes.len() {
            return bad("nodes are not numbered in pre-order".into());
        }

        let mut param_offsets = Vec::with_capacity(nodes.len());
        let mut n_params = 0;
        for n in &nodes {
            param_offsets.push(n_params);
            n_params += match (n.arity, n.is_leaf()) {
                (Arity::Binary, _) => 0,
                (Arity::Unary, true) => layout.dim() + 1,
                (Arity::Unary, false) => 2,
            };
        }
        Ok(Self { nodes, layout, param_offsets, n_params })
    }

    fn check_preorder(nodes: &[TemplateNode], i: usize, next: &mut usize) -> bool {
        if i != *next {
            return false;
        }
        *next += 1;
        nodes[i].children.iter().all(|&c| Self::check_preorder(nodes, c, next))
    }

    /// Parses a shape such as `u(b(l,l))`: `u` unary interior, `b` binary, `l` leaf.
    pub fn from_shape(shape: &str, layout: InputLayout) -> Result<Self> {
        let compact: Vec<u8> = shape.bytes().filter(|c| !c.is_ascii_whitespace()).collect();
        let mut nodes = Vec::new();
        let mut pos = 0;
        Self::parse_shape(&compact, &mut pos, &mut nodes)?;
        if pos != compact.len() {
            return Err(FexError::Config(format!("trailing input in tree shape `{shape}`")));
        }
        Self::from_nodes(nodes, layout)
    }

    fn parse_shape(s: &[u8], pos: &mut usize, nodes: &mut Vec<TemplateNode>) -> Result<usize> {
        let err = |p: usize| FexError::Config(format!("malformed tree shape at position {p}"));
        let id = nodes.len();
        let c = *s.get(*pos).ok_or_else(|| err(*pos))?;
        *pos += 1;
        match c {
            b'l' => nodes.push(TemplateNode { arity: Arity::Unary, children: vec![] }),
            b'u' | b'b' => {
                let arity = if c == b'u' { Arity::Unary } else { Arity::Binary };
                nodes.push(TemplateNode { arity, children: vec![] });
                if s.get(*pos) != Some(&b'(') {
                    return Err(err(*pos));
                }
                *pos += 1;
                let first = Self::parse_shape(s, pos, nodes)?;
                nodes[id].children.push(first);
                if arity == Arity::Binary {
                    if s.get(*pos) != Some(&b',') {
                        return Err(err(*pos));
                    }
                    *pos += 1;
                    let second = Self::parse_shape(s, pos, nodes)?;
                    nodes[id].children.push(second);
                }
                if s.get(*pos) != Some(&b')') {
                    return Err(err(*pos));
                }
                *pos += 1;
            }
            _ => return Err(err(*pos - 1)),
        }
        Ok(id)
    }

    /// Shape string of a depth-`k` template: depth 3 is `u(b(l,l))` and each
    /// further level wraps the previous tree as `u(b(<prev>,l))`.
    pub fn depth_shape(depth: usize) -> Result<String> {
        Ok(match depth {
            0 => return Err(FexError::Config("tree depth must be at least 1".into())),
            1 => "l".into(),
            2 => "u(l)".into(),
            3 => "u(b(l,l))".into(),
            k => format!("u(b({},l))", Self::depth_shape(k - 1)?),
        })
    }

    pub fn with_depth(depth: usize, layout: InputLayout) -> Result<Self> {
        Self::from_shape(&Self::depth_shape(depth)?, layout)
    }

    /// Renders the template back to its shape string.
    pub fn shape(&self) -> String {
        let mut out = String::new();
        self.write_shape(0, &mut out);
        out
    }

    fn write_shape(&self, i: usize, out: &mut String) {
        let n = &self.nodes[i];
        match (n.arity, n.is_leaf()) {
            (Arity::Unary, true) => out.push('l'),
            (arity, _) => {
                out.push(if arity == Arity::Unary { 'u' } else { 'b' });
                out.push('(');
                for (k, &c) in n.children.iter().enumerate() {
                    if k > 0 {
                        out.push(',');
                    }
                    self.write_shape(c, out);
                }
                out.push(')');
            }
        }
    }

    pub fn nodes(&self) -> &[TemplateNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn layout(&self) -> InputLayout {
        self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn param_offset(&self, node: usize) -> usize {
        self.param_offsets[node]
    }

    pub fn count(&self, arity: Arity) -> usize {
        self.nodes.iter().filter(|n| n.arity == arity).count()
    }

    /// Maximum number of operators an expression on this template can hold.
    pub fn max_operators(&self) -> usize {
        self.nodes.len()
    }

    /// Uniform `[-1, 1]` draws for every scaling and bias.
    pub fn init_params(&self, rng: &mut Rng) -> ParamVector {
        ParamVector((0..self.n_params).map(|_| rng.gen_range(-1.0..=1.0)).collect())
    }
}

/// One operator per template node, in pre-order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperatorSequence(Vec<Op>);

impl OperatorSequence {
    pub fn new(template: &TreeTemplate, ops: Vec<Op>) -> Result<Self> {
        if ops.len() != template.len() {
            return Err(FexError::DimensionMismatch { expected: template.len(), got: ops.len() });
        }
        for (i, (op, node)) in ops.iter().zip(template.nodes()).enumerate() {
            if op.arity() != node.arity {
                return Err(FexError::Config(format!(
                    "operator `{}` at node {i} does not match node arity {:?}",
                    op.name(),
                    node.arity
                )));
            }
        }
        Ok(Self(ops))
    }

    /// Builds a sequence from per-node indices into an operator set.
    pub fn from_indices(template: &TreeTemplate, set: &OperatorSet, idx: &[usize]) -> Result<Self> {
        if idx.len() != template.len() {
            return Err(FexError::DimensionMismatch { expected: template.len(), got: idx.len() });
        }
        let ops = template
            .nodes()
            .iter()
            .zip(idx)
            .map(|(n, &k)| {
                if k >= set.width(n.arity) {
                    Err(FexError::Config(format!("operator index {k} out of range")))
                } else {
                    Ok(set.op_at(n.arity, k))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(ops))
    }

    /// Parses whitespace- or comma-separated operator names, e.g. `id add square const0`.
    pub fn parse(template: &TreeTemplate, text: &str) -> Result<Self> {
        let names: Vec<&str> = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if names.len() != template.len() {
            return Err(FexError::DimensionMismatch { expected: template.len(), got: names.len() });
        }
        let ops = names
            .iter()
            .zip(template.nodes())
            .map(|(name, node)| match node.arity {
                Arity::Unary => name.parse().map(Op::Unary),
                Arity::Binary => name.parse().map(Op::Binary),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(template, ops)
    }

    pub fn ops(&self) -> &[Op] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for OperatorSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, op) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(op.name())?;
        }
        Ok(())
    }
}

/// Scaling and bias parameters, laid out node by node in pre-order:
/// a leaf stores `alpha[0..dim]` then `beta`, an interior unary node `alpha, beta`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A finite expression `u(x; T, e, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    template: Arc<TreeTemplate>,
    ops: OperatorSequence,
    params: ParamVector,
}

impl Expression {
    pub fn new(template: Arc<TreeTemplate>, ops: OperatorSequence, params: ParamVector) -> Result<Self> {
        if ops.len() != template.len() {
            return Err(FexError::DimensionMismatch { expected: template.len(), got: ops.len() });
        }
        for (op, node) in ops.ops().iter().zip(template.nodes()) {
            if op.arity() != node.arity {
                return Err(FexError::Config("operator arity does not match template".into()));
            }
        }
        if params.len() != template.n_params() {
            return Err(FexError::DimensionMismatch { expected: template.n_params(), got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(FexError::NonFinite("parameter vector"));
        }
        Ok(Self { template, ops, params })
    }

    pub fn template(&self) -> &Arc<TreeTemplate> {
        &self.template
    }

    pub fn ops(&self) -> &OperatorSequence {
        &self.ops
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn layout(&self) -> InputLayout {
        self.template.layout()
    }

    /// Same structure with a different parameter vector.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.template.clone(), self.ops.clone(), params)
    }

    /// Number of operators; every node holds one, constants and identity included.
    pub fn count_operators(&self) -> usize {
        self.ops.len()
    }

    pub fn evaluate_batch(&self, points: &PointSet) -> Result<Vec<f64>> {
        eval::evaluate_batch(self, points)
    }

    /// Inserts `u` into `g`, parameters referring to indices of [`Self::params`].
    pub fn build_graph(&self, g: &mut Graph) -> NodeId {
        build_tree(&self.template, &self.ops, g)
    }

    /// Symbolic form of `u` itself.
    pub fn to_symbolic(&self) -> SymbolicExpr {
        let mut g = Graph::new(self.layout().dim(), self.params.len());
        let root = self.build_graph(&mut g);
        SymbolicExpr::new(g, root, self.layout(), self.params.clone())
    }

    /// Exact x-derivative as a symbolic expression sharing this expression's parameters.
    pub fn diff_x(&self, selector: DiffSelector) -> Result<SymbolicExpr> {
        self.to_symbolic().diff_x(selector)
    }
}

/// Builds the tree for `(template, ops)` with `Param(k)` nodes for the parameter slots.
pub fn build_tree(template: &TreeTemplate, ops: &OperatorSequence, g: &mut Graph) -> NodeId {
    build_node(template, ops, 0, g)
}

fn build_node(t: &TreeTemplate, ops: &OperatorSequence, i: usize, g: &mut Graph) -> NodeId {
    let node = &t.nodes()[i];
    let off = t.param_offset(i);
    match ops.ops()[i] {
        Op::Binary(b) => {
            let l = build_node(t, ops, node.children[0], g);
            let r = build_node(t, ops, node.children[1], g);
            match b {
                BinaryOp::Add => g.add(l, r),
                BinaryOp::Sub => g.sub(l, r),
                BinaryOp::Mul => g.mul(l, r),
                BinaryOp::Div => g.div(l, r),
            }
        }
        Op::Unary(u) if node.is_leaf() => {
            let dim = t.input_dim();
            let mut acc = None;
            for j in 0..dim {
                let x = g.var(j);
                let fx = u.build(g, x);
                let a = g.param(off + j);
                let term = g.mul(a, fx);
                acc = Some(match acc {
                    None => term,
                    Some(s) => g.add(s, term),
                });
            }
            let beta = g.param(off + dim);
            let sum = acc.expect("input dimension is positive");
            g.add(sum, beta)
        }
        Op::Unary(u) => {
            let inner = build_node(t, ops, node.children[0], g);
            let fz = u.build(g, inner);
            let a = g.param(off);
            let b = g.param(off + 1);
            let scaled = g.mul(a, fz);
            g.add(scaled, b)
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_expression(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_templates_have_expected_sizes() {
        let l = InputLayout::spatial(2);
        let t3 = TreeTemplate::with_depth(3, l).unwrap();
        assert_eq!(t3.shape(), "u(b(l,l))");
        assert_eq!(t3.len(), 4);
        assert_eq!((t3.count(Arity::Binary), t3.count(Arity::Unary)), (1, 3));
        let t4 = TreeTemplate::with_depth(4, l).unwrap();
        assert_eq!(t4.shape(), "u(b(u(b(l,l)),l))");
        assert_eq!(t4.len(), 7);
        let t6 = TreeTemplate::with_depth(6, l).unwrap();
        assert_eq!(t6.len(), 13);
        assert_eq!(t6.count(Arity::Binary), 4);
    }

    #[test]
    fn parameter_count_formula() {
        for shape in ["l", "u(l)", "u(b(l,l))", "b(u(l),b(l,u(u(l))))", "u(b(u(b(l,l)),l))"] {
            for d in [1, 3, 10] {
                let t = TreeTemplate::from_shape(shape, InputLayout::spatial(d)).unwrap();
                let leaves = t.nodes().iter().filter(|n| n.is_leaf()).count();
                let interior_unary = t
                    .nodes()
                    .iter()
                    .filter(|n| n.arity == Arity::Unary && !n.is_leaf())
                    .count();
                assert_eq!(t.n_params(), leaves * (d + 1) + 2 * interior_unary, "{shape} d={d}");
            }
        }
    }

    #[test]
    fn malformed_shapes_are_rejected() {
        let l = InputLayout::spatial(1);
        for s in ["", "b(l)", "u(l,l)", "u(b(l,l)", "x", "u(b(l,l))l"] {
            assert!(TreeTemplate::from_shape(s, l).is_err(), "{s}");
        }
    }

    #[test]
    fn node_list_must_be_a_preorder_tree() {
        let leaf = || TemplateNode { arity: Arity::Unary, children: vec![] };
        let l = InputLayout::spatial(1);
        // node 1 is both a child of 0 and of 2
        let nodes = vec![
            TemplateNode { arity: Arity::Binary, children: vec![1, 2] },
            leaf(),
            TemplateNode { arity: Arity::Unary, children: vec![1] },
        ];
        assert!(TreeTemplate::from_nodes(nodes, l).is_err());
        // valid but not pre-order
        let nodes = vec![
            TemplateNode { arity: Arity::Binary, children: vec![2, 1] },
            leaf(),
            leaf(),
        ];
        assert!(TreeTemplate::from_nodes(nodes, l).is_err());
    }

    #[test]
    fn operator_sets_validate() {
        assert!(OperatorSet::new(vec![], vec![UnaryOp::Sin]).is_err());
        assert!(OperatorSet::new(vec![BinaryOp::Add, BinaryOp::Add], vec![UnaryOp::Sin]).is_err());
        assert!(matches!(
            OperatorSet::from_names(&["add"], &["log"]),
            Err(FexError::UnsupportedOperator(s)) if s == "log"
        ));
        let s = OperatorSet::standard();
        assert_eq!(s.binary().len(), 3);
        assert_eq!(s.unary().len(), 9);
        assert_eq!(s.without_unary(UnaryOp::Square).unwrap().unary().len(), 8);
    }

    #[test]
    fn sequences_check_arity() {
        let t = TreeTemplate::with_depth(3, InputLayout::spatial(2)).unwrap();
        assert!(OperatorSequence::parse(&t, "id add square const0").is_ok());
        assert!(OperatorSequence::parse(&t, "add id square const0").is_err());
        assert!(OperatorSequence::parse(&t, "id add square").is_err());
    }

    #[test]
    fn count_operators_is_node_count() {
        let t = Arc::new(TreeTemplate::with_depth(3, InputLayout::spatial(3)).unwrap());
        let ops = OperatorSequence::parse(&t, "sin mul exp const1").unwrap();
        let e = Expression::new(t.clone(), ops, ParamVector(vec![0.0; t.n_params()])).unwrap();
        assert_eq!(e.count_operators(), 4);
        let leaf = Arc::new(TreeTemplate::from_shape("l", InputLayout::spatial(1)).unwrap());
        let ops = OperatorSequence::parse(&leaf, "id").unwrap();
        let e = Expression::new(leaf, ops, ParamVector(vec![1.0, 0.0])).unwrap();
        assert_eq!(e.count_operators(), 1);
    }

    #[test]
    fn unary_derivatives_match_central_differences() {
        let h = 1e-5;
        for op in UnaryOp::ALL {
            for k in 0..100 {
                let z = -1.0 + 2.0 * (k as f64 + 0.5) / 100.0;
                let fd = (op.apply(z + h) - op.apply(z - h)) / (2.0 * h);
                let exact = op.derivative(z);
                let err = (fd - exact).abs() / exact.abs().max(1.0);
                assert!(err < 1e-6, "{op:?} at {z}: {fd} vs {exact}");
            }
        }
    }
}
