//! Linearized evaluation of a graph restricted to a set of outputs.
//!
//! Nodes that do not depend on the input point are evaluated once per call
//! ("scalar" slots); the rest are evaluated column-wise over chunks of
//! [`CHUNK`] points. Reverse mode runs per chunk over the vector slots and
//! accumulates into scalar adjoints, which are pushed down to parameters in a
//! final sweep.

use super::{Graph, NodeId, Sym};
use crate::error::{FexError, Result};
use crate::expr::DIV_GUARD;
use crate::points::PointSet;

pub const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Src {
    S(u32),
    V(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Powi(i32),
    Exp,
    Sin,
    Cos,
}

#[derive(Debug, Clone, Copy)]
enum SInstr {
    Const(f64),
    Param(u32),
    Op(Kind, u32, u32),
}

#[derive(Debug, Clone, Copy)]
enum VInstr {
    Var(u32),
    Op(Kind, Src, Src),
}

#[derive(Debug, Clone)]
pub struct Tape {
    scalar: Vec<SInstr>,
    vector: Vec<VInstr>,
    outputs: Vec<Src>,
    n_vars: usize,
    n_params: usize,
}

fn kind_of(sym: Sym) -> Option<(Kind, NodeId, Option<NodeId>)> {
    Some(match sym {
        Sym::Add(a, b) => (Kind::Add, a, Some(b)),
        Sym::Sub(a, b) => (Kind::Sub, a, Some(b)),
        Sym::Mul(a, b) => (Kind::Mul, a, Some(b)),
        Sym::Div(a, b) => (Kind::Div, a, Some(b)),
        Sym::Neg(a) => (Kind::Neg, a, None),
        Sym::Powi(a, n) => (Kind::Powi(n), a, None),
        Sym::Exp(a) => (Kind::Exp, a, None),
        Sym::Sin(a) => (Kind::Sin, a, None),
        Sym::Cos(a) => (Kind::Cos, a, None),
        Sym::Const(_) | Sym::Var(_) | Sym::Param(_) => return None,
    })
}

#[derive(Clone, Copy)]
enum Operand<'a> {
    Col(&'a [f64]),
    Val(f64),
}

#[inline(always)]
fn binary_kernel(out: &mut [f64], a: Operand<'_>, b: Operand<'_>, f: impl Fn(f64, f64) -> f64) {
    match (a, b) {
        (Operand::Col(x), Operand::Col(y)) => {
            for ((o, &p), &q) in out.iter_mut().zip(x).zip(y) {
                *o = f(p, q);
            }
        }
        (Operand::Col(x), Operand::Val(q)) => {
            for (o, &p) in out.iter_mut().zip(x) {
                *o = f(p, q);
            }
        }
        (Operand::Val(p), Operand::Col(y)) => {
            for (o, &q) in out.iter_mut().zip(y) {
                *o = f(p, q);
            }
        }
        (Operand::Val(_), Operand::Val(_)) => unreachable!("vector op with scalar operands"),
    }
}

#[inline]
fn apply_scalar(kind: Kind, a: f64, b: f64) -> Result<f64> {
    Ok(match kind {
        Kind::Add => a + b,
        Kind::Sub => a - b,
        Kind::Mul => a * b,
        Kind::Div => {
            if b.abs() < DIV_GUARD {
                return Err(FexError::NonFinite("division"));
            }
            a / b
        }
        Kind::Neg => -a,
        Kind::Powi(n) => a.powi(n),
        Kind::Exp => a.exp(),
        Kind::Sin => a.sin(),
        Kind::Cos => a.cos(),
    })
}

impl Tape {
    pub fn compile(g: &Graph, outputs: &[NodeId]) -> Self {
        let top = outputs.iter().map(|o| o.index() + 1).max().unwrap_or(0);
        let mut live = vec![false; top];
        for o in outputs {
            live[o.index()] = true;
        }
        for i in (0..top).rev() {
            if live[i] {
                let (a, b) = g.nodes[i].children();
                if let Some(a) = a {
                    live[a.index()] = true;
                }
                if let Some(b) = b {
                    live[b.index()] = true;
                }
            }
        }

        let mut slot = vec![Src::S(u32::MAX); top];
        let mut scalar = Vec::new();
        let mut vector = Vec::new();
        for i in 0..top {
            if !live[i] {
                continue;
            }
            let sym = g.nodes[i];
            if g.varying[i] {
                let instr = match sym {
                    Sym::Var(k) => VInstr::Var(k),
                    _ => {
                        let (kind, a, b) = kind_of(sym).expect("varying node is an operation");
                        let b = b.map_or(Src::S(u32::MAX), |b| slot[b.index()]);
                        VInstr::Op(kind, slot[a.index()], b)
                    }
                };
                slot[i] = Src::V(vector.len() as u32);
                vector.push(instr);
            } else {
                let instr = match sym {
                    Sym::Const(bits) => SInstr::Const(f64::from_bits(bits)),
                    Sym::Param(k) => SInstr::Param(k),
                    Sym::Var(_) => unreachable!("variables are varying"),
                    _ => {
                        let (kind, a, b) = kind_of(sym).expect("operation");
                        let idx = |s: Src| match s {
                            Src::S(k) => k,
                            Src::V(_) => unreachable!("scalar node with varying child"),
                        };
                        let b = b.map_or(u32::MAX, |b| idx(slot[b.index()]));
                        SInstr::Op(kind, idx(slot[a.index()]), b)
                    }
                };
                slot[i] = Src::S(scalar.len() as u32);
                scalar.push(instr);
            }
        }
        Self {
            scalar,
            vector,
            outputs: outputs.iter().map(|o| slot[o.index()]).collect(),
            n_vars: g.n_vars(),
            n_params: g.n_params(),
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    /// Number of per-point (vector) instructions.
    pub fn vector_len(&self) -> usize {
        self.vector.len()
    }

    fn check_inputs(&self, params: &[f64], points: &PointSet) -> Result<()> {
        if params.len() != self.n_params {
            return Err(FexError::DimensionMismatch { expected: self.n_params, got: params.len() });
        }
        if points.dim() != self.n_vars {
            return Err(FexError::DimensionMismatch { expected: self.n_vars, got: points.dim() });
        }
        Ok(())
    }

    fn scalar_forward(&self, params: &[f64]) -> Result<Vec<f64>> {
        let mut sv = Vec::with_capacity(self.scalar.len());
        for instr in &self.scalar {
            let v = match *instr {
                SInstr::Const(c) => c,
                SInstr::Param(k) => params[k as usize],
                SInstr::Op(kind, a, b) => {
                    let bv = if b == u32::MAX { 0.0 } else { sv[b as usize] };
                    apply_scalar(kind, sv[a as usize], bv)?
                }
            };
            if !v.is_finite() {
                return Err(FexError::NonFinite("scalar evaluation"));
            }
            sv.push(v);
        }
        Ok(sv)
    }

    fn forward_chunk(&self, sv: &[f64], points: &PointSet, start: usize, len: usize, vals: &mut [f64]) -> Result<()> {
        let dim = points.dim();
        let data = points.as_slice();
        for (i, instr) in self.vector.iter().enumerate() {
            let (lower, upper) = vals.split_at_mut(i * CHUNK);
            let out = &mut upper[..len];
            match *instr {
                VInstr::Var(k) => {
                    let k = k as usize;
                    for (j, o) in out.iter_mut().enumerate() {
                        *o = data[(start + j) * dim + k];
                    }
                    continue;
                }
                VInstr::Op(kind, a, b) => {
                    let col = |s: u32| &lower[s as usize * CHUNK..s as usize * CHUNK + len];
                    match kind {
                        Kind::Add | Kind::Sub | Kind::Mul | Kind::Div => {
                            let operand = |s: Src| match s {
                                Src::V(p) => Operand::Col(col(p)),
                                Src::S(p) => Operand::Val(sv[p as usize]),
                            };
                            let (x, y) = (operand(a), operand(b));
                            if kind == Kind::Div {
                                let small = match y {
                                    Operand::Col(c) => c.iter().any(|v| v.abs() < DIV_GUARD),
                                    Operand::Val(v) => v.abs() < DIV_GUARD,
                                };
                                if small {
                                    return Err(FexError::NonFinite("division"));
                                }
                            }
                            match kind {
                                Kind::Add => binary_kernel(out, x, y, |p, q| p + q),
                                Kind::Sub => binary_kernel(out, x, y, |p, q| p - q),
                                Kind::Mul => binary_kernel(out, x, y, |p, q| p * q),
                                _ => binary_kernel(out, x, y, |p, q| p / q),
                            }
                        }
                        _ => {
                            let Src::V(p) = a else { unreachable!("vector unary op on scalar") };
                            let x = col(p);
                            match kind {
                                Kind::Neg => out.iter_mut().zip(x).for_each(|(o, &v)| *o = -v),
                                Kind::Powi(2) => out.iter_mut().zip(x).for_each(|(o, &v)| *o = v * v),
                                Kind::Powi(3) => out.iter_mut().zip(x).for_each(|(o, &v)| *o = v * v * v),
                                Kind::Powi(n) => out.iter_mut().zip(x).for_each(|(o, &v)| *o = v.powi(n)),
                                Kind::Exp => out.iter_mut().zip(x).for_each(|(o, &v)| *o = v.exp()),
                                Kind::Sin => out.iter_mut().zip(x).for_each(|(o, &v)| *o = v.sin()),
                                Kind::Cos => out.iter_mut().zip(x).for_each(|(o, &v)| *o = v.cos()),
                                _ => unreachable!(),
                            }
                        }
                    }
                }
            }
            if !out.iter().all(|v| v.is_finite()) {
                return Err(FexError::NonFinite("expression evaluation"));
            }
        }
        Ok(())
    }

    /// Adds `g(j)` to the adjoint of `src` for every lane `j`.
    #[inline]
    fn acc(lower: &mut [f64], sadj: &mut [f64], src: Src, len: usize, g: impl Fn(usize) -> f64) {
        match src {
            Src::V(s) => {
                let dst = &mut lower[s as usize * CHUNK..s as usize * CHUNK + len];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += g(j);
                }
            }
            Src::S(s) => {
                let mut total = 0.0;
                for j in 0..len {
                    total += g(j);
                }
                sadj[s as usize] += total;
            }
        }
    }

    fn backward_chunk(&self, sv: &[f64], vals: &[f64], adj: &mut [f64], sadj: &mut [f64], len: usize) {
        let val = |s: Src, j: usize| match s {
            Src::V(p) => vals[p as usize * CHUNK + j],
            Src::S(p) => sv[p as usize],
        };
        for (i, instr) in self.vector.iter().enumerate().rev() {
            let VInstr::Op(kind, a, b) = *instr else { continue };
            let (lower, upper) = adj.split_at_mut(i * CHUNK);
            let g = &upper[..len];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let out = &vals[i * CHUNK..i * CHUNK + len];
            match kind {
                Kind::Add => {
                    Self::acc(lower, sadj, a, len, |j| g[j]);
                    Self::acc(lower, sadj, b, len, |j| g[j]);
                }
                Kind::Sub => {
                    Self::acc(lower, sadj, a, len, |j| g[j]);
                    Self::acc(lower, sadj, b, len, |j| -g[j]);
                }
                Kind::Mul => {
                    Self::acc(lower, sadj, a, len, |j| g[j] * val(b, j));
                    Self::acc(lower, sadj, b, len, |j| g[j] * val(a, j));
                }
                Kind::Div => {
                    Self::acc(lower, sadj, a, len, |j| g[j] / val(b, j));
                    Self::acc(lower, sadj, b, len, |j| -g[j] * out[j] / val(b, j));
                }
                Kind::Neg => Self::acc(lower, sadj, a, len, |j| -g[j]),
                Kind::Powi(2) => Self::acc(lower, sadj, a, len, |j| 2.0 * g[j] * val(a, j)),
                Kind::Powi(n) => {
                    Self::acc(lower, sadj, a, len, |j| g[j] * n as f64 * val(a, j).powi(n - 1))
                }
                Kind::Exp => Self::acc(lower, sadj, a, len, |j| g[j] * out[j]),
                Kind::Sin => Self::acc(lower, sadj, a, len, |j| g[j] * val(a, j).cos()),
                Kind::Cos => Self::acc(lower, sadj, a, len, |j| -g[j] * val(a, j).sin()),
            }
        }
    }

    fn scalar_backward(&self, sv: &[f64], sadj: &mut [f64], grad: &mut [f64]) {
        for (i, instr) in self.scalar.iter().enumerate().rev() {
            let g = sadj[i];
            if g == 0.0 {
                continue;
            }
            match *instr {
                SInstr::Const(_) => {}
                SInstr::Param(k) => grad[k as usize] += g,
                SInstr::Op(kind, a, b) => {
                    let (a, b) = (a as usize, b as usize);
                    let av = sv[a];
                    match kind {
                        Kind::Add => {
                            sadj[a] += g;
                            sadj[b] += g;
                        }
                        Kind::Sub => {
                            sadj[a] += g;
                            sadj[b] -= g;
                        }
                        Kind::Mul => {
                            let bv = sv[b];
                            sadj[a] += g * bv;
                            sadj[b] += g * av;
                        }
                        Kind::Div => {
                            let bv = sv[b];
                            sadj[a] += g / bv;
                            sadj[b] -= g * sv[i] / bv;
                        }
                        Kind::Neg => sadj[a] -= g,
                        Kind::Powi(n) => sadj[a] += g * n as f64 * av.powi(n - 1),
                        Kind::Exp => sadj[a] += g * sv[i],
                        Kind::Sin => sadj[a] += g * av.cos(),
                        Kind::Cos => sadj[a] -= g * av.sin(),
                    }
                }
            }
        }
    }

    /// Values of every output at every point.
    pub fn evaluate(&self, params: &[f64], points: &PointSet) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(params, points)?;
        let sv = self.scalar_forward(params)?;
        let n = points.len();
        let mut out: Vec<Vec<f64>> = self.outputs.iter().map(|_| Vec::with_capacity(n)).collect();
        let mut vals = vec![0.0; self.vector.len() * CHUNK];
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            self.forward_chunk(&sv, points, start, len, &mut vals)?;
            for (o, src) in out.iter_mut().zip(&self.outputs) {
                match *src {
                    Src::V(s) => o.extend_from_slice(&vals[s as usize * CHUNK..s as usize * CHUNK + len]),
                    Src::S(s) => o.extend(std::iter::repeat(sv[s as usize]).take(len)),
                }
            }
            start += len;
        }
        Ok(out)
    }

    /// Sum over points of every output.
    pub fn output_sums(&self, params: &[f64], points: &PointSet) -> Result<Vec<f64>> {
        self.check_inputs(params, points)?;
        let sv = self.scalar_forward(params)?;
        let n = points.len();
        let mut sums = vec![0.0; self.outputs.len()];
        let mut vals = vec![0.0; self.vector.len() * CHUNK];
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            self.forward_chunk(&sv, points, start, len, &mut vals)?;
            self.add_sums(&sv, &vals, len, &mut sums);
            start += len;
        }
        Ok(sums)
    }

    fn add_sums(&self, sv: &[f64], vals: &[f64], len: usize, sums: &mut [f64]) {
        for (s, src) in sums.iter_mut().zip(&self.outputs) {
            *s += match *src {
                Src::V(p) => vals[p as usize * CHUNK..p as usize * CHUNK + len].iter().sum::<f64>(),
                Src::S(p) => sv[p as usize] * len as f64,
            };
        }
    }

    /// Sums of every output over the points, and accumulation into `grad` of
    /// the parameter gradient of `sum_points sum_j seeds[j] * output_j`.
    pub fn sums_and_grad(
        &self,
        params: &[f64],
        points: &PointSet,
        seeds: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check_inputs(params, points)?;
        assert_eq!(seeds.len(), self.outputs.len());
        assert_eq!(grad.len(), self.n_params);
        let sv = self.scalar_forward(params)?;
        let n = points.len();
        let nv = self.vector.len() * CHUNK;
        let mut sums = vec![0.0; self.outputs.len()];
        let mut vals = vec![0.0; nv];
        let mut adj = vec![0.0; nv];
        let mut sadj = vec![0.0; self.scalar.len()];
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            self.forward_chunk(&sv, points, start, len, &mut vals)?;
            self.add_sums(&sv, &vals, len, &mut sums);
            adj.iter_mut().for_each(|a| *a = 0.0);
            for (src, &seed) in self.outputs.iter().zip(seeds) {
                match *src {
                    Src::V(p) => adj[p as usize * CHUNK..p as usize * CHUNK + len]
                        .iter_mut()
                        .for_each(|a| *a += seed),
                    Src::S(p) => sadj[p as usize] += seed * len as f64,
                }
            }
            self.backward_chunk(&sv, &vals, &mut adj, &mut sadj, len);
            start += len;
        }
        self.scalar_backward(&sv, &mut sadj, grad);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(FexError::NonFinite("parameter gradient"));
        }
        Ok(sums)
    }
}
