//! PDE functionals and benchmark problems.
//!
//! Every functional here is a smooth function of a few Monte Carlo moments
//! `m_j = |region_j| * mean(integrand_j)`. Integrands are symbolic in the
//! candidate's parameters, so a functional compiles once per operator sequence
//! into one [`Tape`] per sampled region and yields exact parameter gradients.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{FexError, Result};
use crate::expr::{build_tree, Expression, InputLayout, OperatorSequence, TreeTemplate};
use crate::points::PointSet;
use crate::rng::{stream, tag, Rng};
use crate::sampling::{
    mc_integral, sample_boundary, sample_initial_slice, sample_interior, shifted_mean, DomainSpec, SampleBatch,
};
use crate::symbolic::{Graph, NodeId, SymbolicExpr, Tape};

/// Below this, Rayleigh denominators and L2 norms are treated as zero.
pub const DEGENERACY_GUARD: f64 = 1e-12;

/// Samples used for the precomputed Schrodinger integral constant.
pub const SCHRODINGER_CONSTANT_SAMPLES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Interior,
    Boundary,
    InitialSlice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub kind: RegionKind,
    pub batch: usize,
}

/// Outer map from moments to the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Combiner {
    /// `sum_j w_j m_j`
    Linear(Vec<f64>),
    /// `m0 + lambda (m1 - target)^2`
    IntegralConstraint { lambda: f64, target: f64 },
    /// `m0 / m1`, plus `l1 m2 + l2 (m1 - 1)^2` when penalized
    Rayleigh { penalty: Option<(f64, f64)> },
}

impl Combiner {
    pub fn n_moments(&self) -> usize {
        match self {
            Combiner::Linear(w) => w.len(),
            Combiner::IntegralConstraint { .. } => 2,
            Combiner::Rayleigh { penalty: None } => 2,
            Combiner::Rayleigh { penalty: Some(_) } => 3,
        }
    }

    pub fn value(&self, m: &[f64]) -> Result<f64> {
        Ok(match self {
            Combiner::Linear(w) => w.iter().zip(m).map(|(w, m)| w * m).sum(),
            Combiner::IntegralConstraint { lambda, target } => m[0] + lambda * (m[1] - target).powi(2),
            Combiner::Rayleigh { penalty } => {
                if m[1] < DEGENERACY_GUARD {
                    return Err(FexError::DegenerateDenominator(m[1]));
                }
                let q = m[0] / m[1];
                match penalty {
                    None => q,
                    Some((l1, l2)) => q + l1 * m[2] + l2 * (m[1] - 1.0).powi(2),
                }
            }
        })
    }

    /// Partial derivatives with respect to each moment.
    pub fn partials(&self, m: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            Combiner::Linear(w) => w.clone(),
            Combiner::IntegralConstraint { lambda, target } => vec![1.0, 2.0 * lambda * (m[1] - target)],
            Combiner::Rayleigh { penalty } => {
                if m[1] < DEGENERACY_GUARD {
                    return Err(FexError::DegenerateDenominator(m[1]));
                }
                let mut p = vec![1.0 / m[1], -m[0] / (m[1] * m[1])];
                if let Some((l1, l2)) = penalty {
                    p[1] += 2.0 * l2 * (m[1] - 1.0);
                    p.push(*l1);
                }
                p
            }
        })
    }

    /// Partials that do not depend on the moments.
    fn constant_partials(&self) -> Vec<Option<f64>> {
        match self {
            Combiner::Linear(w) => w.iter().map(|&w| Some(w)).collect(),
            Combiner::IntegralConstraint { .. } => vec![Some(1.0), None],
            Combiner::Rayleigh { penalty: None } => vec![None, None],
            Combiner::Rayleigh { penalty: Some((l1, _)) } => vec![None, None, Some(*l1)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConservationForm {
    /// `(pi d / 4) u_t - sum_i u_{x_i}`, zeroed by the closed-form solution.
    Consistent,
    /// `u_t - sum_i u_{x_i}`.
    Unscaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemKind {
    Poisson { lambda: f64 },
    Conservation { lambda: f64, form: ConservationForm },
    Schrodinger { lambda: f64, target: f64 },
    Eigen { lambda_boundary: f64, lambda_norm: f64 },
    EigenSimplified { gamma: f64 },
}

/// A benchmark: domain, sampled regions and the functional built on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeProblem {
    name: String,
    dim: usize,
    kind: ProblemKind,
    domain: DomainSpec,
    regions: Vec<RegionSpec>,
    constants: BTreeMap<String, f64>,
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        Err(FexError::Config("dimension must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn check_penalty(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(FexError::Config(format!("{name} must be finite and non-negative, got {v}")))
    }
}

impl PdeProblem {
    pub const NAMES: [&'static str; 4] = ["poisson", "conservation", "schrodinger", "eigen"];

    /// `-Δu = -d` on `[-1,1]^d`, Dirichlet data `½‖x‖²`.
    pub fn poisson(d: usize) -> Result<Self> {
        check_dim(d)?;
        Ok(Self {
            name: "poisson".into(),
            dim: d,
            kind: ProblemKind::Poisson { lambda: 100.0 },
            domain: DomainSpec::hypercube(d, -1.0, 1.0)?,
            regions: vec![
                RegionSpec { kind: RegionKind::Interior, batch: 5000 },
                RegionSpec { kind: RegionKind::Boundary, batch: 1000 },
            ],
            constants: BTreeMap::new(),
        })
    }

    /// Linear transport on `[0,1] x [-1,1]^d` with data `sin(π/4 Σx)` at `t = 0`.
    pub fn conservation(d: usize) -> Result<Self> {
        Self::conservation_with_form(d, ConservationForm::Consistent)
    }

    pub fn conservation_with_form(d: usize, form: ConservationForm) -> Result<Self> {
        check_dim(d)?;
        Ok(Self {
            name: "conservation".into(),
            dim: d,
            kind: ProblemKind::Conservation { lambda: 100.0, form },
            domain: DomainSpec::timed_hypercube(d, -1.0, 1.0, 0.0, 1.0)?,
            regions: vec![
                RegionSpec { kind: RegionKind::Interior, batch: 5000 },
                RegionSpec { kind: RegionKind::InitialSlice, batch: 1000 },
            ],
            constants: BTreeMap::new(),
        })
    }

    /// `-Δu + u³ + Vu = 0` on `[-1,1]^d` with the integral of `u` pinned.
    pub fn schrodinger(d: usize) -> Result<Self> {
        Self::schrodinger_with_samples(d, SCHRODINGER_CONSTANT_SAMPLES)
    }

    pub fn schrodinger_with_samples(d: usize, samples: usize) -> Result<Self> {
        check_dim(d)?;
        let domain = DomainSpec::hypercube(d, -1.0, 1.0)?;
        let mut rng = stream(0, &[tag::SCHRODINGER_CONSTANT, d as u64]);
        let target = schrodinger_integral(&domain, samples, &mut rng)?;
        let mut constants = BTreeMap::new();
        constants.insert("integral_target".to_string(), target);
        constants.insert("integral_target_samples".to_string(), samples as f64);
        Ok(Self {
            name: "schrodinger".into(),
            dim: d,
            kind: ProblemKind::Schrodinger { lambda: 1.0, target },
            domain,
            regions: vec![
                RegionSpec { kind: RegionKind::Interior, batch: 2000 },
                RegionSpec { kind: RegionKind::Interior, batch: 10_000 },
            ],
            constants,
        })
    }

    /// Constrained Rayleigh functional for `-Δu + ‖x‖²u = γu` on `[-3,3]^d`.
    pub fn eigen(d: usize) -> Result<Self> {
        check_dim(d)?;
        Ok(Self {
            name: "eigen".into(),
            dim: d,
            kind: ProblemKind::Eigen { lambda_boundary: 500.0, lambda_norm: 500.0 },
            domain: DomainSpec::hypercube(d, -3.0, 3.0)?,
            regions: vec![
                RegionSpec { kind: RegionKind::Interior, batch: 10_000 },
                RegionSpec { kind: RegionKind::Boundary, batch: 2000 },
            ],
            constants: BTreeMap::new(),
        })
    }

    /// Residual `-Δv - ‖∇v‖² + ‖x‖² - γ` of the log-transformed eigenproblem.
    pub fn eigen_simplified(d: usize, gamma: f64) -> Result<Self> {
        check_dim(d)?;
        if !gamma.is_finite() {
            return Err(FexError::NonFinite("eigenvalue estimate"));
        }
        let mut constants = BTreeMap::new();
        constants.insert("gamma".to_string(), gamma);
        Ok(Self {
            name: "eigen_simplified".into(),
            dim: d,
            kind: ProblemKind::EigenSimplified { gamma },
            domain: DomainSpec::hypercube(d, -3.0, 3.0)?,
            regions: vec![RegionSpec { kind: RegionKind::Interior, batch: 10_000 }],
            constants,
        })
    }

    pub fn by_name(name: &str, d: usize) -> Result<Self> {
        match name {
            "poisson" => Self::poisson(d),
            "conservation" => Self::conservation(d),
            "schrodinger" => Self::schrodinger(d),
            "eigen" => Self::eigen(d),
            _ => Err(FexError::Config(format!(
                "unknown problem `{name}`; expected one of {}",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &ProblemKind {
        &self.kind
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn regions(&self) -> &[RegionSpec] {
        &self.regions
    }

    pub fn constants(&self) -> &BTreeMap<String, f64> {
        &self.constants
    }

    pub fn layout(&self) -> InputLayout {
        match self.kind {
            ProblemKind::Conservation { .. } => InputLayout::timed(self.dim),
            _ => InputLayout::spatial(self.dim),
        }
    }

    /// Replaces the per-region batch sizes.
    pub fn with_batches(mut self, batches: &[usize]) -> Result<Self> {
        if batches.len() != self.regions.len() {
            return Err(FexError::Config(format!(
                "problem `{}` takes {} batch sizes, got {}",
                self.name,
                self.regions.len(),
                batches.len()
            )));
        }
        if batches.contains(&0) {
            return Err(FexError::Config("batch sizes must be at least 1".into()));
        }
        for (r, &b) in self.regions.iter_mut().zip(batches) {
            r.batch = b;
        }
        Ok(self)
    }

    /// Replaces the single penalty coefficient of Poisson, conservation or Schrodinger.
    pub fn with_lambda(mut self, value: f64) -> Result<Self> {
        check_penalty("lambda", value)?;
        match &mut self.kind {
            ProblemKind::Poisson { lambda }
            | ProblemKind::Conservation { lambda, .. }
            | ProblemKind::Schrodinger { lambda, .. } => *lambda = value,
            _ => return Err(FexError::Config(format!("problem `{}` has no single lambda", self.name))),
        }
        Ok(self)
    }

    pub fn with_eigen_penalties(mut self, boundary: f64, norm: f64) -> Result<Self> {
        check_penalty("lambda_boundary", boundary)?;
        check_penalty("lambda_norm", norm)?;
        match &mut self.kind {
            ProblemKind::Eigen { lambda_boundary, lambda_norm } => {
                *lambda_boundary = boundary;
                *lambda_norm = norm;
            }
            _ => return Err(FexError::Config(format!("problem `{}` has no eigen penalties", self.name))),
        }
        Ok(self)
    }

    pub fn combiner(&self) -> Combiner {
        match self.kind {
            ProblemKind::Poisson { lambda } | ProblemKind::Conservation { lambda, .. } => {
                Combiner::Linear(vec![1.0, lambda])
            }
            ProblemKind::Schrodinger { lambda, target } => Combiner::IntegralConstraint { lambda, target },
            ProblemKind::Eigen { lambda_boundary, lambda_norm } => {
                Combiner::Rayleigh { penalty: Some((lambda_boundary, lambda_norm)) }
            }
            ProblemKind::EigenSimplified { .. } => Combiner::Linear(vec![1.0]),
        }
    }

    fn spatial_vars(&self) -> Vec<usize> {
        let l = self.layout();
        (0..self.dim).map(|i| l.spatial_index(i)).collect()
    }

    /// Adds the integrand of every moment to `g`; returns `(region, node)` per moment.
    pub fn build_moments(&self, g: &mut Graph, u: NodeId) -> Vec<(usize, NodeId)> {
        let xs = self.spatial_vars();
        let d = self.dim as f64;
        match self.kind {
            ProblemKind::Poisson { .. } => {
                let lap = g.laplacian(u, xs.iter().copied());
                let f = g.constant(d);
                let r = g.sub(f, lap);
                let r2 = g.powi(r, 2);
                let half = g.norm_sq(xs.iter().copied());
                let data = g.scale(0.5, half);
                let rb = g.sub(u, data);
                let rb2 = g.powi(rb, 2);
                vec![(0, r2), (1, rb2)]
            }
            ProblemKind::Conservation { form, .. } => {
                let ut = g.diff(u, 0);
                let c = match form {
                    ConservationForm::Consistent => PI * d / 4.0,
                    ConservationForm::Unscaled => 1.0,
                };
                let ut = g.scale(c, ut);
                let ux: Vec<NodeId> = xs.iter().map(|&k| g.diff(u, k)).collect();
                let sx = g.sum(ux);
                let r = g.sub(ut, sx);
                let r2 = g.powi(r, 2);
                let data = conservation_initial(g, &xs);
                let rb = g.sub(u, data);
                let rb2 = g.powi(rb, 2);
                vec![(0, r2), (1, rb2)]
            }
            ProblemKind::Schrodinger { .. } => {
                let lap = g.laplacian(u, xs.iter().copied());
                let cube = g.powi(u, 3);
                let v = schrodinger_potential(g, &xs);
                let vu = g.mul(v, u);
                let t = g.sub(cube, lap);
                let r = g.add(t, vu);
                let r2 = g.powi(r, 2);
                vec![(0, r2), (1, u)]
            }
            ProblemKind::Eigen { .. } => {
                let grad = g.grad_norm_sq(u, xs.iter().copied());
                let w = g.norm_sq(xs.iter().copied());
                let u2 = g.powi(u, 2);
                let wu2 = g.mul(w, u2);
                let num = g.add(grad, wu2);
                vec![(0, num), (0, u2), (1, u2)]
            }
            ProblemKind::EigenSimplified { gamma } => {
                let lap = g.laplacian(u, xs.iter().copied());
                let grad = g.grad_norm_sq(u, xs.iter().copied());
                let w = g.norm_sq(xs.iter().copied());
                let gm = g.constant(gamma);
                let a = g.add(lap, grad);
                let b = g.sub(w, gm);
                let r = g.sub(b, a);
                let r2 = g.powi(r, 2);
                vec![(0, r2)]
            }
        }
    }

    /// Closed-form solution where one is known.
    pub fn true_solution(&self) -> Option<SymbolicExpr> {
        let layout = self.layout();
        let mut g = Graph::new(layout.dim(), 0);
        let xs = self.spatial_vars();
        let root = match self.kind {
            ProblemKind::Poisson { .. } => {
                let s = g.norm_sq(xs.iter().copied());
                g.scale(0.5, s)
            }
            ProblemKind::Conservation { .. } => {
                let vars: Vec<NodeId> = xs.iter().map(|&k| g.var(k)).collect();
                let s = g.sum(vars);
                let s = g.scale(PI / 4.0, s);
                let t = g.var(0);
                let a = g.add(t, s);
                g.sin(a)
            }
            ProblemKind::Schrodinger { .. } => schrodinger_solution(&mut g, &xs),
            ProblemKind::Eigen { .. } => {
                let s = g.norm_sq(xs.iter().copied());
                let s = g.scale(-0.5, s);
                g.exp(s)
            }
            ProblemKind::EigenSimplified { .. } => return None,
        };
        Some(SymbolicExpr::new(g, root, layout, Default::default()))
    }

    /// Whether the error metric ignores the candidate's scale (eigenfunctions).
    pub fn scale_free_error(&self) -> bool {
        matches!(self.kind, ProblemKind::Eigen { .. })
    }

    /// Relative L2 error of `candidate` against the closed-form solution on `points`.
    ///
    /// For the eigenproblem the candidate is first rescaled by the
    /// least-squares factor onto the reference eigenfunction.
    pub fn relative_error(&self, candidate: &SymbolicExpr, points: &PointSet) -> Option<Result<f64>> {
        let truth = self.true_solution()?;
        Some((|| {
            let c = candidate.eval_batch(points)?;
            let t = truth.eval_batch(points)?;
            if self.scale_free_error() {
                let ct: f64 = c.iter().zip(&t).map(|(a, b)| a * b).sum();
                let cc: f64 = c.iter().map(|a| a * a).sum();
                if cc < DEGENERACY_GUARD {
                    return Err(FexError::DegenerateDenominator(cc));
                }
                let s = ct / cc;
                let scaled: Vec<f64> = c.iter().map(|a| s * a).collect();
                relative_l2_values(&scaled, &t)
            } else {
                relative_l2_values(&c, &t)
            }
        })())
    }

    pub fn sample_region(&self, region: usize, rng: &mut Rng) -> Result<SampleBatch> {
        let r = self.regions[region];
        match r.kind {
            RegionKind::Interior => sample_interior(&self.domain, r.batch, rng),
            RegionKind::Boundary => sample_boundary(&self.domain, r.batch, rng),
            RegionKind::InitialSlice => sample_initial_slice(&self.domain, r.batch, rng),
        }
    }

    /// One fresh batch per region.
    pub fn sample(&self, rng: &mut Rng) -> Result<Batches> {
        (0..self.regions.len())
            .map(|r| self.sample_region(r, rng))
            .collect::<Result<Vec<_>>>()
            .map(Batches)
    }

    /// Functional compiled for one operator sequence.
    pub fn compile(&self, template: &TreeTemplate, ops: &OperatorSequence) -> Result<CompiledFunctional> {
        if template.layout() != self.layout() {
            return Err(FexError::Config(format!(
                "template input layout {:?} does not match problem `{}` ({:?})",
                template.layout(),
                self.name,
                self.layout()
            )));
        }
        let mut g = Graph::new(template.input_dim(), template.n_params());
        let u = build_tree(template, ops, &mut g);
        Ok(self.compile_graph(&g, u))
    }

    /// Functional for an arbitrary symbolic candidate.
    pub fn compile_symbolic(&self, u: &SymbolicExpr) -> Result<CompiledFunctional> {
        if u.layout() != self.layout() {
            return Err(FexError::DimensionMismatch { expected: self.layout().dim(), got: u.layout().dim() });
        }
        Ok(self.compile_graph(u.graph(), u.root()))
    }

    fn compile_graph(&self, g: &Graph, u: NodeId) -> CompiledFunctional {
        let mut g = g.clone();
        let moments = self.build_moments(&mut g, u);
        let combiner = self.combiner();
        debug_assert_eq!(moments.len(), combiner.n_moments());
        let mut outputs: Vec<Vec<NodeId>> = vec![Vec::new(); self.regions.len()];
        let mut slots = Vec::with_capacity(moments.len());
        for &(r, node) in &moments {
            slots.push((r, outputs[r].len()));
            outputs[r].push(node);
        }
        let constant = combiner.constant_partials();
        let fused = (0..self.regions.len())
            .map(|r| slots.iter().zip(&constant).all(|(&(rr, _), c)| rr != r || c.is_some()))
            .collect();
        CompiledFunctional {
            tapes: outputs.iter().map(|o| Tape::compile(&g, o)).collect(),
            slots,
            fused,
            combiner,
            n_params: g.n_params(),
        }
    }

    /// Functional value of a symbolic candidate on the given batches.
    pub fn functional_value(&self, u: &SymbolicExpr, batches: &Batches) -> Result<f64> {
        self.compile_symbolic(u)?.value(u.params(), batches)
    }
}

fn conservation_initial(g: &mut Graph, xs: &[usize]) -> NodeId {
    let vars: Vec<NodeId> = xs.iter().map(|&k| g.var(k)).collect();
    let s = g.sum(vars);
    let s = g.scale(PI / 4.0, s);
    g.sin(s)
}

fn schrodinger_potential(g: &mut Graph, xs: &[usize]) -> NodeId {
    let d = xs.len() as f64;
    let cos: Vec<NodeId> = xs
        .iter()
        .map(|&k| {
            let x = g.var(k);
            g.cos(x)
        })
        .collect();
    let sc = g.sum(cos.iter().copied());
    let e = g.scale(2.0 / d, sc);
    let e = g.exp(e);
    let head = g.scale(-1.0 / 9.0, e);
    let terms: Vec<NodeId> = xs
        .iter()
        .zip(&cos)
        .map(|(&k, &c)| {
            let x = g.var(k);
            let s = g.sin(x);
            let s2 = g.powi(s, 2);
            let a = g.scale(1.0 / (d * d), s2);
            let b = g.scale(1.0 / d, c);
            g.sub(a, b)
        })
        .collect();
    let tail = g.sum(terms);
    g.add(head, tail)
}

fn schrodinger_solution(g: &mut Graph, xs: &[usize]) -> NodeId {
    let d = xs.len() as f64;
    let cos: Vec<NodeId> = xs
        .iter()
        .map(|&k| {
            let x = g.var(k);
            g.cos(x)
        })
        .collect();
    let s = g.sum(cos);
    let s = g.scale(1.0 / d, s);
    let e = g.exp(s);
    g.scale(1.0 / 3.0, e)
}

/// Monte Carlo estimate of the integral of `exp(mean cos x) / 3` over `domain`.
fn schrodinger_integral(domain: &DomainSpec, samples: usize, rng: &mut Rng) -> Result<f64> {
    let batch = sample_interior(domain, samples, rng)?;
    let d = domain.spatial_dim() as f64;
    mc_integral(
        |p| Ok(p.rows().map(|x| (x.iter().map(|v| v.cos()).sum::<f64>() / d).exp() / 3.0).collect()),
        &batch,
    )
}

/// One sample batch per problem region.
#[derive(Debug, Clone, PartialEq)]
pub struct Batches(pub Vec<SampleBatch>);

/// A problem's functional specialized to one operator sequence.
#[derive(Debug, Clone)]
pub struct CompiledFunctional {
    tapes: Vec<Tape>,
    /// moment -> (region, tape output)
    slots: Vec<(usize, usize)>,
    /// regions whose gradient seeds are known before the forward pass
    fused: Vec<bool>,
    combiner: Combiner,
    n_params: usize,
}

impl CompiledFunctional {
    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn check(&self, params: &[f64], batches: &Batches) -> Result<()> {
        if params.len() != self.n_params {
            return Err(FexError::DimensionMismatch { expected: self.n_params, got: params.len() });
        }
        if batches.0.len() != self.tapes.len() {
            return Err(FexError::DimensionMismatch { expected: self.tapes.len(), got: batches.0.len() });
        }
        Ok(())
    }

    fn scale(batch: &SampleBatch) -> f64 {
        batch.weight / batch.len() as f64
    }

    /// Monte Carlo moments `m_j`.
    pub fn moments(&self, params: &[f64], batches: &Batches) -> Result<Vec<f64>> {
        self.check(params, batches)?;
        let mut m = vec![0.0; self.slots.len()];
        for (r, (tape, batch)) in self.tapes.iter().zip(&batches.0).enumerate() {
            let sums = tape.output_sums(params, &batch.points)?;
            self.store(r, &sums, Self::scale(batch), &mut m);
        }
        finite_all(&m, "functional moments")?;
        Ok(m)
    }

    fn store(&self, region: usize, sums: &[f64], scale: f64, m: &mut [f64]) {
        for (j, &(r, o)) in self.slots.iter().enumerate() {
            if r == region {
                m[j] = sums[o] * scale;
            }
        }
    }

    fn seeds(&self, region: usize, partials: &[f64], scale: f64) -> Vec<f64> {
        let mut s = vec![0.0; self.tapes[region].n_outputs()];
        for (j, &(r, o)) in self.slots.iter().enumerate() {
            if r == region {
                s[o] += partials[j] * scale;
            }
        }
        s
    }

    pub fn value(&self, params: &[f64], batches: &Batches) -> Result<f64> {
        let m = self.moments(params, batches)?;
        finite(self.combiner.value(&m)?, "functional value")
    }

    /// Value, and its parameter gradient written into `grad`.
    pub fn value_and_grad(&self, params: &[f64], batches: &Batches, grad: &mut [f64]) -> Result<f64> {
        self.check(params, batches)?;
        if grad.len() != self.n_params {
            return Err(FexError::DimensionMismatch { expected: self.n_params, got: grad.len() });
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let constant: Vec<f64> = self.combiner.constant_partials().iter().map(|c| c.unwrap_or(0.0)).collect();
        let mut m = vec![0.0; self.slots.len()];
        for (r, (tape, batch)) in self.tapes.iter().zip(&batches.0).enumerate() {
            let scale = Self::scale(batch);
            let sums = if self.fused[r] {
                let seeds = self.seeds(r, &constant, scale);
                tape.sums_and_grad(params, &batch.points, &seeds, grad)?
            } else {
                tape.output_sums(params, &batch.points)?
            };
            self.store(r, &sums, scale, &mut m);
        }
        finite_all(&m, "functional moments")?;
        if self.fused.iter().any(|f| !f) {
            let partials = self.combiner.partials(&m)?;
            for (r, (tape, batch)) in self.tapes.iter().zip(&batches.0).enumerate() {
                if !self.fused[r] {
                    let seeds = self.seeds(r, &partials, Self::scale(batch));
                    tape.sums_and_grad(params, &batch.points, &seeds, grad)?;
                }
            }
        }
        finite_all(grad, "functional gradient")?;
        finite(self.combiner.value(&m)?, "functional value")
    }
}

/// Exact parameter gradient of the problem's functional at `expr` on `batches`.
pub fn grad_theta(expr: &Expression, problem: &PdeProblem, batches: &Batches) -> Result<Vec<f64>> {
    let f = problem.compile(expr.template(), expr.ops())?;
    let mut grad = vec![0.0; expr.params().len()];
    f.value_and_grad(expr.params(), batches, &mut grad)?;
    Ok(grad)
}

fn finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FexError::NonFinite(what))
    }
}

fn finite_all(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FexError::NonFinite(what))
    }
}

/// `‖D u - f‖² + λ ‖B u - g‖²` from pointwise residual evaluators.
pub fn least_squares_functional<R, B>(
    residual: R,
    boundary_residual: B,
    lambda: f64,
    interior: &SampleBatch,
    boundary: &SampleBatch,
) -> Result<f64>
where
    R: FnOnce(&PointSet) -> Result<Vec<f64>>,
    B: FnOnce(&PointSet) -> Result<Vec<f64>>,
{
    let squared = |v: Vec<f64>| v.into_iter().map(|r| r * r).collect::<Vec<_>>();
    let a = mc_integral(|p| residual(p).map(squared), interior)?;
    if lambda == 0.0 {
        return Ok(a);
    }
    let b = mc_integral(|p| boundary_residual(p).map(squared), boundary)?;
    finite(a + lambda * b, "least-squares functional")
}

/// Values of `u` and of its spatial gradient at `points`.
fn value_and_spatial_gradient(u: &SymbolicExpr, points: &PointSet) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let layout = u.layout();
    let mut g = u.graph().clone();
    let mut outs = vec![u.root()];
    for i in 0..layout.spatial_dim {
        outs.push(g.diff(u.root(), layout.spatial_index(i)));
    }
    let mut vals = Tape::compile(&g, &outs).evaluate(u.params(), points)?;
    let value = vals.remove(0);
    Ok((value, vals))
}

fn grad_sq(grad: &[Vec<f64>], i: usize) -> f64 {
    grad.iter().map(|c| c[i] * c[i]).sum()
}

/// `½∫(‖∇u‖² + c u²) - ∫ f u + λ ∫_∂ u²`.
pub fn variational_functional<C, F>(
    u: &SymbolicExpr,
    c: C,
    f: F,
    lambda: f64,
    interior: &SampleBatch,
    boundary: &SampleBatch,
) -> Result<f64>
where
    C: FnOnce(&PointSet) -> Result<Vec<f64>>,
    F: FnOnce(&PointSet) -> Result<Vec<f64>>,
{
    let (v, grad) = value_and_spatial_gradient(u, &interior.points)?;
    let cv = c(&interior.points)?;
    let fv = f(&interior.points)?;
    let energy = mc_integral(
        |_| Ok((0..v.len()).map(|i| 0.5 * (grad_sq(&grad, i) + cv[i] * v[i] * v[i]) - fv[i] * v[i]).collect()),
        interior,
    )?;
    if lambda == 0.0 {
        return Ok(energy);
    }
    let ub = u.eval_batch(&boundary.points)?;
    let pen = mc_integral(|_| Ok(ub.iter().map(|x| x * x).collect()), boundary)?;
    finite(energy + lambda * pen, "variational functional")
}

/// `(∫‖∇u‖² + ∫ w u²) / ∫ u²`.
pub fn rayleigh_quotient<W>(u: &SymbolicExpr, w: W, batch: &SampleBatch) -> Result<f64>
where
    W: FnOnce(&PointSet) -> Result<Vec<f64>>,
{
    let (v, grad) = value_and_spatial_gradient(u, &batch.points)?;
    let wv = w(&batch.points)?;
    let num: Vec<f64> = (0..v.len()).map(|i| grad_sq(&grad, i) + wv[i] * v[i] * v[i]).collect();
    let den: Vec<f64> = v.iter().map(|x| x * x).collect();
    let den = batch.weight * shifted_mean(&den);
    if !(den >= DEGENERACY_GUARD) {
        return Err(FexError::DegenerateDenominator(den));
    }
    finite(batch.weight * shifted_mean(&num) / den, "Rayleigh quotient")
}

/// Rayleigh quotient of `exp(v)`, evaluated with `exp(v - max v)` to avoid overflow.
pub fn rayleigh_quotient_exp<W>(v: &SymbolicExpr, w: W, batch: &SampleBatch) -> Result<f64>
where
    W: FnOnce(&PointSet) -> Result<Vec<f64>>,
{
    let (val, grad) = value_and_spatial_gradient(v, &batch.points)?;
    let wv = w(&batch.points)?;
    let top = val.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = val.iter().map(|x| (2.0 * (x - top)).exp()).collect();
    let num: Vec<f64> = (0..val.len()).map(|i| (grad_sq(&grad, i) + wv[i]) * e[i]).collect();
    let den = shifted_mean(&e);
    if !(den >= DEGENERACY_GUARD) {
        return Err(FexError::DegenerateDenominator(den));
    }
    finite(shifted_mean(&num) / den, "Rayleigh quotient")
}

/// `ℐ(u) + λ1 ∫_∂ u² + λ2 (∫u² - 1)²`.
pub fn eigen_functional<W>(
    u: &SymbolicExpr,
    w: W,
    lambda_boundary: f64,
    lambda_norm: f64,
    interior: &SampleBatch,
    boundary: &SampleBatch,
) -> Result<f64>
where
    W: FnOnce(&PointSet) -> Result<Vec<f64>>,
{
    let q = rayleigh_quotient(u, w, interior)?;
    let v = u.eval_batch(&interior.points)?;
    let norm = mc_integral(|_| Ok(v.iter().map(|x| x * x).collect()), interior)?;
    let ub = u.eval_batch(&boundary.points)?;
    let edge = mc_integral(|_| Ok(ub.iter().map(|x| x * x).collect()), boundary)?;
    finite(q + lambda_boundary * edge + lambda_norm * (norm - 1.0).powi(2), "eigen functional")
}

/// `‖x‖²` over the spatial coordinates of each point.
pub fn squared_norm(layout: InputLayout) -> impl Fn(&PointSet) -> Result<Vec<f64>> {
    move |p: &PointSet| {
        Ok(p
            .rows()
            .map(|x| (0..layout.spatial_dim).map(|i| x[layout.spatial_index(i)].powi(2)).sum())
            .collect())
    }
}

fn relative_l2_values(candidate: &[f64], truth: &[f64]) -> Result<f64> {
    if candidate.len() != truth.len() {
        return Err(FexError::DimensionMismatch { expected: truth.len(), got: candidate.len() });
    }
    let num: f64 = candidate.iter().zip(truth).map(|(c, t)| (c - t) * (c - t)).sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if !(den >= DEGENERACY_GUARD) {
        return Err(FexError::DegenerateDenominator(den));
    }
    finite((num / den).sqrt(), "relative error")
}

/// `‖ũ - u‖ / ‖u‖` over a shared batch.
pub fn relative_l2_error<C, T>(candidate: C, truth: T, points: &PointSet) -> Result<f64>
where
    C: FnOnce(&PointSet) -> Result<Vec<f64>>,
    T: FnOnce(&PointSet) -> Result<Vec<f64>>,
{
    relative_l2_values(&candidate(points)?, &truth(points)?)
}
