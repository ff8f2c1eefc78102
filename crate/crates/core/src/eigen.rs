//! Iterative eigenpair solver for `-Δu + ‖x‖²u = γu` on `[-3,3]^d`.
//!
//! With `u = exp(v)` the eigenproblem becomes `-Δv - ‖∇v‖² + ‖x‖² = γ`. Each
//! outer step searches for `v` at the current `γ`, then replaces `γ` by the
//! Rayleigh quotient of `exp(v)` on a dedicated batch.

use serde::{Deserialize, Serialize};

use crate::error::{FexError, Result};
use crate::expr::{Expression, OperatorSequence, ParamVector, TreeTemplate};
use crate::pde::{rayleigh_quotient, rayleigh_quotient_exp, squared_norm, Batches, PdeProblem};
use crate::rng::{derive_seed, stream, tag};
use crate::sampling::{sample_interior, SampleBatch};
use crate::search::{search_fixed_tree, SearchConfig, SearchReport};
use crate::symbolic::SymbolicExpr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EigenConfig {
    /// Outer iterations `G`.
    pub outer_iterations: usize,
    /// Points of the batch used for every Rayleigh update.
    pub rayleigh_points: usize,
    /// Interior and boundary batch sizes of the constrained functional.
    pub initial_batches: Vec<usize>,
    /// Batch size of the simplified functional.
    pub simplified_batch: usize,
    pub lambda_boundary: f64,
    pub lambda_norm: f64,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 10,
            rayleigh_points: 100_000,
            initial_batches: vec![10_000, 2000],
            simplified_batch: 10_000,
            lambda_boundary: 500.0,
            lambda_norm: 500.0,
        }
    }
}

impl EigenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iterations == 0 {
            return Err(FexError::Config("outer iterations must be at least 1".into()));
        }
        if self.rayleigh_points == 0 || self.simplified_batch == 0 {
            return Err(FexError::Config("eigen batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// `‖-Δv - ‖∇v‖² + ‖x‖² - γ‖²` as mean square times volume.
pub fn simplified_eigen_functional(v: &SymbolicExpr, gamma: f64, batches: &Batches) -> Result<f64> {
    let d = v.layout().spatial_dim;
    PdeProblem::eigen_simplified(d, gamma)?.functional_value(v, batches)
}

fn best_expression(report: &SearchReport, template: &TreeTemplate) -> Result<Option<SymbolicExpr>> {
    let Some(best) = report.best_candidate() else { return Ok(None) };
    let ops = OperatorSequence::parse(template, &best.ops)?;
    let expr = Expression::new(template.clone().into(), ops, ParamVector(best.params.clone()))?;
    Ok(Some(expr.to_symbolic()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenStep {
    pub gamma: f64,
    pub search: SearchReport,
    /// Folded `v` found at this `gamma`.
    pub v: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    pub initial: SearchReport,
    /// `γ_0, ..., γ_G`.
    pub gammas: Vec<f64>,
    pub steps: Vec<EigenStep>,
    /// Folded `exp(v_G)`.
    pub eigenfunction: String,
    /// Scale-free relative L2 error of `exp(v_G)` against the Gaussian ground state.
    pub error: Option<f64>,
}

fn rayleigh_batch(d: usize, cfg: &EigenConfig, seed: u64) -> Result<SampleBatch> {
    let domain = PdeProblem::eigen(d)?.domain().clone();
    sample_interior(&domain, cfg.rayleigh_points, &mut stream(seed, &[tag::RAYLEIGH]))
}

/// Searches the constrained Rayleigh functional and returns the Rayleigh
/// quotient of its best expression, with the search report.
pub fn initial_gamma(d: usize, search: &SearchConfig, cfg: &EigenConfig) -> Result<(f64, SearchReport, SymbolicExpr)> {
    let [interior, boundary] = cfg.initial_batches[..] else {
        return Err(FexError::Config("initial batches need an interior and a boundary size".into()));
    };
    let problem = PdeProblem::eigen(d)?
        .with_batches(&[interior, boundary])?
        .with_eigen_penalties(cfg.lambda_boundary, cfg.lambda_norm)?;
    let report = search_fixed_tree(&problem, search)?;
    let template = TreeTemplate::with_depth(search.depth, problem.layout())?;
    let u = best_expression(&report, &template)?.ok_or(FexError::NoCandidate)?;
    let batch = rayleigh_batch(d, cfg, search.seed)?;
    let gamma = rayleigh_quotient(&u, squared_norm(problem.layout()), &batch)?;
    Ok((gamma, report, u))
}

pub fn iterate_eigenpair(d: usize, search: &SearchConfig, cfg: &EigenConfig) -> Result<EigenReport> {
    cfg.validate()?;
    let (gamma0, initial, _) = initial_gamma(d, search, cfg)?;
    let batch = rayleigh_batch(d, cfg, search.seed)?;
    let layout = PdeProblem::eigen(d)?.layout();
    let template = TreeTemplate::with_depth(search.depth, layout)?;
    let mut gammas = vec![gamma0];
    let mut steps = Vec::with_capacity(cfg.outer_iterations);
    let mut last_v: Option<SymbolicExpr> = None;
    for i in 0..cfg.outer_iterations {
        let gamma = *gammas.last().expect("gamma");
        let problem = PdeProblem::eigen_simplified(d, gamma)?.with_batches(&[cfg.simplified_batch])?;
        // a fresh controller per outer step
        let step_cfg = SearchConfig { seed: derive_seed(search.seed, &[tag::EIGEN_OUTER, i as u64]), ..search.clone() };
        let report = search_fixed_tree(&problem, &step_cfg)?;
        let v = best_expression(&report, &template)?.ok_or(FexError::NoCandidate)?;
        let next = rayleigh_quotient_exp(&v, squared_norm(layout), &batch)?;
        gammas.push(next);
        steps.push(EigenStep { gamma, v: v.bind_params().to_string(), search: report });
        last_v = Some(v);
    }
    let v = last_v.expect("at least one outer iteration");
    let u = v.exp();
    let points = sample_interior(&PdeProblem::eigen(d)?.domain().clone(), 10_000, &mut stream(search.seed, &[tag::ERROR_BATCH]))?.points;
    let error = PdeProblem::eigen(d)?.relative_error(&u, &points).and_then(|r| r.ok());
    Ok(EigenReport { initial, gammas, steps, eigenfunction: u.bind_params().to_string(), error })
}
