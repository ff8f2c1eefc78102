//! The search loop over operator sequences on a fixed tree, and its
//! progressively expanding variant.
//!
//! Seeds: every stream is `stream(seed, path)` with paths
//! `[CONTROLLER_INIT]`, `[CONTROLLER_SAMPLE, it]`, `[SCORE, it, k]`,
//! `[SELECTION]`, `[ERROR_BATCH]` and `[FINE_TUNE, j]`, so serial and parallel
//! execution agree.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerConfig};
use crate::error::{FexError, Result};
use crate::expr::{format_expression, Expression, OperatorSequence, OperatorSet, ParamVector, TreeTemplate};
use crate::optim::{coarse_tune, fine_tune, CoarseTuneConfig, FineTuneConfig, TracePoint};
use crate::pde::{CompiledFunctional, PdeProblem};
use crate::rng::{derive_seed, stream, tag, Rng};
use crate::sampling::sample_interior;

/// `(1 + L)^-1`, with `+inf` and NaN mapped to 0.
pub fn score_from_loss(loss: f64) -> f64 {
    if loss.is_nan() || loss == f64::INFINITY {
        0.0
    } else {
        1.0 / (1.0 + loss.max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub value: f64,
    pub loss: f64,
    pub params: Vec<f64>,
}

impl Score {
    pub fn from_loss(loss: f64, params: Vec<f64>) -> Self {
        Self { value: score_from_loss(loss), loss, params }
    }
}

/// Initializes parameters from `rng`, coarse-tunes them and scores the result.
/// Failures of any kind score 0.
pub fn compute_score(
    template: &TreeTemplate,
    functional: Option<&CompiledFunctional>,
    problem: &PdeProblem,
    coarse: &CoarseTuneConfig,
    rng: &mut Rng,
) -> Score {
    let theta = template.init_params(rng).0;
    let Some(f) = functional else {
        return Score::from_loss(f64::INFINITY, theta);
    };
    match coarse_tune(f, problem, &theta, coarse, rng) {
        Ok(r) => Score::from_loss(r.loss, r.params),
        Err(_) => Score::from_loss(f64::INFINITY, theta),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub indices: Vec<usize>,
    pub ops: OperatorSequence,
    pub score: Score,
    /// Insertion counter; smaller is older.
    pub inserted: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insertion {
    Added,
    /// Evicted the entry with this insertion counter.
    Replaced(u64),
    /// Duplicate sequence whose stored score was raised.
    Improved,
    Rejected,
}

/// Capacity-bounded archive of the best-scoring sequences, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    capacity: usize,
    entries: Vec<PoolEntry>,
    counter: u64,
}

impl CandidatePool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: Vec::with_capacity(capacity + 1), counter: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn min_score(&self) -> Option<f64> {
        self.entries.last().map(|e| e.score.value)
    }

    fn sort(&mut self) {
        self.entries
            .sort_by(|a, b| b.score.value.total_cmp(&a.score.value).then(a.inserted.cmp(&b.inserted)));
    }

    pub fn insert(&mut self, indices: Vec<usize>, ops: OperatorSequence, score: Score) -> Insertion {
        if !score.value.is_finite() || self.capacity == 0 {
            return Insertion::Rejected;
        }
        if let Some(e) = self.entries.iter_mut().find(|e| e.indices == indices) {
            if score.value > e.score.value {
                e.score = score;
                self.sort();
                return Insertion::Improved;
            }
            return Insertion::Rejected;
        }
        let entry = PoolEntry { indices, ops, score, inserted: self.counter };
        if self.entries.len() < self.capacity {
            self.counter += 1;
            self.entries.push(entry);
            self.sort();
            return Insertion::Added;
        }
        let min = self.min_score().expect("full pool");
        if entry.score.value <= min {
            return Insertion::Rejected;
        }
        // among entries tied at the minimum, the oldest goes
        let victim = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.score.value == min)
            .min_by_key(|(_, e)| e.inserted)
            .map(|(i, _)| i)
            .expect("minimum entry");
        let evicted = self.entries.remove(victim).inserted;
        self.counter += 1;
        self.entries.push(entry);
        self.sort();
        Insertion::Replaced(evicted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Controller iterations `T`.
    pub iterations: usize,
    /// Sequences per iteration `N`.
    pub batch_size: usize,
    /// Pool capacity `K`.
    pub pool_capacity: usize,
    pub coarse: CoarseTuneConfig,
    /// Fine-tune steps `T3`.
    pub fine_steps: usize,
    pub fine_lr: f64,
    pub controller: ControllerConfig,
    /// Depth of the tree template.
    pub depth: usize,
    pub binary_ops: Vec<String>,
    pub unary_ops: Vec<String>,
    pub seed: u64,
    /// Points used for the relative L2 error.
    pub error_points: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let set = OperatorSet::standard();
        Self {
            iterations: 1000,
            batch_size: 10,
            pool_capacity: 10,
            coarse: CoarseTuneConfig::default(),
            fine_steps: 20_000,
            fine_lr: 0.01,
            controller: ControllerConfig::default(),
            depth: 3,
            binary_ops: set.binary().iter().map(|b| b.name().to_string()).collect(),
            unary_ops: set.unary().iter().map(|u| u.name().to_string()).collect(),
            seed: 0,
            error_points: 10_000,
        }
    }
}

impl SearchConfig {
    pub fn operator_set(&self) -> Result<OperatorSet> {
        OperatorSet::from_names(&self.binary_ops, &self.unary_ops)
    }

    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        self.operator_set()?;
        if self.depth == 0 {
            return Err(FexError::Config("template depth must be at least 1".into()));
        }
        if self.iterations > 0 && self.batch_size == 0 {
            return Err(FexError::Config("batch size must be positive".into()));
        }
        if !(self.fine_lr > 0.0 && self.fine_lr.is_finite()) {
            return Err(FexError::Config(format!("fine-tune learning rate must be positive, got {}", self.fine_lr)));
        }
        if !(self.coarse.adam_lr > 0.0 && self.coarse.adam_lr.is_finite()) {
            return Err(FexError::Config(format!("coarse-tune learning rate must be positive, got {}", self.coarse.adam_lr)));
        }
        if self.error_points == 0 {
            return Err(FexError::Config("error points must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub ops: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub mean_score: f64,
    pub best_score: f64,
    /// Controller objective at the sampled sequences, before the update.
    pub objective: f64,
    pub pool: Vec<PoolSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub ops: String,
    pub indices: Vec<usize>,
    pub score: f64,
    pub coarse_loss: f64,
    /// Fine-tuned functional value on the validation batches.
    pub loss: f64,
    pub error: Option<f64>,
    /// Tree form with every parameter printed.
    pub expression: String,
    /// Constant-folded form.
    pub folded: String,
    pub params: Vec<f64>,
    pub trace: Vec<TracePoint>,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub depth: usize,
    pub iterations: Vec<IterationRecord>,
    pub candidates: Vec<CandidateResult>,
    /// Index into `candidates` of the smallest fine-tuned functional value.
    pub best: Option<usize>,
    /// Per node, operator counts over the final pool.
    pub histogram: Vec<Vec<usize>>,
    pub search_seconds: f64,
    pub fine_tune_seconds: f64,
}

impl SearchReport {
    pub fn best_candidate(&self) -> Option<&CandidateResult> {
        self.best.map(|i| &self.candidates[i])
    }
}

/// Trace points kept in reports: every 100th step and the last.
const TRACE_STRIDE: usize = 100;

type Cache = HashMap<Vec<usize>, Option<Arc<CompiledFunctional>>>;

/// Compiled functionals are kept for this many distinct sequences before the cache is reset.
const CACHE_LIMIT: usize = 4096;

pub fn search_fixed_tree(problem: &PdeProblem, cfg: &SearchConfig) -> Result<SearchReport> {
    cfg.validate()?;
    let set = cfg.operator_set()?;
    let template = Arc::new(TreeTemplate::with_depth(cfg.depth, problem.layout())?);
    let seed = cfg.seed;
    let mut controller = Controller::new(&template, &set, &cfg.controller, &mut stream(seed, &[tag::CONTROLLER_INIT]))?;
    let mut pool = CandidatePool::new(cfg.pool_capacity);
    let mut cache: Cache = HashMap::new();
    let mut iterations = Vec::with_capacity(cfg.iterations);
    let started = Instant::now();
    for it in 0..cfg.iterations {
        let it64 = it as u64;
        let batch = controller.sample_sequences(cfg.batch_size, cfg.controller.epsilon, &mut stream(seed, &[tag::CONTROLLER_SAMPLE, it64]))?;
        if cache.len() > CACHE_LIMIT {
            cache.clear();
        }
        let missing: Vec<&Vec<usize>> = {
            let mut m: Vec<&Vec<usize>> = Vec::new();
            for s in &batch.sequences {
                if !cache.contains_key(&s.indices) && !m.contains(&&s.indices) {
                    m.push(&s.indices);
                }
            }
            m
        };
        let compiled: Vec<(Vec<usize>, Option<Arc<CompiledFunctional>>)> = missing
            .par_iter()
            .map(|idx| {
                let f = OperatorSequence::from_indices(&template, &set, idx)
                    .and_then(|ops| problem.compile(&template, &ops))
                    .ok()
                    .map(Arc::new);
                ((*idx).clone(), f)
            })
            .collect();
        cache.extend(compiled);
        let scores: Vec<Score> = batch
            .sequences
            .par_iter()
            .enumerate()
            .map(|(k, s)| {
                let f = cache.get(&s.indices).and_then(|f| f.as_deref());
                compute_score(&template, f, problem, &cfg.coarse, &mut stream(seed, &[tag::SCORE, it64, k as u64]))
            })
            .collect();
        let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
        for (s, score) in batch.sequences.iter().zip(scores) {
            pool.insert(s.indices.clone(), s.ops.clone(), score);
        }
        let nu = cfg.controller.nu;
        let rs = cfg.controller.risk_seeking;
        let objective = controller.surrogate(&batch, &values, nu, rs)?;
        controller.policy_gradient_update(&batch, &values, nu, rs)?;
        iterations.push(IterationRecord {
            iteration: it,
            threshold: crate::controller::quantile_threshold(&values, nu),
            mean_score: values.iter().sum::<f64>() / values.len() as f64,
            best_score: values.iter().copied().fold(0.0, f64::max),
            scores: values,
            objective,
            pool: pool.entries().iter().map(|e| PoolSnapshot { ops: e.ops.to_string(), score: e.score.value }).collect(),
        });
    }
    let search_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let validation = problem.sample(&mut stream(seed, &[tag::SELECTION]))?;
    let error_points = sample_interior(problem.domain(), cfg.error_points, &mut stream(seed, &[tag::ERROR_BATCH]))?.points;
    let fine = FineTuneConfig::cosine(cfg.fine_steps, cfg.fine_lr);
    let candidates: Vec<CandidateResult> = pool
        .entries()
        .par_iter()
        .enumerate()
        .map(|(j, e)| -> Result<CandidateResult> {
            let f = match cache.get(&e.indices).cloned().flatten() {
                Some(f) => f,
                None => Arc::new(problem.compile(&template, &e.ops)?),
            };
            let mut rng = stream(seed, &[tag::FINE_TUNE, j as u64]);
            let (params, loss, trace, aborted) =
                match fine_tune(&f, problem, &e.score.params, &fine, &validation, &mut rng, None) {
                    Ok(r) => (r.params, r.loss, r.trace, r.aborted),
                    Err(FexError::NonFinite(_)) | Err(FexError::DegenerateDenominator(_)) => {
                        (e.score.params.clone(), f64::INFINITY, Vec::new(), true)
                    }
                    Err(err) => return Err(err),
                };
            let expr = Expression::new(template.clone(), e.ops.clone(), ParamVector(params.clone()))?;
            let sym = expr.to_symbolic();
            let error = problem.relative_error(&sym, &error_points).and_then(|r| r.ok());
            let last = trace.last().map(|t| t.step);
            let trace = trace.into_iter().filter(|t| t.step % TRACE_STRIDE == 0 || Some(t.step) == last).collect();
            Ok(CandidateResult {
                ops: e.ops.to_string(),
                indices: e.indices.clone(),
                score: e.score.value,
                coarse_loss: e.score.loss,
                loss,
                error,
                expression: format_expression(&expr),
                folded: sym.bind_params().to_string(),
                params,
                trace,
                aborted,
            })
        })
        .collect::<Result<_>>()?;
    let best = candidates
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.loss.total_cmp(&b.1.loss))
        .map(|(i, _)| i);
    let mut histogram: Vec<Vec<usize>> = template.nodes().iter().map(|n| vec![0; set.width(n.arity)]).collect();
    for e in pool.entries() {
        for (node, &i) in e.indices.iter().enumerate() {
            histogram[node][i] += 1;
        }
    }
    Ok(SearchReport {
        depth: cfg.depth,
        iterations,
        candidates,
        best,
        histogram,
        search_seconds,
        fine_tune_seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandingReport {
    pub runs: Vec<SearchReport>,
    /// `(run, candidate)` of the returned expression.
    pub best: Option<(usize, usize)>,
    /// Whether a run met the tolerance before the last template.
    pub met_tolerance: bool,
}

impl ExpandingReport {
    pub fn best_candidate(&self) -> Option<&CandidateResult> {
        self.best.map(|(r, c)| &self.runs[r].candidates[c])
    }
}

/// Runs the fixed-tree search for each depth in order, stopping at the first
/// whose best functional value is at most `tolerance`.
pub fn search_expanding_trees(problem: &PdeProblem, depths: &[usize], tolerance: f64, cfg: &SearchConfig) -> Result<ExpandingReport> {
    if depths.is_empty() {
        return Err(FexError::Config("at least one template is required".into()));
    }
    let mut runs: Vec<SearchReport> = Vec::new();
    let mut best: Option<(usize, usize)> = None;
    let mut met_tolerance = false;
    for (r, &depth) in depths.iter().enumerate() {
        let run_cfg = SearchConfig { depth, seed: derive_seed(cfg.seed, &[tag::TEMPLATE, r as u64]), ..cfg.clone() };
        let report = search_fixed_tree(problem, &run_cfg)?;
        let found = report.best.map(|c| (r, c, report.candidates[c].loss));
        runs.push(report);
        if let Some((r, c, loss)) = found {
            let better = best.is_none_or(|(br, bc)| loss < runs[br].candidates[bc].loss);
            if better {
                best = Some((r, c));
            }
            if loss <= tolerance {
                met_tolerance = true;
                break;
            }
        }
    }
    Ok(ExpandingReport { runs, best, met_tolerance })
}
