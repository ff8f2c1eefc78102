//! Repeated runs of one experiment and the files they leave behind.
//!
//! The output directory receives `config.toml` (the resolved config), one
//! `run_d{d}_r{rep}.json` per run as soon as it finishes, `summary.csv` and
//! `histogram.csv`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fex_core::eigen::{iterate_eigenpair, EigenReport};
use fex_core::expr::{InputLayout, TreeTemplate};
use fex_core::rng::{derive_seed, tag};
use fex_core::search::{search_expanding_trees, search_fixed_tree, ExpandingReport, SearchConfig, SearchReport};
use fex_core::FexError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentSpec, Mode};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RunOutcome {
    FixedTree(SearchReport),
    ExpandingTrees(ExpandingReport),
    EigenIterative(EigenReport),
    /// The search ended with an empty pool.
    NoCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub problem: String,
    pub dimension: usize,
    pub repetition: usize,
    pub seed: u64,
    pub config: ExperimentSpec,
    /// Constant-folded expression returned by the run.
    pub expression: Option<String>,
    pub loss: Option<f64>,
    pub error: Option<f64>,
    /// Eigenvalue estimates, eigen runs only.
    pub gammas: Vec<f64>,
    /// Template depth the histogram refers to.
    pub depth: Option<usize>,
    pub histogram: Vec<Vec<usize>>,
    pub seconds: f64,
    pub search_seconds: f64,
    pub fine_tune_seconds: f64,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub problem: String,
    pub mode: Mode,
    pub dimension: usize,
    pub runs: usize,
    /// Runs that returned an expression.
    pub found: usize,
    pub median_error: Option<f64>,
    pub min_error: Option<f64>,
    pub max_error: Option<f64>,
    pub median_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub dimension: usize,
    pub repetition: usize,
    pub node: usize,
    pub operator: String,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub runs: Vec<RunReport>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentOutput {
    pub fn found(&self) -> usize {
        self.runs.iter().filter(|r| r.expression.is_some()).count()
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Per-dimension statistics over runs, in order of first appearance.
pub fn summarize(spec: &ExperimentSpec, runs: &[RunReport]) -> Vec<SummaryRow> {
    let mut dims: Vec<usize> = Vec::new();
    for r in runs {
        if !dims.contains(&r.dimension) {
            dims.push(r.dimension);
        }
    }
    dims.into_iter()
        .map(|d| {
            let rs: Vec<&RunReport> = runs.iter().filter(|r| r.dimension == d).collect();
            let errors: Vec<f64> = rs.iter().filter_map(|r| r.error).filter(|e| e.is_finite()).collect();
            let losses: Vec<f64> = rs.iter().filter_map(|r| r.loss).filter(|l| l.is_finite()).collect();
            SummaryRow {
                problem: spec.problem.clone(),
                mode: spec.mode,
                dimension: d,
                runs: rs.len(),
                found: rs.iter().filter(|r| r.expression.is_some()).count(),
                median_error: median(errors.clone()),
                min_error: errors.iter().copied().reduce(f64::min),
                max_error: errors.iter().copied().reduce(f64::max),
                median_loss: median(losses),
            }
        })
        .collect()
}

fn histogram_rows(spec: &ExperimentSpec, run: &RunReport) -> Result<Vec<HistogramRow>, CliError> {
    let Some(depth) = run.depth else { return Ok(vec![]) };
    let set = spec.search.operator_set()?;
    let template = TreeTemplate::with_depth(depth, InputLayout::spatial(1))?;
    let mut rows = Vec::new();
    for (node, counts) in run.histogram.iter().enumerate() {
        let arity = template.nodes()[node].arity;
        for (k, &count) in counts.iter().enumerate() {
            rows.push(HistogramRow {
                dimension: run.dimension,
                repetition: run.repetition,
                node,
                operator: set.op_at(arity, k).name().to_string(),
                count,
            });
        }
    }
    Ok(rows)
}

fn from_search(report: &SearchReport) -> (Option<String>, Option<f64>, Option<f64>) {
    match report.best_candidate() {
        Some(c) => (Some(c.folded.clone()), Some(c.loss), c.error),
        None => (None, None, None),
    }
}

/// One repetition in one dimension.
pub fn run_once(spec: &ExperimentSpec, d: usize, rep: usize) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let seed = derive_seed(spec.seed, &[tag::REPETITION, d as u64, rep as u64]);
    let search = SearchConfig { seed, ..spec.search.clone() };
    let mut report = RunReport {
        problem: spec.problem.clone(),
        dimension: d,
        repetition: rep,
        seed,
        config: spec.clone(),
        expression: None,
        loss: None,
        error: None,
        gammas: vec![],
        depth: None,
        histogram: vec![],
        seconds: 0.0,
        search_seconds: 0.0,
        fine_tune_seconds: 0.0,
        outcome: RunOutcome::NoCandidate,
    };
    match spec.mode {
        Mode::FixedTree => {
            let r = search_fixed_tree(&spec.problem_for(d)?, &search)?;
            (report.expression, report.loss, report.error) = from_search(&r);
            report.depth = Some(r.depth);
            report.histogram = r.histogram.clone();
            report.search_seconds = r.search_seconds;
            report.fine_tune_seconds = r.fine_tune_seconds;
            report.outcome = RunOutcome::FixedTree(r);
        }
        Mode::ExpandingTrees => {
            let r = search_expanding_trees(&spec.problem_for(d)?, &spec.expanding.depths, spec.expanding.tolerance, &search)?;
            if let Some((run, _)) = r.best {
                (report.expression, report.loss, report.error) = from_search(&r.runs[run]);
                report.depth = Some(r.runs[run].depth);
                report.histogram = r.runs[run].histogram.clone();
            }
            report.search_seconds = r.runs.iter().map(|s| s.search_seconds).sum();
            report.fine_tune_seconds = r.runs.iter().map(|s| s.fine_tune_seconds).sum();
            report.outcome = RunOutcome::ExpandingTrees(r);
        }
        Mode::EigenIterative => match iterate_eigenpair(d, &search, &spec.eigen) {
            Ok(r) => {
                let searches = std::iter::once(&r.initial).chain(r.steps.iter().map(|s| &s.search));
                for s in searches {
                    report.search_seconds += s.search_seconds;
                    report.fine_tune_seconds += s.fine_tune_seconds;
                }
                let last = &r.steps.last().expect("outer iterations").search;
                report.loss = last.best_candidate().map(|c| c.loss);
                report.depth = Some(last.depth);
                report.histogram = last.histogram.clone();
                report.expression = Some(r.eigenfunction.clone());
                report.error = r.error;
                report.gammas = r.gammas.clone();
                report.outcome = RunOutcome::EigenIterative(r);
            }
            Err(FexError::NoCandidate) => {}
            Err(e) => return Err(e.into()),
        },
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), CliError> {
    let out = |e: csv::Error| CliError::Output(e.to_string());
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(path).map_err(out)?;
    if rows.is_empty() {
        w.write_record(header).map_err(out)?;
    }
    for r in rows {
        w.serialize(r).map_err(out)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every repetition in every dimension and writes the result files into `dir`.
pub fn run_experiment(spec: &ExperimentSpec, dir: &Path) -> Result<ExperimentOutput, CliError> {
    fs::create_dir_all(dir)?;
    let resolved = toml::to_string(spec).map_err(|e| CliError::Output(e.to_string()))?;
    fs::write(dir.join("config.toml"), resolved)?;
    let jobs: Vec<(usize, usize)> =
        spec.dimensions.iter().flat_map(|&d| (0..spec.repetitions).map(move |r| (d, r))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(d, rep)| {
            let report = run_once(spec, d, rep)?;
            write_json(&dir.join(format!("run_d{d}_r{rep}.json")), &report)?;
            Ok(report)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let summary = summarize(spec, &runs);
    write_csv(
        &dir.join("summary.csv"),
        &summary,
        &["problem", "mode", "dimension", "runs", "found", "median_error", "min_error", "max_error", "median_loss"],
    )?;
    let mut hist = Vec::new();
    for r in &runs {
        hist.extend(histogram_rows(spec, r)?);
    }
    write_csv(&dir.join("histogram.csv"), &hist, &["dimension", "repetition", "node", "operator", "count"])?;
    Ok(ExperimentOutput { dir: dir.to_path_buf(), runs, summary })
}
