//! Acceptance suite. Prints one line per criterion and exits non-zero if any fails.
//!
//! `cargo test -p fex-cli --test acceptance -- 2 5` runs criteria 2 and 5 only.
//! Criterion 9 takes hours and runs only with `--include-ignored` or `FEX_SLOW=1`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use fex_cli::runner::run_once;
use fex_cli::{run_experiment, validate_config, ExperimentSpec, Profile};
use fex_core::controller::{quantile_threshold, Controller, ControllerConfig};
use fex_core::expr::{parse_expression, Expression, InputLayout, OperatorSequence, OperatorSet, ParamVector, TreeTemplate, UnaryOp};
use fex_core::optim::{coarse_tune, fine_tune, CoarseTuneConfig, FineTuneConfig};
use fex_core::pde::{rayleigh_quotient, squared_norm, PdeProblem};
use fex_core::points::PointSet;
use fex_core::rng::{stream, Rng as Stream};
use fex_core::sampling::{sample_interior, DomainSpec};
use fex_core::search::{score_from_loss, CandidatePool, Insertion, Score};
use fex_core::symbolic::{DiffSelector, Graph, Tape};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_points(d: usize, n: usize, lo: f64, hi: f64, rng: &mut Stream) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(lo..hi)).collect()).collect()
}

/// Relative L2 distance of `u` from `½‖x‖²`, computed directly on uniform points of `[-1,1]^d`.
fn half_norm_error(u: impl Fn(&[f64]) -> f64, d: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, &[0xacce]);
    let (mut num, mut den) = (0.0, 0.0);
    for x in random_points(d, 20_000, -1.0, 1.0, &mut rng) {
        let t = 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        num += (u(&x) - t).powi(2);
        den += t * t;
    }
    (num / den).sqrt()
}

fn desk(text: &str) -> ExperimentSpec {
    validate_config(text, Some(Profile::Desk)).expect("desk config")
}

// 1: symbolic derivatives against central differences

fn richardson(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let c = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (4.0 * c(h / 2.0) - c(h)) / 3.0
}

fn rel_close(got: f64, want: f64) -> bool {
    (got - want).abs() <= 1e-6 * want.abs().max(got.abs()).max(1.0)
}

fn shifted(x: &[f64], k: usize, h: f64) -> PointSet {
    let mut y = x.to_vec();
    y[k] += h;
    PointSet::new(x.len(), y)
}

fn criterion_1() -> Outcome {
    let d = 2;
    let t = Arc::new(TreeTemplate::with_depth(3, InputLayout::spatial(d)).unwrap());
    let set = OperatorSet::standard();
    let mut rng = stream(1, &[1]);
    let (mut checks, mut worst) = (0usize, 0.0f64);
    let mut failures = Vec::new();
    for _ in 0..200 {
        let idx: Vec<usize> = t.nodes().iter().map(|n| rng.gen_range(0..set.width(n.arity))).collect();
        let ops = OperatorSequence::from_indices(&t, &set, &idx).unwrap();
        let e = Expression::new(t.clone(), ops, t.init_params(&mut rng)).unwrap();
        let firsts: Vec<_> = (0..d).map(|k| e.diff_x(DiffSelector::Partial(k)).unwrap()).collect();
        let seconds: Vec<Vec<_>> =
            (0..d).map(|i| (0..d).map(|j| e.diff_x(DiffSelector::Second(i, j)).unwrap()).collect()).collect();
        let mut g = Graph::new(d, t.n_params());
        let root = e.build_graph(&mut g);
        let tape = Tape::compile(&g, &[root]);
        let theta = e.params().0.clone();
        for x in random_points(d, 50, -1.0, 1.0, &mut rng) {
            let mut record = |what: String, got: f64, want: f64| {
                checks += 1;
                worst = worst.max((got - want).abs() / want.abs().max(got.abs()).max(1.0));
                if !rel_close(got, want) {
                    failures.push(format!("{:?} {what}: {got} vs {want}", e.ops()));
                }
            };
            let u = |p: &PointSet| e.evaluate_batch(p).unwrap()[0];
            for k in 0..d {
                record(format!("d/dx{k}"), firsts[k].eval_point(&x).unwrap(), richardson(|h| u(&shifted(&x, k, h)), 1e-3));
                for j in 0..d {
                    let fd = richardson(|h| firsts[k].eval_batch(&shifted(&x, j, h)).unwrap()[0], 1e-3);
                    record(format!("d2/dx{k}dx{j}"), seconds[k][j].eval_point(&x).unwrap(), fd);
                }
            }
            let pts = PointSet::new(d, x.clone());
            let mut grad = vec![0.0; theta.len()];
            tape.sums_and_grad(&theta, &pts, &[1.0], &mut grad).unwrap();
            for k in 0..theta.len() {
                let fd = richardson(
                    |h| {
                        let mut p = theta.clone();
                        p[k] += h;
                        e.with_params(ParamVector(p)).unwrap().evaluate_batch(&pts).unwrap()[0]
                    },
                    1e-3,
                );
                record(format!("d/dtheta{k}"), grad[k], fd);
            }
        }
    }
    let detail = format!("{checks} comparisons, worst relative gap {worst:.2e}");
    match failures.first() {
        None => Ok(detail),
        Some(f) => Err(format!("{detail}; {} over 1e-6, first: {f}", failures.len())),
    }
}

// 2: fine-tuning the known Poisson structure at d = 10

fn criterion_2() -> Outcome {
    let d = 10;
    let p = PdeProblem::poisson(d).unwrap();
    let t = TreeTemplate::with_depth(3, p.layout()).unwrap();
    let ops = OperatorSequence::parse(&t, "id add square square").unwrap();
    let f = p.compile(&t, &ops).unwrap();
    let mut rng = stream(2, &[]);
    let theta = t.init_params(&mut rng).0;
    let coarse = coarse_tune(&f, &p, &theta, &CoarseTuneConfig::default(), &mut rng).unwrap();
    let validation = p.sample(&mut stream(2, &[1])).unwrap();
    let r = fine_tune(&f, &p, &coarse.params, &FineTuneConfig::cosine(20_000, 0.01), &validation, &mut rng, None).unwrap();
    let e = Expression::new(Arc::new(t), ops, ParamVector(r.params)).unwrap();
    let err = half_norm_error(|x| e.evaluate_batch(&PointSet::new(d, x.to_vec())).unwrap()[0], d, 2);
    check(err < 1e-5, format!("relative L2 error {err:.3e} after 20000 steps (coarse loss {:.3e}, final loss {:.3e})", coarse.loss, r.loss))
}

// 3 and 10: desk-scale search, and its reproducibility

fn criterion_3() -> Outcome {
    let spec = desk("problem = \"poisson\"\ndimensions = [2]\nrepetitions = 6\nseed = 3\n");
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&spec, dir.path()).map_err(|e| e.to_string())?;
    let truth = parse_expression("0.5*(x1^2+x2^2)", InputLayout::spatial(2)).unwrap();
    let mut lines = Vec::new();
    let mut below = 0;
    let mut unequal = Vec::new();
    for r in &out.runs {
        let err = r.error.unwrap_or(f64::INFINITY);
        lines.push(format!("{err:.1e}"));
        if err < 1e-3 {
            below += 1;
        }
        // exact recovery: the error is at the level of coefficient round-off
        if err < 1e-8 {
            let text = r.expression.as_deref().unwrap_or("");
            if !algebraically_equal(text, &truth) {
                unequal.push(text.to_string());
            }
        }
    }
    check(
        below >= 1 && unequal.is_empty(),
        format!("errors [{}], {below}/6 below 1e-3, exact recoveries not equal to ½(x1²+x2²): {unequal:?}", lines.join(", ")),
    )
}

/// Equality as polynomials up to coefficient round-off: values, gradient and
/// Hessian agree at random points and all third derivatives vanish.
fn algebraically_equal(text: &str, truth: &fex_core::symbolic::SymbolicExpr) -> bool {
    let layout = InputLayout::spatial(2);
    let Ok(u) = parse_expression(text, layout) else { return false };
    let mut rng = stream(3, &[7]);
    let pts = random_points(2, 200, -2.0, 2.0, &mut rng);
    let same = |a: &fex_core::symbolic::SymbolicExpr, b: &fex_core::symbolic::SymbolicExpr, tol: f64| {
        pts.iter().all(|x| {
            let (p, q) = (a.eval_point(x).unwrap(), b.eval_point(x).unwrap());
            (p - q).abs() <= tol * q.abs().max(1.0)
        })
    };
    if !same(&u, truth, 1e-9) {
        return false;
    }
    for i in 0..2 {
        let ui = u.diff_x(DiffSelector::Partial(i)).unwrap();
        if !same(&ui, &truth.diff_x(DiffSelector::Partial(i)).unwrap(), 1e-9) {
            return false;
        }
        for j in 0..2 {
            let uij = u.diff_x(DiffSelector::Second(i, j)).unwrap();
            if !same(&uij, &truth.diff_x(DiffSelector::Second(i, j)).unwrap(), 1e-9) {
                return false;
            }
            for k in 0..2 {
                let uijk = uij.diff_x(DiffSelector::Partial(k)).unwrap();
                if !pts.iter().all(|x| uijk.eval_point(x).unwrap().abs() <= 1e-9) {
                    return false;
                }
            }
        }
    }
    true
}

fn criterion_10() -> Outcome {
    let spec = desk("problem = \"poisson\"\ndimensions = [2]\nrepetitions = 1\nseed = 3\n");
    let mut results = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&spec, dir.path()).map_err(|e| e.to_string())?;
        let csv = std::fs::read(dir.path().join("summary.csv")).unwrap();
        let hist = std::fs::read(dir.path().join("histogram.csv")).unwrap();
        results.push((out.runs[0].expression.clone(), csv, hist));
    }
    let same = results[0] == results[1];
    check(
        same && results[0].0.is_some(),
        format!("expression {:?}, summary and histogram CSV bitwise {}", results[0].0, if same { "identical" } else { "different" }),
    )
}

// 4: transport residual of the closed-form solution

fn criterion_4() -> Outcome {
    let d = 5;
    let p = PdeProblem::conservation(d).unwrap();
    let u = p.true_solution().unwrap();
    let layout = p.layout();
    let ut = u.diff_x(DiffSelector::Partial(layout.time_index().unwrap())).unwrap();
    let ux: Vec<_> = (0..d).map(|i| u.diff_x(DiffSelector::Partial(layout.spatial_index(i))).unwrap()).collect();
    let pts = sample_interior(p.domain(), 10_000, &mut stream(4, &[])).unwrap().points;
    let t = ut.eval_batch(&pts).unwrap();
    let xs: Vec<Vec<f64>> = ux.iter().map(|e| e.eval_batch(&pts).unwrap()).collect();
    let worst = (0..pts.len())
        .map(|j| (std::f64::consts::PI * d as f64 / 4.0 * t[j] - xs.iter().map(|c| c[j]).sum::<f64>()).abs())
        .fold(0.0, f64::max);
    check(worst < 1e-12, format!("max |residual| {worst:.2e} over 10000 points"))
}

// 5: Rayleigh quotient of the Gaussian ground state

fn criterion_5() -> Outcome {
    let layout = InputLayout::spatial(2);
    let u = parse_expression("exp(-0.5*(x1^2+x2^2))", layout).unwrap();
    let domain = DomainSpec::hypercube(2, -3.0, 3.0).unwrap();
    let batch = sample_interior(&domain, 1_000_000, &mut stream(5, &[])).unwrap();
    let q = rayleigh_quotient(&u, squared_norm(layout), &batch).unwrap();
    let rel = (q - 2.0).abs() / 2.0;
    check(rel < 0.02, format!("quotient {q:.5}, relative gap {rel:.2e}"))
}

// 6: iterative eigenpair at desk scale

fn criterion_6() -> Outcome {
    let spec = desk("problem = \"eigen\"\nmode = \"eigen_iterative\"\ndimensions = [2]\nrepetitions = 1\nseed = 6\n");
    let r = run_once(&spec, 2, 0).map_err(|e| e.to_string())?;
    let g = *r.gammas.last().ok_or("no eigenvalue trajectory")?;
    let rel = (g - 2.0).abs() / 2.0;
    let traj: Vec<String> = r.gammas.iter().map(|v| format!("{v:.4}")).collect();
    check(
        rel < 0.02 && r.gammas.len() == spec.eigen.outer_iterations + 1,
        format!("γ trajectory [{}], relative gap {rel:.2e}", traj.join(", ")),
    )
}

// 7: risk-seeking estimator

fn criterion_7() -> Outcome {
    let t = TreeTemplate::with_depth(3, InputLayout::spatial(2)).unwrap();
    let set = OperatorSet::standard();
    let cfg = ControllerConfig::default();
    let mut rng = stream(7, &[]);
    let c = Controller::new(&t, &set, &cfg, &mut rng).unwrap();
    let batch = c.sample_sequences(10, 0.1, &mut rng).unwrap();

    let mut flat = c.clone();
    let before = flat.params().phi.clone();
    let g = flat.policy_gradient_update(&batch, &[0.4; 10], cfg.nu, true).unwrap();
    let a = g.iter().all(|v| *v == 0.0) && flat.params().phi == before;

    let scores: Vec<f64> = (0..10).map(|k| 0.05 + 0.09 * k as f64).collect();
    let th = quantile_threshold(&scores, cfg.nu);
    let w = Controller::weights(&scores, cfg.nu, true);
    let zero_below = scores.iter().zip(&w).all(|(s, w)| *s >= th || *w == 0.0);
    // moving sub-threshold scores around cannot change the gradient
    let mut moved = scores.clone();
    for s in moved.iter_mut().filter(|s| **s < th) {
        *s *= 0.5;
    }
    let b = zero_below
        && Controller::weights(&moved, cfg.nu, true) == w
        && c.policy_gradient(&batch, &scores, cfg.nu, true).unwrap() == c.policy_gradient(&batch, &moved, cfg.nu, true).unwrap();

    let mut single = [0.1; 10];
    single[3] = 0.9;
    let small = ControllerConfig { learning_rate: 1e-4, ..cfg };
    let mut c2 = Controller::new(&t, &set, &small, &mut stream(7, &[])).unwrap();
    let lp0 = c2.log_prob(&batch.sequences[3].indices).unwrap();
    c2.policy_gradient_update(&batch, &single, cfg.nu, true).unwrap();
    let lp1 = c2.log_prob(&batch.sequences[3].indices).unwrap();
    let gain = lp1 - lp0;
    check(a && b && gain > 0.0, format!("zero update {a}, only S ≥ Ŝ contribute {b}, log-prob gain {gain:.3e}"))
}

// 8: pool and score invariants over random insertion sequences

fn criterion_8() -> Outcome {
    let t = TreeTemplate::with_depth(3, InputLayout::spatial(1)).unwrap();
    let set = OperatorSet::standard();
    let mut rng = stream(8, &[]);
    let mut violations = Vec::new();
    for case in 0..10_000 {
        let capacity = rng.gen_range(1..8);
        let mut pool = CandidatePool::new(capacity);
        for _ in 0..rng.gen_range(1..40) {
            let idx = vec![rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_range(0..4), rng.gen_range(0..3)];
            let loss = if rng.gen_bool(0.3) { rng.gen_range(0..4) as f64 } else { rng.gen_range(0.0..10.0) };
            let s = score_from_loss(loss);
            if !(s > 0.0 && s <= 1.0) {
                violations.push(format!("S({loss}) = {s}"));
            }
            let before: Vec<(u64, f64)> = pool.entries().iter().map(|e| (e.inserted, e.score.value)).collect();
            let known = pool.entries().iter().any(|e| e.indices == idx);
            let ops = OperatorSequence::from_indices(&t, &set, &idx).unwrap();
            let out = pool.insert(idx, ops, Score::from_loss(loss, vec![]));
            if pool.len() > capacity {
                violations.push(format!("case {case}: {} entries in a pool of {capacity}", pool.len()));
            }
            if !known && before.len() == capacity {
                let min = before.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
                let oldest = before.iter().filter(|e| e.1 == min).map(|e| e.0).min().unwrap();
                let expected = if s > min { Insertion::Replaced(oldest) } else { Insertion::Rejected };
                if out != expected {
                    violations.push(format!("case {case}: {out:?}, expected {expected:?}"));
                }
            }
        }
    }
    let mut l = 0.0;
    let mut prev = score_from_loss(0.0);
    for _ in 0..10_000 {
        l += rng.gen_range(0.0..1.0) * 10f64.powi(rng.gen_range(-3..4));
        let s = score_from_loss(l);
        if s > prev {
            violations.push(format!("S rose from {prev} to {s} at L = {l}"));
        }
        prev = s;
    }
    check(
        violations.is_empty() && prev > 0.0,
        format!("10000 insertion sequences, {} violations {:?}", violations.len(), violations.first()),
    )
}

// 9: error against template depth without the square operator

fn criterion_9() -> Outcome {
    let set = OperatorSet::standard().without_unary(UnaryOp::Square).unwrap();
    let names: Vec<String> = set.unary().iter().map(|u| format!("\"{}\"", u.name())).collect();
    let unary = format!("[{}]", names.join(", "));
    let mut medians = Vec::new();
    for depth in [3, 4, 6] {
        let spec = desk(&format!(
            "problem = \"poisson\"\ndimensions = [10]\nrepetitions = 6\nseed = 9\n[search]\ndepth = {depth}\nunary_ops = {unary}\n"
        ));
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&spec, dir.path()).map_err(|e| e.to_string())?;
        medians.push(out.summary[0].median_error.unwrap_or(f64::INFINITY));
    }
    check(
        medians[0] >= medians[1] && medians[1] >= medians[2],
        format!("median errors at depths 3, 4, 6: {:.3e}, {:.3e}, {:.3e}", medians[0], medians[1], medians[2]),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let slow = args.iter().any(|a| a == "--include-ignored" || a == "--ignored") || std::env::var_os("FEX_SLOW").is_some();
    let only: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "symbolic derivatives", criterion_1),
        (2, "exact-structure fine-tune", criterion_2),
        (3, "end-to-end desk search", criterion_3),
        (4, "transport residual", criterion_4),
        (5, "Rayleigh oracle", criterion_5),
        (6, "eigenpair iteration", criterion_6),
        (7, "risk-seeking estimator", criterion_7),
        (8, "pool and score invariants", criterion_8),
        (9, "error against tree size", criterion_9),
        (10, "determinism", criterion_10),
    ];
    // panics are reported on the criterion's line
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        if n == 9 && !slow && !only.contains(&9) {
            println!("criterion {n} ({name}): SKIPPED slow suite, run with --include-ignored or FEX_SLOW=1");
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} ({name}): PASS {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
