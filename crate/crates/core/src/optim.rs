//! Adam, dense BFGS, and the coarse/fine tuning procedures built on them.

use serde::{Deserialize, Serialize};

use crate::error::{FexError, Result};
use crate::pde::{Batches, CompiledFunctional, PdeProblem};
use crate::rng::Rng;

/// A differentiable scalar objective on a fixed sample.
pub trait Objective {
    fn value(&mut self, params: &[f64]) -> Result<f64>;
    fn value_and_grad(&mut self, params: &[f64], grad: &mut [f64]) -> Result<f64>;
}

/// A compiled functional on one set of batches.
pub struct BatchObjective<'a> {
    pub functional: &'a CompiledFunctional,
    pub batches: &'a Batches,
}

impl Objective for BatchObjective<'_> {
    fn value(&mut self, params: &[f64]) -> Result<f64> {
        self.functional.value(params, self.batches)
    }

    fn value_and_grad(&mut self, params: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.functional.value_and_grad(params, self.batches, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    cfg: AdamConfig,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self::with_config(n, lr, AdamConfig::default())
    }

    pub fn with_config(n: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr, cfg }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Descent step at the base learning rate.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        self.step_with_lr(params, grad, self.lr)
    }

    /// Descent step at an explicit learning rate. Leaves `self` and `params`
    /// untouched when the update would be non-finite.
    pub fn step_with_lr(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.m.len() || params.len() != self.m.len() {
            return Err(FexError::DimensionMismatch { expected: self.m.len(), got: grad.len() });
        }
        if !all_finite(grad) {
            return Err(FexError::NonFinite("Adam gradient"));
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let t = self.t + 1;
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        let mut m = self.m.clone();
        let mut v = self.v.clone();
        let mut next = params.to_vec();
        for i in 0..grad.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            next[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
        if !all_finite(&next) || !all_finite(&v) {
            return Err(FexError::NonFinite("Adam update"));
        }
        self.m = m;
        self.v = v;
        self.t = t;
        params.copy_from_slice(&next);
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, params: &[f64], grad: &[f64]) -> Result<(AdamState, Vec<f64>)> {
    let mut s = state.clone();
    let mut p = params.to_vec();
    s.step(&mut p, grad)?;
    Ok((s, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub initial: f64,
    pub horizon: usize,
}

impl LrSchedule {
    pub fn constant(initial: f64) -> Self {
        Self { kind: ScheduleKind::Constant, initial, horizon: 0 }
    }

    pub fn cosine(initial: f64, horizon: usize) -> Self {
        Self { kind: ScheduleKind::Cosine, initial, horizon }
    }

    pub fn rate(&self, step: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.initial,
            ScheduleKind::Cosine if self.horizon == 0 || step >= self.horizon => 0.0,
            ScheduleKind::Cosine => {
                let x = step as f64 / self.horizon as f64;
                0.5 * self.initial * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

pub const BFGS_MAX_HALVINGS: usize = 10;
/// Secant refinements of an accepted step.
pub const BFGS_REFINEMENTS: usize = 2;
pub const BFGS_CURVATURE_GUARD: f64 = 1e-10;

/// Dense inverse-Hessian approximation, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BfgsState {
    n: usize,
    h: Vec<f64>,
    last_step: f64,
    updates: usize,
}

/// Outcome of an accepted BFGS step.
#[derive(Debug, Clone, PartialEq)]
pub struct BfgsOutcome {
    pub params: Vec<f64>,
    pub loss: f64,
    pub grad: Vec<f64>,
    pub step: f64,
}

impl BfgsState {
    pub fn new(n: usize) -> Self {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        Self { n, h, last_step: 1.0, updates: 0 }
    }

    pub fn inverse_hessian(&self) -> &[f64] {
        &self.h
    }

    pub fn last_step(&self) -> f64 {
        self.last_step
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    fn reset(&mut self) {
        *self = Self { last_step: self.last_step, updates: self.updates, ..Self::new(self.n) };
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| dot(&self.h[i * self.n..(i + 1) * self.n], v)).collect()
    }

    /// Secant update `H ← (I - ρsyᵀ) H (I - ρysᵀ) + ρssᵀ`, written so that
    /// every entry pair `(i,j)`, `(j,i)` is computed by the same expression.
    fn update(&mut self, s: &[f64], y: &[f64]) -> bool {
        let sy = dot(s, y);
        if !(sy > BFGS_CURVATURE_GUARD) {
            return false;
        }
        let rho = 1.0 / sy;
        if self.updates == 0 {
            let gamma = sy / dot(y, y);
            self.h.iter_mut().for_each(|v| *v *= gamma);
        }
        let hy = self.apply(y);
        let yhy = dot(y, &hy);
        let c = rho + rho * rho * yhy;
        let n = self.n;
        for i in 0..n {
            for j in i..n {
                let v = self.h[i * n + j] + c * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                self.h[i * n + j] = v;
                self.h[j * n + i] = v;
            }
        }
        self.updates += 1;
        true
    }

    /// One quasi-Newton step from `params` with loss `f0` and gradient `g0`,
    /// both measured on `obj`'s sample.
    ///
    /// The trial step is 1 along `-H g0` (at most unit length before the
    /// first curvature update). A rejected trial is cut back up to
    /// [`BFGS_MAX_HALVINGS`] times, each cut shrinking it by a factor between
    /// 2 and 1000. Once a step is accepted, up to [`BFGS_REFINEMENTS`] secant
    /// estimates of the exact line minimum are tried while the directional
    /// derivative exceeds 1e-4 of its initial magnitude.
    pub fn step<O: Objective>(&mut self, obj: &mut O, params: &[f64], f0: f64, g0: &[f64]) -> Result<BfgsOutcome> {
        if g0.len() != self.n || params.len() != self.n {
            return Err(FexError::DimensionMismatch { expected: self.n, got: g0.len() });
        }
        if !f0.is_finite() || !all_finite(g0) {
            return Err(FexError::NonFinite("BFGS input"));
        }
        if g0.iter().all(|&g| g == 0.0) {
            return Ok(BfgsOutcome { params: params.to_vec(), loss: f0, grad: g0.to_vec(), step: 0.0 });
        }
        let mut p: Vec<f64> = self.apply(g0).iter().map(|v| -v).collect();
        let mut d0 = dot(g0, &p);
        if !(d0 < 0.0) {
            self.reset();
            p = g0.iter().map(|g| -g).collect();
            d0 = dot(g0, &p);
        }
        let at = |a: f64| -> Vec<f64> { params.iter().zip(&p).map(|(x, d)| x + a * d).collect() };
        let mut probe = |a: f64| -> Result<Option<(f64, Vec<f64>, Vec<f64>)>> {
            let x = at(a);
            let mut g = vec![0.0; x.len()];
            match obj.value_and_grad(&x, &mut g) {
                Ok(f) if f.is_finite() && all_finite(&g) => Ok(Some((f, x, g))),
                Ok(_) | Err(FexError::NonFinite(_)) | Err(FexError::DegenerateDenominator(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };

        // without curvature information the first trial moves a unit distance at most
        let a1 = if self.updates == 0 { (1.0 / dot(g0, g0).sqrt()).min(1.0) } else { 1.0 };
        let slope = |r: &Option<(f64, Vec<f64>, Vec<f64>)>| r.as_ref().map(|(f, _, g)| (*f, dot(g, &p)));
        // (step, value, slope) of every finite probe, origin included
        let mut seen = vec![(0.0, f0, d0)];
        let mut a = a1;
        let mut accepted = None;
        let mut reductions = 0;
        // smallest rejected trial
        let mut ceiling = f64::INFINITY;
        loop {
            let r = probe(a)?;
            let info = slope(&r);
            if let Some((f, d)) = info {
                seen.push((a, f, d));
            }
            match r {
                Some((f, x, g)) if f <= f0 => {
                    accepted = Some((a, f, x, g));
                    break;
                }
                _ if reductions == BFGS_MAX_HALVINGS => break,
                _ => {
                    ceiling = a;
                    reductions += 1;
                    a = match info {
                        Some((fa, da)) => backtrack(f0, d0, a, fa, da),
                        None => 0.5 * a,
                    };
                }
            }
        }
        for _ in 0..BFGS_REFINEMENTS {
            let Some((ac, fc, _, gc)) = accepted.as_ref() else { break };
            let (ac, fc) = (*ac, *fc);
            let dc = dot(gc, &p);
            if dc.abs() <= 1e-4 * d0.abs() {
                break;
            }
            let a_new = match refine_step(&seen, ac, dc, ceiling) {
                Some(a) => a,
                None => break,
            };
            let r = probe(a_new)?;
            if let Some((f, d)) = slope(&r) {
                seen.push((a_new, f, d));
            }
            match r {
                Some((f, x, g)) if f < fc => accepted = Some((a_new, f, x, g)),
                _ => break,
            }
        }
        let Some((a, f, x, g)) = accepted else {
            return Err(FexError::LineSearchFailure(BFGS_MAX_HALVINGS));
        };
        let s: Vec<f64> = x.iter().zip(params).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(g0).map(|(a, b)| a - b).collect();
        self.update(&s, &y);
        self.last_step = a;
        Ok(BfgsOutcome { params: x, loss: f, grad: g, step: a })
    }
}

/// Secant step on the directional derivative from the current point `(ac, dc)`:
/// interpolates when a probe of opposite slope brackets it, otherwise
/// extrapolates from the nearest probe below, at most to four times `ac`.
fn refine_step(seen: &[(f64, f64, f64)], ac: f64, dc: f64, ceiling: f64) -> Option<f64> {
    let bracket = if dc > 0.0 {
        seen.iter().filter(|q| q.0 < ac && q.2 < 0.0).max_by(|x, y| x.0.total_cmp(&y.0))
    } else {
        seen.iter().filter(|q| q.0 > ac && q.2 > 0.0).min_by(|x, y| x.0.total_cmp(&y.0))
    };
    let a = match bracket {
        Some(q) => {
            let (lo, hi) = if q.0 < ac { (q.0, ac) } else { (ac, q.0) };
            let w = hi - lo;
            let t = ac - dc * (ac - q.0) / (dc - q.2);
            t.clamp(lo + 0.1 * w, hi - 0.1 * w)
        }
        None => {
            let q = seen.iter().filter(|q| q.0 < ac).max_by(|x, y| x.0.total_cmp(&y.0))?;
            if !(dc > q.2) {
                return None;
            }
            let t = ac - dc * (ac - q.0) / (dc - q.2);
            t.min(ceiling).min(4.0 * ac)
        }
    };
    (a.is_finite() && a > 0.0 && (a - ac).abs() > 1e-12 * ac).then_some(a)
}

/// Next trial step below `a`: minimizer of the cubic matching value and slope
/// at 0 and `a` (quadratic fallback), kept within `[a/1000, a/2]`.
fn backtrack(f0: f64, d0: f64, a: f64, fa: f64, da: f64) -> f64 {
    let d1 = d0 + da - 3.0 * (fa - f0) / a;
    let disc = d1 * d1 - d0 * da;
    let cubic = if disc >= 0.0 {
        let d2 = disc.sqrt();
        a - a * (da + d2 - d1) / (da - d0 + 2.0 * d2)
    } else {
        f64::NAN
    };
    let quad = -d0 * a * a / (2.0 * (fa - f0 - d0 * a));
    let t = if cubic.is_finite() && cubic > 0.0 { cubic } else { quad };
    if t.is_finite() {
        t.clamp(a * 1e-3, a * 0.5)
    } else {
        a * 0.5
    }
}

/// Functional form of [`BfgsState::step`]: evaluates the loss and gradient at
/// `params` on `obj`, then steps.
pub fn bfgs_step<O: Objective>(state: &BfgsState, params: &[f64], obj: &mut O) -> Result<(BfgsState, BfgsOutcome)> {
    let mut g0 = vec![0.0; params.len()];
    let f0 = obj.value_and_grad(params, &mut g0)?;
    let mut s = state.clone();
    let out = s.step(obj, params, f0, &g0)?;
    Ok((s, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoarseTuneConfig {
    pub adam_steps: usize,
    pub bfgs_steps: usize,
    pub adam_lr: f64,
}

impl Default for CoarseTuneConfig {
    fn default() -> Self {
        Self { adam_steps: 20, bfgs_steps: 20, adam_lr: 0.001 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseResult {
    pub params: Vec<f64>,
    /// Functional on a fresh batch after tuning; `+inf` if tuning diverged.
    pub loss: f64,
}

/// Adam for `adam_steps` then BFGS for `bfgs_steps`, each step on a fresh batch.
///
/// Any non-finite or degenerate evaluation aborts with `loss = +inf`.
pub fn coarse_tune(
    functional: &CompiledFunctional,
    problem: &PdeProblem,
    params: &[f64],
    cfg: &CoarseTuneConfig,
    rng: &mut Rng,
) -> Result<CoarseResult> {
    let mut theta = params.to_vec();
    match coarse_inner(functional, problem, &mut theta, cfg, rng) {
        Ok(loss) => Ok(CoarseResult { params: theta, loss }),
        Err(FexError::NonFinite(_)) | Err(FexError::DegenerateDenominator(_)) => {
            Ok(CoarseResult { params: theta, loss: f64::INFINITY })
        }
        Err(e) => Err(e),
    }
}

fn coarse_inner(
    functional: &CompiledFunctional,
    problem: &PdeProblem,
    theta: &mut Vec<f64>,
    cfg: &CoarseTuneConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let n = theta.len();
    let mut grad = vec![0.0; n];
    let mut adam = AdamState::new(n, cfg.adam_lr);
    for _ in 0..cfg.adam_steps {
        let batches = problem.sample(rng)?;
        functional.value_and_grad(theta, &batches, &mut grad)?;
        adam.step(theta, &grad)?;
    }
    let mut bfgs = BfgsState::new(n);
    for _ in 0..cfg.bfgs_steps {
        let batches = problem.sample(rng)?;
        let mut obj = BatchObjective { functional, batches: &batches };
        let f0 = obj.value_and_grad(theta, &mut grad)?;
        match bfgs.step(&mut obj, theta, f0, &grad) {
            Ok(out) => *theta = out.params,
            Err(FexError::LineSearchFailure(_)) => break,
            Err(e) => return Err(e),
        }
    }
    let batches = problem.sample(rng)?;
    functional.value(theta, &batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub schedule: LrSchedule,
    /// Validation checkpoint interval, in steps.
    pub check_every: usize,
}

impl FineTuneConfig {
    pub fn cosine(steps: usize, lr: f64) -> Self {
        Self { steps, schedule: LrSchedule::cosine(lr, steps), check_every: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub validation_loss: f64,
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneResult {
    /// Best parameters seen at a validation checkpoint.
    pub params: Vec<f64>,
    /// Validation functional of `params`.
    pub loss: f64,
    pub trace: Vec<TracePoint>,
    /// Whether tuning stopped early after repeated non-finite steps.
    pub aborted: bool,
}

/// Adam with a learning-rate schedule on fresh batches; the best iterate is
/// chosen on the fixed `validation` batches. `error` is sampled at every
/// checkpoint into the trace.
pub fn fine_tune(
    functional: &CompiledFunctional,
    problem: &PdeProblem,
    params: &[f64],
    cfg: &FineTuneConfig,
    validation: &Batches,
    rng: &mut Rng,
    error: Option<&dyn Fn(&[f64]) -> Option<f64>>,
) -> Result<FineTuneResult> {
    let validate = |theta: &[f64]| match functional.value(theta, validation) {
        Ok(v) => Ok(v),
        Err(FexError::NonFinite(_)) | Err(FexError::DegenerateDenominator(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    };
    let checkpoint = |step: usize, theta: &[f64], trace: &mut Vec<TracePoint>| -> Result<f64> {
        let v = validate(theta)?;
        trace.push(TracePoint { step, validation_loss: v, error: error.and_then(|e| e(theta)) });
        Ok(v)
    };
    let mut trace = Vec::new();
    let mut best = params.to_vec();
    let mut best_loss = checkpoint(0, params, &mut trace)?;
    let mut theta = params.to_vec();
    let mut grad = vec![0.0; theta.len()];
    let mut adam = AdamState::new(theta.len(), cfg.schedule.initial);
    let mut scale = 1.0;
    let mut aborted = false;
    let every = cfg.check_every.max(1);
    for k in 0..cfg.steps {
        let batches = problem.sample(rng)?;
        let lr = cfg.schedule.rate(k) * scale;
        let stepped = functional
            .value_and_grad(&theta, &batches, &mut grad)
            .and_then(|_| adam.step_with_lr(&mut theta, &grad, lr));
        match stepped {
            Ok(()) => {}
            Err(FexError::NonFinite(_)) | Err(FexError::DegenerateDenominator(_)) => {
                if scale < 1.0 {
                    aborted = true;
                    break;
                }
                scale = 0.5;
            }
            Err(e) => return Err(e),
        }
        let done = k + 1;
        if done % every == 0 || done == cfg.steps {
            let v = checkpoint(done, &theta, &mut trace)?;
            if v < best_loss {
                best_loss = v;
                best.copy_from_slice(&theta);
            }
        }
    }
    Ok(FineTuneResult { params: best, loss: best_loss, trace, aborted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    struct Quadratic {
        a: Vec<f64>,
        b: Vec<f64>,
        n: usize,
        evals: usize,
    }

    impl Objective for Quadratic {
        fn value(&mut self, x: &[f64]) -> Result<f64> {
            self.evals += 1;
            let n = self.n;
            let ax: Vec<f64> = (0..n).map(|i| dot(&self.a[i * n..(i + 1) * n], x)).collect();
            Ok(0.5 * dot(x, &ax) - dot(&self.b, x))
        }

        fn value_and_grad(&mut self, x: &[f64], g: &mut [f64]) -> Result<f64> {
            let n = self.n;
            for i in 0..n {
                g[i] = dot(&self.a[i * n..(i + 1) * n], x) - self.b[i];
            }
            self.value(x)
        }
    }

    fn random_spd(n: usize, rng: &mut Rng) -> Vec<f64> {
        let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum::<f64>();
            }
            a[i * n + i] += 0.5;
        }
        a
    }

    #[test]
    fn adam_first_step_on_square() {
        let s = AdamState::new(1, 0.001);
        let (s1, p) = adam_step(&s, &[1.0], &[2.0]).unwrap();
        // reference: m̂ = g, v̂ = g², step = lr g / (|g| + eps)
        let want = 1.0 - 0.001 * 2.0 / (2.0 + 1e-8);
        assert_eq!(p[0], want);
        assert!((p[0] - 0.999).abs() < 1e-10);
        assert_eq!(s1.steps(), 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let s = AdamState::new(3, 0.1);
        let (_, p) = adam_step(&s, &[1.0, -2.0, 0.5], &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = AdamState::new(2, 0.01);
            let mut p = vec![0.3, -0.7];
            for k in 0..100 {
                let g = [2.0 * p[0] + (k as f64).sin(), 4.0 * p[1]];
                s.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_nonfinite_and_keeps_state() {
        let mut s = AdamState::new(1, 0.1);
        let mut p = vec![1.0];
        assert!(s.step(&mut p, &[f64::NAN]).is_err());
        assert_eq!((p[0], s.steps()), (1.0, 0));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::cosine(0.01, 20_000);
        assert_eq!(s.rate(0), 0.01);
        assert_eq!(s.rate(20_000), 0.0);
        assert!((s.rate(10_000) - 0.005).abs() < 1e-15);
        assert_eq!(LrSchedule::constant(0.3).rate(999), 0.3);
    }

    #[test]
    fn bfgs_solves_spd_quadratics_in_n_plus_two() {
        let mut rng = Rng::seed_from_u64(11);
        for n in 1..=5 {
            for _ in 0..20 {
                let a = random_spd(n, &mut rng);
                let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut q = Quadratic { a, b, n, evals: 0 };
                let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut s = BfgsState::new(n);
                let mut g = vec![0.0; n];
                let mut done = false;
                for _ in 0..n + 2 {
                    let f = q.value_and_grad(&x, &mut g).unwrap();
                    if dot(&g, &g).sqrt() < 1e-8 {
                        done = true;
                        break;
                    }
                    x = s.step(&mut q, &x, f, &g).unwrap().params;
                }
                q.value_and_grad(&x, &mut g).unwrap();
                assert!(done || dot(&g, &g).sqrt() < 1e-8, "n={n} |g|={}", dot(&g, &g).sqrt());
            }
        }
    }

    #[test]
    fn bfgs_one_dimensional_shifted_square() {
        // (θ-3)² = ½·2θ² - 6θ + 9
        let mut q = Quadratic { a: vec![2.0], b: vec![6.0], n: 1, evals: 0 };
        let mut s = BfgsState::new(1);
        let mut x = vec![0.0];
        for _ in 0..3 {
            let (s1, out) = bfgs_step(&s, &x, &mut q).unwrap();
            s = s1;
            x = out.params;
        }
        assert!((x[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn bfgs_at_minimum_is_a_no_op() {
        let mut q = Quadratic { a: vec![2.0], b: vec![6.0], n: 1, evals: 0 };
        let (_, out) = bfgs_step(&BfgsState::new(1), &[3.0], &mut q).unwrap();
        assert_eq!(out.params, vec![3.0]);
        assert_eq!(out.step, 0.0);
    }

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn value(&mut self, x: &[f64]) -> Result<f64> {
            Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        }

        fn value_and_grad(&mut self, x: &[f64], g: &mut [f64]) -> Result<f64> {
            g[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
            g[1] = 200.0 * (x[1] - x[0] * x[0]);
            self.value(x)
        }
    }

    #[test]
    fn bfgs_keeps_symmetry_and_never_increases_loss() {
        let mut s = BfgsState::new(2);
        let mut x = vec![-1.2, 1.0];
        let mut g = vec![0.0; 2];
        for _ in 0..60 {
            let f = Rosenbrock.value_and_grad(&x, &mut g).unwrap();
            match s.step(&mut Rosenbrock, &x, f, &g) {
                Ok(out) => {
                    assert!(out.loss <= f);
                    x = out.params;
                }
                Err(FexError::LineSearchFailure(_)) => break,
                Err(e) => panic!("{e}"),
            }
            let h = s.inverse_hessian();
            assert!((h[1] - h[2]).abs() < 1e-12);
        }
        assert!(Rosenbrock.value(&x).unwrap() < 1e-6);
    }
}
